"""Desk-scale supervised training loop.

Targets are linear HDR images normalized by their own maximum and lifted to
a gamma-0.45 domain; the loss is mean absolute error plus a 0.1-weighted
mean absolute error on forward-difference gradient maps.  Optimization is
Adam with a halving learning-rate schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .degrade import DegradationConfig, conventional_degrade
from .imgio import Image, NONLINEAR_SDR
from .model import ModelConfig, Network, layer_table
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    lr_half_every: int = 250_000
    batch: int = 1
    patch_size: int = 64
    max_iters: int = 500
    loss_grad_weight: float = 0.1
    gamma: float = 0.45
    seed: int = 0
    apply_degradation: bool = True

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0,1)")
        if self.loss_grad_weight < 0:
            raise ValueError("loss_grad_weight must be >= 0")
        if self.lr_half_every < 1 or self.batch < 1 or self.patch_size < 1:
            raise ValueError("lr_half_every, batch, patch_size must be >= 1")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Pre/post-processing
# ---------------------------------------------------------------------------

def preprocess_gamma(y: Image, gamma: float = 0.45):
    """Normalize linear HDR by its maximum and lift to the gamma domain.

    Returns (gamma-domain image, recorded maximum) so the mapping inverts
    exactly: postprocess(preprocess(y)) * max_y == y.
    """
    data = np.asarray(y.data, dtype=np.float64)
    if data.min() < 0:
        raise ValueError("linear HDR input must be non-negative")
    max_y = float(data.max())
    if max_y <= 0:
        raise ValueError("cannot normalize an all-zero image")
    out = (data / max_y) ** gamma
    return Image(out.astype(np.float32), NONLINEAR_SDR, max_luminance=max_y), max_y


def postprocess_gamma(y_gamma: np.ndarray, gamma: float = 0.45) -> np.ndarray:
    """Inverse of the gamma lift; output is relative linear HDR."""
    return np.clip(np.asarray(y_gamma, dtype=np.float64), 0.0, None) ** (1.0 / gamma)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss_terms(pred: Tensor, target: Tensor, grad_weight: float = 0.1):
    """(total, l1, lg) loss tensors; total = l1 + grad_weight * lg."""
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    l1 = T.mean_all(T.abs_(diff))
    lg = T.mean_all(T.abs_(T.grad_map(diff)))
    total = T.add(l1, T.scale(lg, grad_weight))
    return total, l1, lg


# ---------------------------------------------------------------------------
# Initialization and optimizer
# ---------------------------------------------------------------------------

def kaiming_init(cfg: ModelConfig, rng: np.random.Generator) -> Network:
    """Conv weights ~ N(0, 2/fan_in) with fan_in = (in/groups) * k^2; zero biases."""
    weights = {}
    for li in layer_table(cfg):
        s = li.spec
        fan_in = (s.in_channels // s.groups) * s.kernel ** 2
        std = np.sqrt(2.0 / fan_in)
        weights[f"{li.name}.weight"] = Tensor(
            rng.normal(0.0, std, s.weight_shape).astype(np.float32), requires_grad=True)
        weights[f"{li.name}.bias"] = Tensor(
            np.zeros((1, s.out_channels, 1, 1), dtype=np.float32), requires_grad=True)
    return Network(cfg, weights)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float):
    """Bias-corrected Adam update in place; parameters without grads are kept."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in {name} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 0.5 ** (iteration // cfg.lr_half_every)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _sample_patch(rng, hdr: Image, sdr: Image, size: int):
    h, w = hdr.height, hdr.width
    if (h, w) != (sdr.height, sdr.width):
        raise ValueError("HDR/SDR pair dimensions differ")
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} smaller than patch size {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return (Image(hdr.data[y:y + size, x:x + size].copy(), hdr.domain),
            Image(sdr.data[y:y + size, x:x + size].copy(), sdr.domain))


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig,
               dataset: list[tuple[Image, Image]],
               degrade_cfg: DegradationConfig | None = None,
               log_path=None):
    """Iterate patch sampling, on-the-fly degradation, forward/backward, Adam.

    dataset holds (linear HDR label, clean nonlinear SDR input) pairs.
    Returns (trained Network, list of per-iteration records).
    """
    train_cfg.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(train_cfg.seed)
    net = kaiming_init(model_cfg, rng)
    state = AdamState()
    degrade_cfg = degrade_cfg or DegradationConfig(seed=train_cfg.seed)
    trace = []
    log = open(log_path, "w") if log_path else None
    try:
        for it in range(train_cfg.max_iters):
            lr = lr_schedule(it, train_cfg)
            batch_x, batch_y = [], []
            for _ in range(train_cfg.batch):
                hdr, sdr = dataset[int(rng.integers(0, len(dataset)))]
                hdr_p, sdr_p = _sample_patch(rng, hdr, sdr, train_cfg.patch_size)
                if train_cfg.apply_degradation:
                    sdr_p, _ = conventional_degrade(sdr_p, degrade_cfg, rng)
                target, _ = preprocess_gamma(hdr_p, train_cfg.gamma)
                batch_x.append(sdr_p.data.transpose(2, 0, 1))
                batch_y.append(target.data.transpose(2, 0, 1))
            x = Tensor(np.stack(batch_x).astype(np.float32))
            y = Tensor(np.stack(batch_y).astype(np.float32))
            for p in net.weights.values():
                p.zero_grad()
            pred = net.forward(x)
            total, l1, lg = loss_terms(pred, y, train_cfg.loss_grad_weight)
            tval = total.item()
            if not np.isfinite(tval):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            T.backward(total)
            adam_step(net.weights, state, lr)
            rec = {"iter": it, "lr": lr, "l1": l1.item(), "lg": lg.item(), "total": tval}
            trace.append(rec)
            if log:
                log.write(f"{it}, {lr:.6g}, {rec['l1']:.6f}, {rec['lg']:.6f}, {tval:.6f}\n")
    finally:
        if log:
            log.close()
    return net, trace
