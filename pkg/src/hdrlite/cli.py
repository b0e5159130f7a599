"""Batch command-line front end.

Subcommands: degrade, stats, train, infer, eval, info, bench.  Every run
echoes its resolved configuration before acting.  Exit codes: 0 success,
1 failure, 2 usage error, 3 partial success (some files failed).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import degrade as D
from . import imgio
from . import metrics as M
from . import model as mod
from . import training as TR

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_PARTIAL = 3

IMAGE_EXTS = (".pfm", ".hdr", ".ppm")


def _echo(title: str, kv: dict):
    print(f"[{title}]")
    for k, v in kv.items():
        print(f"  {k} = {v}")


def _load_model_config(path) -> mod.ModelConfig:
    if path is None:
        return mod.ModelConfig()
    cfg, extra = mod._parse_config_text(Path(path).read_text())
    if extra:
        raise ValueError(f"unknown model config keys: {sorted(extra)}")
    cfg.validate()
    return cfg


def _load_degrade_config(path, seed=None) -> D.DegradationConfig:
    cfg = D.config_from_kv(Path(path).read_text()) if path else D.DegradationConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg.validate()
    return cfg


def _list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix in IMAGE_EXTS)


def _parse_resolution(text: str):
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"resolution must look like 1920x1080, got {text!r}") from None
    if w < 1 or h < 1:
        raise ValueError("resolution must be positive")
    return w, h


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_degrade(args) -> int:
    cfg = _load_degrade_config(args.config, args.seed)
    _echo("degrade", {"in": args.in_dir, "out": args.out_dir,
                      **dict(l.split("=", 1) for l in D.config_to_kv(cfg).splitlines())})
    files = _list_images(args.in_dir)
    if not files:
        print("error: no input images", file=sys.stderr)
        return EXIT_FAIL
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for idx, path in enumerate(files):
        try:
            img = imgio.read_image(path)
            rng = np.random.default_rng([cfg.seed, idx])
            degraded, manifest = D.conventional_degrade(img, cfg, rng)
            out_path = out_dir / (path.stem + ".ppm")
            imgio.write_image(out_path, degraded)
            (out_dir / (path.stem + ".manifest.txt")).write_text(
                D.manifest_to_kv(manifest))
            print(f"degraded {path.name} -> {out_path.name} "
                  f"(sigma={manifest['sigma']:.5f} qf1={manifest['qf1']} "
                  f"scale={manifest['rescale']:.3f})")
        except Exception as e:  # per-file skip-and-report policy
            failures.append((path.name, str(e)))
            print(f"error: {path.name}: {e}", file=sys.stderr)
    if failures:
        print(f"{len(failures)}/{len(files)} files failed", file=sys.stderr)
        return EXIT_PARTIAL if len(failures) < len(files) else EXIT_FAIL
    return EXIT_OK


def cmd_stats(args) -> int:
    _echo("stats", {"in": args.in_dir, "over_code": args.over_code,
                    "under_code": args.under_code})
    files = _list_images(args.in_dir)
    if not files:
        print("error: no input images", file=sys.stderr)
        return EXIT_FAIL
    images = [imgio.read_image(p) for p in files]
    report = imgio.dataset_stats(images, over_code=args.over_code,
                                 under_code=args.under_code)
    print(report.to_text())
    print(report.to_kv())
    return EXIT_OK


def _load_pairs(data_dir):
    """HDR label + SDR input pairs matched by stem: stem.pfm/.hdr with stem.ppm."""
    data_dir = Path(data_dir)
    pairs = []
    for hdr_path in sorted(data_dir.iterdir()):
        if hdr_path.suffix not in (".pfm", ".hdr"):
            continue
        sdr_path = hdr_path.with_suffix(".ppm")
        if not sdr_path.exists():
            continue
        pairs.append((imgio.read_image(hdr_path), imgio.read_image(sdr_path)))
    return pairs


def cmd_train(args) -> int:
    model_cfg = _load_model_config(args.model_config)
    train_cfg = TR.TrainConfig(max_iters=args.iters, patch_size=args.patch_size,
                               lr0=args.lr, seed=args.seed,
                               apply_degradation=not args.no_degrade)
    degrade_cfg = _load_degrade_config(args.degrade_config, args.seed)
    _echo("train", {"data": args.data, "out": args.out, "iters": args.iters,
                    "patch_size": args.patch_size, "lr0": args.lr,
                    "seed": args.seed, "degradation": not args.no_degrade,
                    "model": model_cfg})
    pairs = _load_pairs(args.data)
    if not pairs:
        print("error: no HDR/SDR pairs found (expected stem.pfm|.hdr + stem.ppm)",
              file=sys.stderr)
        return EXIT_FAIL
    net, trace = TR.train_loop(model_cfg, train_cfg, pairs, degrade_cfg,
                               log_path=args.log)
    mod.save_checkpoint(args.out, net, extra={
        "opt.beta1": TR.ADAM_BETA1, "opt.beta2": TR.ADAM_BETA2,
        "opt.eps": TR.ADAM_EPS, "train.seed": train_cfg.seed,
    })
    if trace:
        print(f"final loss {trace[-1]['total']:.6f} after {len(trace)} iterations")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    net, extra = mod.load_checkpoint(args.checkpoint)
    _echo("infer", {"checkpoint": args.checkpoint, "in": args.in_path,
                    "out": args.out_path, "model": net.cfg})
    sdr = imgio.read_image(args.in_path)
    hdr = M.reconstruct_hdr(net, sdr)
    imgio.write_image(args.out_path, hdr)
    print(f"wrote {args.out_path}")
    if args.preview:
        codes = M.tonemap_preview(hdr)
        imgio.write_image(args.preview, imgio.Image(codes.astype(np.float32) / 255.0))
        print(f"wrote preview {args.preview}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo("eval", {"pred": args.pred, "ref": args.ref,
                   "metric_domain": M.METRIC_DOMAIN})
    pred_p, ref_p = Path(args.pred), Path(args.ref)
    if pred_p.is_dir() != ref_p.is_dir():
        print("error: --pred and --ref must both be files or both directories",
              file=sys.stderr)
        return EXIT_FAIL
    if pred_p.is_dir():
        preds = {p.stem: p for p in _list_images(pred_p)}
        refs = {p.stem: p for p in _list_images(ref_p)}
        stems = sorted(set(preds) & set(refs))
        if not stems:
            print("error: no matching prediction/reference stems", file=sys.stderr)
            return EXIT_FAIL
        items = [(preds[s], refs[s]) for s in stems]
    else:
        items = [(pred_p, ref_p)]
    ps, ss = [], []
    for pp, rp in items:
        p, s = M.hdr_pair_metrics(imgio.read_image(pp), imgio.read_image(rp))
        ps.append(p)
        ss.append(s)
        print(f"{pp.name}: psnr={p:.4f} ssim={s:.4f}")
    print(f"mean: psnr={np.mean(ps):.4f} ssim={np.mean(ss):.4f}")
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _load_model_config(args.model_config)
    w, h = _parse_resolution(args.resolution)
    _echo("info", {"resolution": f"{w}x{h}", "model": cfg})
    rows = mod.layer_breakdown(cfg, h, w)
    name_w = max(len(r[0]) for r in rows)
    for name, params, macs in rows:
        print(f"  {name:<{name_w}} params={params:>9} macs={macs:>15}")
    params = mod.count_params(cfg)
    macs = mod.count_macs(cfg, h, w)
    assert params == sum(r[1] for r in rows) and macs == sum(r[2] for r in rows)
    print(f"params={params}")
    print(f"macs={macs}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_model_config(args.model_config)
    w, h = _parse_resolution(args.resolution)
    _echo("bench", {"resolution": f"{w}x{h}", "repeats": args.repeats,
                    "model": cfg})
    report = M.bench_forward(cfg, h, w, repeats=args.repeats, seed=args.seed)
    for k, v in report.items():
        print(f"{k}={v}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hdrlite",
                                 description="single-image HDR reconstruction lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="apply the conventional degradation chain")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--config", default=None, help="degradation recipe (key=value)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("stats", help="dataset exposure statistics")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--over-code", type=int, default=255)
    p.add_argument("--under-code", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train on HDR/SDR pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-degrade", action="store_true")
    p.add_argument("--model-config", default=None)
    p.add_argument("--degrade-config", default=None)
    p.add_argument("--log", default=None, help="loss log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct HDR from one SDR image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--preview", default=None, help="tonemapped PPM preview")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions vs references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("info", help="parameter and MAC counts")
    p.add_argument("--model-config", default=None)
    p.add_argument("--resolution", default="1920x1080")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("bench", help="CPU forward-pass wall time")
    p.add_argument("--model-config", default=None)
    p.add_argument("--resolution", default="1920x1080")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
