import numpy as np
import pytest

from hdrlite.degrade import DegradationConfig, virtual_shot
from hdrlite.imgio import Image, LINEAR_HDR


def make_hdr_scene(seed: int, size: int = 64) -> Image:
    """Smooth gradient base plus a few bright Gaussian blobs (linear HDR)."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.2 + 0.6 * np.stack([yy, xx, 0.5 * (yy + xx)], axis=-1)
    for _ in range(3):
        cy, cx = r.random(2) * size
        amp = r.uniform(2.0, 6.0)
        blob = amp * np.exp(-(((yy * size - cy) ** 2 + (xx * size - cx) ** 2)
                              / (2 * (size / 8) ** 2)))
        base += blob[..., None] * r.random(3)
    return Image(base.astype(np.float32), LINEAR_HDR)


def make_pairs(count: int = 8, size: int = 64, exposure: float = 0.5):
    shot = DegradationConfig(exposure_scale=exposure)
    pairs = []
    for i in range(count):
        hdr = make_hdr_scene(i, size)
        pairs.append((hdr, virtual_shot(hdr, shot)))
    return pairs


@pytest.fixture(scope="session")
def hdr_scene():
    return make_hdr_scene(42, 64)


@pytest.fixture(scope="session")
def train_pairs():
    return make_pairs(8, 64)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-gate verdict lines after the run."""
    import sys
    lines = []
    for name, module in list(sys.modules.items()):
        if name.rpartition(".")[2] == "test_acceptance":
            lines.extend(getattr(module, "CRITERION_LINES", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines)):
            terminalreporter.write_line(line)
