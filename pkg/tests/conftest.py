"""Shared test fixtures and independently written oracles.

The oracle functions here deliberately avoid the library's vectorized
paths: convolution and pooling are plain Python loops over output
positions, so a bug in the im2col machinery cannot hide in its own test.
"""

import numpy as np
import pytest


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


def pad_amounts(extent, kernel, stride, padding):
    if padding == "valid":
        return 0, 0
    out = -(-extent // stride)  # ceil
    needed = max((out - 1) * stride + kernel - extent, 0)
    before = needed // 2
    return before, needed - before


def direct_conv2d(x, w, b=None, stride=1, padding="valid"):
    """Loop convolution (cross-correlation) over (N, C, H, W)."""
    n, c, h, win = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    pt, pb = pad_amounts(h, kh, stride, padding)
    pl, pr = pad_amounts(win, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * stride : yi * stride + kh, xi * stride : xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def direct_pool2d(x, kind, window, stride, padding):
    """Loop max/avg pooling; avg divides by the unpadded element count."""
    n, c, h, w = x.shape
    pt, pb = pad_amounts(h, window, stride, padding)
    pl, pr = pad_amounts(w, window, stride, padding)
    oh = (h + pt + pb - window) // stride + 1
    ow = (w + pl + pr - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for yi in range(oh):
                for xi in range(ow):
                    y0 = yi * stride - pt
                    x0 = xi * stride - pl
                    ys = slice(max(y0, 0), min(y0 + window, h))
                    xs = slice(max(x0, 0), min(x0 + window, w))
                    block = x[ni, ci, ys, xs]
                    out[ni, ci, yi, xi] = block.max() if kind == "max" else block.mean()
    return out


def one_hot(labels, k):
    eye = np.zeros((len(labels), k))
    eye[np.arange(len(labels)), labels] = 1.0
    return eye


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def write_breakhis_tree(root, patients_per_class=4, mags=("40", "100"),
                        images_per_mag=2, side=96, seed=0):
    """A tiny BreakHis-style directory: class means differ so a small model
    can actually learn the split. Returns the number of files written."""
    from PIL import Image

    rng = np.random.default_rng(seed)
    count = 0
    for cls, letter, sub, offset, base in (
        ("benign", "B", "A", 0, 60),
        ("malignant", "M", "DC", 1000, 190),
    ):
        d = root / cls
        d.mkdir(parents=True, exist_ok=True)
        for p in range(patients_per_class):
            pid = f"{offset + p:05d}"
            for mag in mags:
                for i in range(images_per_mag):
                    img = rng.integers(base - 40, base + 40, size=(side, side, 3))
                    name = f"SOB_{letter}_{sub}-14-{pid}-{mag}-{i + 1:03d}.png"
                    Image.fromarray(img.astype(np.uint8)).save(d / name)
                    count += 1
    return count


@pytest.fixture
def breakhis_tree(tmp_path):
    root = tmp_path / "raw"
    write_breakhis_tree(root)
    return root


@pytest.fixture
def toy_model_config():
    from irrcnn.model import ModelConfig

    return ModelConfig(
        num_classes=2,
        input_shape=(3, 32, 32),
        stem_widths=(4, 8),
        block_widths=(16, 32),
        time_steps=1,
        dropout_p=0.0,
    )


@pytest.fixture
def synthetic_batch():
    """8 samples, 2 linearly separable classes, (3, 32, 32)."""
    rng = np.random.default_rng(42)
    x = rng.normal(size=(8, 3, 32, 32)).astype(np.float32)
    y = np.array([0, 1] * 4, dtype=np.int64)
    x[y == 1] += 1.5
    return x, y
