"""Shared fixtures and independent reference helpers for the test suite."""

import math

import numpy as np
import pytest

from kneeloc.loss import Template


def naive_warp(img, A, out_h, out_w):
    """Per-pixel reference warp, written independently of the library sampler.

    Align-corners coordinates, bilinear weights, zero outside the support.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    A = np.asarray(A, dtype=np.float64)
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = -1.0 + 2.0 * i / (out_h - 1) if out_h > 1 else 0.0
        for j in range(out_w):
            x = -1.0 + 2.0 * j / (out_w - 1) if out_w > 1 else 0.0
            sx = A[0, 0] * x + A[0, 1] * y + A[0, 2]
            sy = A[1, 0] * x + A[1, 1] * y + A[1, 2]
            px = (sx + 1.0) / 2.0 * (w - 1)
            py = (sy + 1.0) / 2.0 * (h - 1)
            x0 = math.floor(px)
            y0 = math.floor(py)
            fx = px - x0
            fy = py - y0
            acc = 0.0
            for yy, xx, wt in (
                (y0, x0, (1 - fx) * (1 - fy)),
                (y0, x0 + 1, fx * (1 - fy)),
                (y0 + 1, x0, (1 - fx) * fy),
                (y0 + 1, x0 + 1, fx * fy),
            ):
                if 0 <= yy < h and 0 <= xx < w:
                    acc += wt * img[yy, xx]
            out[i, j] = acc
    return out


def smooth_noise(rng, h, w, sigma=2.0):
    """Band-limited random image in roughly [0, 1] for gradient probing."""
    from scipy.ndimage import gaussian_filter

    raw = rng.standard_normal((h, w))
    img = gaussian_filter(raw, sigma)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
    return img.astype(np.float32)


def embed_exact(patch, a=2, i0=None, j0=None):
    """Embed a patch into a zero half so a pose reproduces it exactly.

    Chooses the half size so every warp sample lands on a pixel center:
    W-1 = a*(tw-1) and H-1 = a*f*(th-1) with f = th/tw. The multiplier is
    bumped to the smallest value >= a making both sizes integral. Returns
    (half, theta) with theta strictly inside the pose box.
    """
    patch = np.asarray(patch, dtype=np.float32)
    th, tw = patch.shape
    f = th / tw
    for mult in range(a, a + 64):
        H_minus_1 = mult * f * (th - 1)
        if abs(H_minus_1 - round(H_minus_1)) < 1e-9:
            a = mult
            break
    else:
        raise ValueError("patch shape does not admit an exact embedding")
    W = a * (tw - 1) + 1
    H = int(round(a * f * (th - 1))) + 1
    if i0 is None:
        i0 = (H - th) // 2
    if j0 is None:
        j0 = (W - tw) // 2
    half = np.zeros((H, W), dtype=np.float32)
    half[i0 : i0 + th, j0 : j0 + tw] = patch
    theta = np.array(
        [
            (tw - 1) / (W - 1),
            (2 * j0 + (tw - 1)) / (W - 1) - 1.0,
            (2 * i0 + (th - 1)) / (H - 1) - 1.0,
            0.0,
        ]
    )
    return half, theta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_template():
    r = np.random.default_rng(7)
    patch = r.random((24, 20)).astype(np.float32)
    return Template(patch=patch)


@pytest.fixture
def joint_template():
    from kneeloc.synth import joint_like_template

    return joint_like_template(36, 30)
