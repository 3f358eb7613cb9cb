"""Grayscale image substrate: normalized coordinates, bilinear sampling, affine warps.

Images are 2-D float32 arrays (row-major, intensities nominally in [0, 1]).
Normalized coordinates follow the align-corners convention: x = -1 is the
center of the leftmost pixel column, x = +1 the center of the rightmost
column (same for y over rows). Points outside [-1, 1]^2 sample zero-padded
surroundings, with partial bilinear weights at the border.

All accumulations (dot products, sums) run in float64; stored intensities
stay float32.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "as_image",
    "bilinear_sample",
    "make_regular_grid",
    "warp",
    "warp_with_grad",
    "resize",
    "horizontal_flip",
    "pad_zeros",
    "load_image",
    "save_png",
]


def as_image(data) -> np.ndarray:
    """Validate and convert raster data to the internal float32 image format."""
    img = np.asarray(data, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    return img


def _norm_to_pixel(coords_x, coords_y, h: int, w: int):
    """Map normalized [-1,1] coordinates to fractional pixel indices."""
    px = (coords_x + 1.0) * (0.5 * (w - 1))
    py = (coords_y + 1.0) * (0.5 * (h - 1))
    return px, py


def _padded_f64(img: np.ndarray) -> np.ndarray:
    """One-pixel zero border in float64; lets gathers clamp instead of mask.

    Indices shifted by +1 and clamped land on the zero border for any
    out-of-range neighbor, which reproduces zero padding exactly.
    """
    h, w = img.shape
    out = np.zeros((h + 2, w + 2))
    out[1:-1, 1:-1] = img
    return out


def _gather_corners(img: np.ndarray, px, py):
    h, w = img.shape
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    x0f = np.floor(px)
    y0f = np.floor(py)
    fx = px - x0f
    fy = py - y0f
    padded = _padded_f64(img)
    # Clip in float before casting so absurd coordinates cannot overflow.
    x0 = np.clip(x0f + 1.0, 0.0, w + 1.0).astype(np.int32)
    y0 = np.clip(y0f + 1.0, 0.0, h + 1.0).astype(np.int32)
    x1 = np.clip(x0f + 2.0, 0.0, w + 1.0).astype(np.int32)
    y1 = np.clip(y0f + 2.0, 0.0, h + 1.0).astype(np.int32)
    flat = padded.ravel()
    stride = w + 2
    base0 = y0 * stride
    base1 = y1 * stride
    v00 = flat[base0 + x0]
    v01 = flat[base0 + x1]
    v10 = flat[base1 + x0]
    v11 = flat[base1 + x1]
    return v00, v01, v10, v11, fx, fy


def sample_pixels(img: np.ndarray, px, py):
    """Bilinear sample at fractional pixel coordinates, zero outside support.

    px/py may be any (matching) shape; returns float64 values of that shape.
    """
    v00, v01, v10, v11, fx, fy = _gather_corners(img, px, py)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def sample_pixels_with_spatial_grad(img: np.ndarray, px, py):
    """Like sample_pixels but also returns d(value)/d(px) and d(value)/d(py)."""
    v00, v01, v10, v11, fx, fy = _gather_corners(img, px, py)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val = top + fy * (bot - top)
    gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bot - top
    return val, gx, gy


def bilinear_sample(img: np.ndarray, p) -> float:
    """Sample one normalized-coordinate point; zero padding outside [-1,1]^2."""
    img = as_image(img)
    h, w = img.shape
    px, py = _norm_to_pixel(float(p[0]), float(p[1]), h, w)
    return float(sample_pixels(img, px, py))


def make_regular_grid(out_h: int, out_w: int) -> np.ndarray:
    """Row-major grid of (x, y) normalized coordinates equispaced over [-1,1]^2.

    Returns an (out_h*out_w, 2) float64 array; a single-row or single-column
    output collapses that axis to coordinate 0.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("grid dimensions must be >= 1")
    xs = np.linspace(-1.0, 1.0, out_w) if out_w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, out_h) if out_h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def warp(img: np.ndarray, A, out_h: int, out_w: int) -> np.ndarray:
    """Warp img through the 2x3 affine A applied to the regular output grid."""
    img = as_image(img)
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (2, 3):
        raise ValueError(f"affine matrix must be 2x3, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("affine matrix contains non-finite entries")
    grid = make_regular_grid(out_h, out_w)
    sx = A[0, 0] * grid[:, 0] + A[0, 1] * grid[:, 1] + A[0, 2]
    sy = A[1, 0] * grid[:, 0] + A[1, 1] * grid[:, 1] + A[1, 2]
    h, w = img.shape
    px, py = _norm_to_pixel(sx, sy, h, w)
    out = sample_pixels(img, px, py)
    return out.reshape(out_h, out_w).astype(np.float32)


def warp_with_grad(img: np.ndarray, theta, f: float, out_h: int, out_w: int):
    """Warp by the pose matrix A(theta) and return the per-pixel pose Jacobian.

    Returns (warped image, J) where J has shape (out_h*out_w, 4) and
    J[i, k] = d(warped pixel i)/d(theta_k). Entries are zero where the sample
    point falls strictly outside the zero-padding support.
    """
    from .parametrize import affine_matrix

    img = as_image(img)
    theta = np.asarray(theta, dtype=np.float64)
    A = affine_matrix(theta, f)
    grid = make_regular_grid(out_h, out_w)
    gx_coord = grid[:, 0]
    gy_coord = grid[:, 1]
    sx = A[0, 0] * gx_coord + A[0, 1] * gy_coord + A[0, 2]
    sy = A[1, 0] * gx_coord + A[1, 1] * gy_coord + A[1, 2]
    h, w = img.shape
    px, py = _norm_to_pixel(sx, sy, h, w)
    val, dpx, dpy = sample_pixels_with_spatial_grad(img, px, py)

    # d(pixel coord)/d(normalized output of A)
    cx = 0.5 * (w - 1)
    cy = 0.5 * (h - 1)
    gx = dpx * cx
    gy = dpy * cy

    c4 = np.cos(theta[3])
    s4 = np.sin(theta[3])
    s1 = theta[0]
    jac = np.empty((out_h * out_w, 4))
    jac[:, 0] = gx * (c4 * gx_coord - s4 * gy_coord) + gy * (
        (s4 * gx_coord + c4 * gy_coord) / f
    )
    jac[:, 1] = gx
    jac[:, 2] = gy
    jac[:, 3] = gx * (-s1 * s4 * gx_coord - s1 * c4 * gy_coord) + gy * (
        (s1 / f) * (c4 * gx_coord - s4 * gy_coord)
    )
    return val.reshape(out_h, out_w).astype(np.float32), jac


_IDENTITY_A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize: identity warp onto the new regular grid."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    return warp(img, _IDENTITY_A, out_h, out_w)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    """Reverse column order."""
    return np.ascontiguousarray(as_image(img)[:, ::-1])


def pad_zeros(img: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Extend the image with zeros on the given sides."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad amounts must be non-negative")
    return np.pad(as_image(img), ((top, bottom), (left, right)))


# ---------------------------------------------------------------------------
# Image file I/O: 8/16-bit grayscale PNG and PGM read, PNG write.

def _load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = next_token()
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"not a PGM file: {path}")
    w = int(next_token())
    h = int(next_token())
    maxval = int(next_token())
    if w < 1 or h < 1 or not (0 < maxval < 65536):
        raise ValueError(f"invalid PGM header in {path}")

    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=h * w, offset=pos)
    else:
        vals = data[pos:].split()
        if len(vals) < h * w:
            raise ValueError(f"truncated PGM data in {path}")
        raw = np.array([int(v) for v in vals[: h * w]], dtype=np.uint32)
    return (raw.reshape(h, w).astype(np.float64) / maxval).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Read a grayscale PNG or PGM; intensities normalized to [0, 1]."""
    path = str(path)
    if path.lower().endswith((".pgm",)):
        return _load_pgm(path)
    with PILImage.open(path) as pil:
        mode = pil.mode
        if mode in ("L", "P"):
            arr = np.asarray(pil.convert("L"), dtype=np.float64) / 255.0
        elif mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(pil, dtype=np.float64) / 65535.0
        elif mode == "I":
            arr = np.asarray(pil, dtype=np.float64) / 65535.0
        else:
            raise ValueError(f"unsupported image mode {mode!r} in {path} (grayscale only)")
    return as_image(arr)


def save_png(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale PNG; intensities clipped to [0,1], scaled to [0,255]."""
    img = as_image(img)
    quant = np.clip(img, 0.0, 1.0) * 255.0
    PILImage.fromarray(np.round(quant).astype(np.uint8), mode="L").save(str(path))
