"""Synthetic bilateral pairs with planted ground-truth poses.

The generator paints a template into each half at the inverse of a chosen
pose, over a background of low-frequency cosine fields plus white noise, so
that warping the half at the planted pose recovers the template up to the
planted affine intensity change and noise. This gives every detection method
a ground truth to be scored against without any restricted data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loss import Template, default_green_window, default_red_window
from .parametrize import affine_matrix

__all__ = [
    "NoiseModel",
    "PlantSpec",
    "joint_like_template",
    "generate",
    "score",
    "pose_corners",
]


@dataclass(frozen=True)
class NoiseModel:
    """Background structure: low-frequency cosine fields plus white noise."""

    n_fields: int = 3
    field_amp: float = 0.15
    white_amp: float = 0.02
    base_level: float = 0.45


@dataclass(frozen=True)
class PlantSpec:
    template: Template
    theta_left: np.ndarray
    theta_right: np.ndarray
    half_shape: tuple = (160, 100)
    noise: NoiseModel = field(default_factory=NoiseModel)
    contrast_left: float = 1.0
    contrast_right: float = 1.0
    brightness_left: float = 0.0
    brightness_right: float = 0.0
    negate_left: bool = False
    negate_right: bool = False


def joint_like_template(h: int = 48, w: int = 40) -> Template:
    """Procedural joint-like pattern: two bright bands around a dark gap.

    The band geometry bows with horizontal position and an asymmetric smooth
    field is superimposed, so the global NCC optimum is unique in both axes.
    """
    if h < w:
        raise ValueError("template must satisfy f = h/w >= 1")
    ys = np.linspace(-1.0, 1.0, h)[:, None]
    xs = np.linspace(-1.0, 1.0, w)[None, :]

    gap = 0.16 + 0.10 * xs * xs
    band_c = gap + 0.28
    width = 0.18

    def band(center):
        return np.exp(-(((ys - center) / width) ** 2))

    img = 0.25 + 0.55 * band(-band_c) + 0.55 * band(band_c)
    img *= 1.0 - 0.25 * xs * xs
    img += 0.12 * np.cos(1.7 * xs + 0.5) * np.cos(2.3 * ys - 0.3)
    img -= 0.10 * np.exp(-(((xs - 0.45) ** 2 + (ys + 0.5) ** 2) / 0.08))
    return Template(
        patch=np.clip(img, 0.0, 1.0).astype(np.float32),
        red=default_red_window(),
        green=default_green_window(),
    )


def _sample_clamped(img: np.ndarray, px, py):
    """Bilinear sampling with edge clamping (template continuation)."""
    h, w = img.shape
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def _render_half(template: Template, theta, shape, noise: NoiseModel, rng,
                 contrast, brightness, negate):
    h, w = shape
    xs = np.linspace(-1.0, 1.0, w)[None, :].repeat(h, axis=0)
    ys = np.linspace(-1.0, 1.0, h)[:, None].repeat(w, axis=1)

    bg = np.full((h, w), noise.base_level)
    for _ in range(noise.n_fields):
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = noise.field_amp * rng.uniform(0.5, 1.0)
        bg += amp * np.cos(np.pi * (fx * xs + fy * ys) + phase)

    A = affine_matrix(np.asarray(theta, dtype=np.float64), template.f)
    M = A[:, :2]
    t = A[:, 2]
    Minv = np.linalg.inv(M)
    dx = xs - t[0]
    dy = ys - t[1]
    u = Minv[0, 0] * dx + Minv[0, 1] * dy
    v = Minv[1, 0] * dx + Minv[1, 1] * dy

    # Paste region extends slightly past the planted rectangle with
    # edge-continued template content, keeping the seam outside the patch.
    th, tw = template.patch.shape
    margin = 2.5 * max(2.0 / (tw - 1), 2.0 / (th - 1))
    inside = (np.abs(u) <= 1.0 + margin) & (np.abs(v) <= 1.0 + margin)

    px = (u + 1.0) * 0.5 * (tw - 1)
    py = (v + 1.0) * 0.5 * (th - 1)
    patch_vals = _sample_clamped(template.patch.astype(np.float64), px, py)

    img = np.where(inside, patch_vals, bg)
    if noise.white_amp > 0:
        img = img + noise.white_amp * rng.standard_normal((h, w))
    img = contrast * img + brightness
    if negate:
        img = 1.0 - img
    return img.astype(np.float32)


def generate(spec: PlantSpec, rng):
    """Render a bilateral pair; returns (u_left, u_right, truth dict)."""
    u_left = _render_half(
        spec.template,
        spec.theta_left,
        spec.half_shape,
        spec.noise,
        rng,
        spec.contrast_left,
        spec.brightness_left,
        spec.negate_left,
    )
    u_right = _render_half(
        spec.template,
        spec.theta_right,
        spec.half_shape,
        spec.noise,
        rng,
        spec.contrast_right,
        spec.brightness_right,
        spec.negate_right,
    )
    truth = {
        "theta_left": np.asarray(spec.theta_left, dtype=np.float64),
        "theta_right": np.asarray(spec.theta_right, dtype=np.float64),
        "negate_left": spec.negate_left,
        "negate_right": spec.negate_right,
        "half_shape": list(spec.half_shape),
    }
    return u_left, u_right, truth


def pose_corners(theta, f: float) -> np.ndarray:
    """The four warped corners A(theta)[(+-1, +-1), 1] in normalized coordinates."""
    A = affine_matrix(np.asarray(theta, dtype=np.float64), f)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    return corners @ A[:, :2].T + A[:, 2]


def score(theta_left, theta_right, truth, f: float,
          l_left=None, l_right=None) -> dict:
    """Pose-error metrics per side plus a rotation-aware corner distance."""
    out = {}
    for side, det in (("left", theta_left), ("right", theta_right)):
        det = np.asarray(det, dtype=np.float64)
        ref = truth[f"theta_{side}"]
        corners_d = pose_corners(det, f)
        corners_r = pose_corners(ref, f)
        out[side] = {
            "scale_err": abs(det[0] - ref[0]),
            "center_err": float(np.hypot(det[1] - ref[1], det[2] - ref[2])),
            "rot_err": abs(det[3] - ref[3]),
            "corner_dist": float(
                np.linalg.norm(corners_d - corners_r, axis=1).mean()
            ),
        }
    if l_left is not None:
        out["left"]["loss"] = float(l_left)
    if l_right is not None:
        out["right"]["loss"] = float(l_right)
    return out
