"""Classical sliding-window template matching over a small scale pyramid.

The correlation map uses the fast running-sum formulation: the numerator is a
convolution with the mean-removed template, the denominator comes from
integral-image window sums, so cost is independent of template size up to the
convolution. Candidate placements are rescored with the same matching loss
the continuous methods minimize, which keeps reported numbers comparable
across methods.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from . import imagecore
from .loss import EPS_SQ, Template, matching_loss

__all__ = [
    "TemplateTooLarge",
    "sliding_ncc",
    "default_scale_ratios",
    "multiscale_match",
]


class TemplateTooLarge(ValueError):
    """Template does not fit inside the image at this scale."""


def _window_sums(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Sum of every th x tw window via a zero-padded integral image."""
    integral = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    np.cumsum(img, axis=0, out=integral[1:, 1:])
    np.cumsum(integral[1:, 1:], axis=1, out=integral[1:, 1:])
    return (
        integral[th:, tw:]
        - integral[:-th, tw:]
        - integral[th:, :-tw]
        + integral[:-th, :-tw]
    )


def sliding_ncc(img: np.ndarray, tmpl: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation at every valid top-left placement.

    Returns a (H - th + 1, W - tw + 1) float64 map in [-1, 1]; windows with
    vanishing variance correlate to 0 by the epsilon-guard convention.
    """
    img = imagecore.as_image(img).astype(np.float64)
    tmpl = imagecore.as_image(tmpl).astype(np.float64)
    th, tw = tmpl.shape
    if th > img.shape[0] or tw > img.shape[1]:
        raise TemplateTooLarge(
            f"template {tmpl.shape} exceeds image {img.shape}"
        )
    tc = tmpl - tmpl.mean()
    t_norm_sq = float((tc * tc).sum())
    if t_norm_sq < EPS_SQ:
        raise ValueError("template has no variance")

    # Numerator: sum over the window of u * t_centered; the window-mean term
    # drops because t_centered has zero mean.
    num = fftconvolve(img, tc[::-1, ::-1], mode="valid")

    n = th * tw
    wsum = _window_sums(img, th, tw)
    wsum_sq = _window_sums(img * img, th, tw)
    var_term = wsum_sq - wsum * wsum / n
    np.maximum(var_term, 0.0, out=var_term)

    denom_sq = var_term * t_norm_sq
    out = np.zeros_like(num)
    valid = var_term > EPS_SQ
    out[valid] = num[valid] / np.sqrt(denom_sq[valid])
    return out


def default_scale_ratios(n_scales: int = 5):
    """Target template-width / image-width ratios for the pyramid."""
    if n_scales < 1:
        raise ValueError("n_scales must be >= 1")
    if n_scales == 1:
        return [0.34]
    return list(np.linspace(0.20, 0.48, n_scales))


def _candidates_per_scale(half, T: Template, ratio, top_k):
    """Rescored candidate placements for one half at one pyramid scale."""
    th, tw = T.patch.shape
    H, W = half.shape
    scaled_w = int(round(tw / ratio))
    scaled_h = int(round(H * scaled_w / W))
    if scaled_h < th or scaled_w < tw:
        raise TemplateTooLarge(
            f"scaled image {scaled_h}x{scaled_w} below template {th}x{tw}"
        )
    scaled = imagecore.resize(half, scaled_h, scaled_w)
    corr = sliding_ncc(scaled, T.patch)

    flat_order = np.argsort(-np.abs(corr).ravel(), kind="stable")[:top_k]
    out = []
    for flat in flat_order:
        i, j = np.unravel_index(flat, corr.shape)
        crop = scaled[i : i + th, j : j + tw]
        loss, negated = matching_loss(crop, T)
        out.append((loss, i, j, scaled_h, scaled_w, negated))
    return out


def _placement_to_pose(i, j, scaled_h, scaled_w, th, tw):
    """Pose of an axis-aligned placement, in the half's normalized frame."""
    cx = j + (tw - 1) / 2.0
    cy = i + (th - 1) / 2.0
    scale = (tw - 1) / (scaled_w - 1)
    return np.array(
        [
            scale,
            2.0 * cx / (scaled_w - 1) - 1.0,
            2.0 * cy / (scaled_h - 1) - 1.0,
            0.0,
        ]
    )


def multiscale_match(
    u_left,
    u_right,
    T: Template,
    n_scales: int = 5,
    scale_ratios=None,
    top_k: int = 3,
):
    """Best sliding placement per side over the pyramid, rescored by matching_loss.

    Returns (theta_left, theta_right, per-side losses and negation flags,
    stats). Scales where the template no longer fits are skipped with a note
    in stats; if no scale fits, TemplateTooLarge propagates.
    """
    if scale_ratios is None:
        scale_ratios = default_scale_ratios(n_scales)
    th, tw = T.patch.shape

    sides = {}
    skipped = []
    for name, half in (("left", imagecore.as_image(u_left)), ("right", imagecore.as_image(u_right))):
        best = None
        for s_idx, ratio in enumerate(scale_ratios):
            try:
                cands = _candidates_per_scale(half, T, ratio, top_k)
            except TemplateTooLarge:
                if name == "left":
                    skipped.append(s_idx)
                continue
            for loss, i, j, sh, sw, negated in cands:
                key = (loss, s_idx, i, j)
                if best is None or key < best[0]:
                    theta = _placement_to_pose(i, j, sh, sw, th, tw)
                    best = (key, theta, loss, negated)
        if best is None:
            raise TemplateTooLarge("template does not fit at any pyramid scale")
        sides[name] = best

    stats = {
        "scales": [float(r) for r in scale_ratios],
        "skipped_scales": skipped,
        "candidates_per_scale": top_k,
    }
    return (
        sides["left"][1],
        sides["right"][1],
        {
            "l_left": sides["left"][2],
            "l_right": sides["right"][2],
            "negated_left": sides["left"][3],
            "negated_right": sides["right"][3],
        },
        stats,
    )
