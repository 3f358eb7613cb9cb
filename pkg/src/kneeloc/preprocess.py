"""Bilateral image splitting and normalization.

A bilateral image is split at a mirror-symmetry column found on a
downsampled copy, each half is widened toward the other side so the halves
overlap slightly, zero-padded to a fixed height/width ratio, resized to the
working resolution, and the left half is mirrored so both halves present the
joint in the same orientation. Each half carries an affine record mapping
half-frame pixels back to original-image pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import imagecore

__all__ = [
    "ImageTooSmall",
    "PreprocessConfig",
    "HalfTransform",
    "SplitResult",
    "find_split",
    "split_bilateral",
    "augment",
]


class ImageTooSmall(ValueError):
    """A half would be too narrow to carry a joint region."""


@dataclass(frozen=True)
class PreprocessConfig:
    out_h: int = 800
    out_w: int = 500
    aspect: float = 1.6
    widen_factor: float = 1.1
    split_down_w: int = 128
    min_half_width: int = 8
    # Inputs taller than wide are almost certainly already single-side crops.
    degenerate_aspect: float = 1.2

    def __post_init__(self):
        if self.out_h < 2 or self.out_w < 2:
            raise ValueError("output size must be at least 2x2")
        if self.widen_factor < 1.0:
            raise ValueError("widen_factor must be >= 1")
        if self.aspect <= 0:
            raise ValueError("aspect must be positive")


@dataclass(frozen=True)
class HalfTransform:
    """Affine map from final half-frame pixels back to original-image pixels."""

    flip: bool
    out_w: int
    out_h: int
    pre_w: int
    pre_h: int
    pad_left: int
    pad_top: int
    col_offset: int

    def to_original(self, points) -> np.ndarray:
        """Map (x, y) half-frame pixel coordinates into the original frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64)).copy()
        if self.flip:
            pts[:, 0] = (self.out_w - 1) - pts[:, 0]
        pts[:, 0] = pts[:, 0] * (self.pre_w - 1) / (self.out_w - 1)
        pts[:, 1] = pts[:, 1] * (self.pre_h - 1) / (self.out_h - 1)
        pts[:, 0] += self.col_offset - self.pad_left
        pts[:, 1] -= self.pad_top
        return pts

    def from_original(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64)).copy()
        pts[:, 0] -= self.col_offset - self.pad_left
        pts[:, 1] += self.pad_top
        pts[:, 0] = pts[:, 0] * (self.out_w - 1) / (self.pre_w - 1)
        pts[:, 1] = pts[:, 1] * (self.out_h - 1) / (self.pre_h - 1)
        if self.flip:
            pts[:, 0] = (self.out_w - 1) - pts[:, 0]
        return pts

    def to_dict(self) -> dict:
        return {
            "flip": self.flip,
            "out_w": self.out_w,
            "out_h": self.out_h,
            "pre_w": self.pre_w,
            "pre_h": self.pre_h,
            "pad_left": self.pad_left,
            "pad_top": self.pad_top,
            "col_offset": self.col_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HalfTransform":
        return cls(**d)


@dataclass
class SplitResult:
    u_left: np.ndarray
    u_right: np.ndarray
    split_column: int
    left_transform: HalfTransform
    right_transform: HalfTransform
    degenerate_input: bool = False
    symmetry_score: float = 0.0

    def transforms_json(self) -> str:
        return json.dumps(
            {
                "split_column": self.split_column,
                "degenerate_input": self.degenerate_input,
                "symmetry_score": self.symmetry_score,
                "left": self.left_transform.to_dict(),
                "right": self.right_transform.to_dict(),
            },
            indent=2,
            sort_keys=True,
        )


def _mirror_score(img: np.ndarray, a: int) -> float:
    """Per-pixel RMS difference between the bands left and right of column a."""
    w_band = min(a, img.shape[1] - a)
    if w_band < 1:
        return float("inf")
    left = img[:, a - w_band : a].astype(np.float64)
    right = img[:, a : a + w_band].astype(np.float64)[:, ::-1]
    return float(np.sqrt(np.mean((left - right) ** 2)))


def _find_split_scored(u: np.ndarray, down_w: int):
    u = imagecore.as_image(u)
    h, w = u.shape
    if w < 4:
        raise ValueError("image too narrow to split")
    down_w = min(down_w, w)
    down_h = max(1, int(round(h * down_w / w)))
    small = imagecore.resize(u, down_h, down_w)

    h0 = down_w // 2
    offset = max(1, int(round(0.125 * down_w)))
    candidates = [h0 - offset, h0 + offset]
    scores = [_mirror_score(small, a) for a in candidates]
    if scores[0] <= scores[1]:
        best, score = candidates[0], scores[0]
    else:
        best, score = candidates[1], scores[1]
    return int(round(best * w / down_w)), score


def find_split(u: np.ndarray, down_w: int = 128) -> int:
    """Column splitting u into near mirror-symmetric halves.

    Two candidates at 1/8 image width on either side of the center column of
    a downsampled copy are scored by the mirror difference of their flanking
    bands; ties go to the left candidate.
    """
    return _find_split_scored(u, down_w)[0]


def _pad_to_aspect(width: int, height: int, aspect: float):
    """Pads (per side) making height/width equal aspect, via integer rounding."""
    if height / width > aspect:
        target_w = int(round(height / aspect))
        dw = max(0, target_w - width)
        return (dw // 2, dw - dw // 2), (0, 0)
    target_h = int(round(aspect * width))
    dh = max(0, target_h - height)
    return (0, 0), (dh // 2, dh - dh // 2)


def split_bilateral(u: np.ndarray, cfg: PreprocessConfig = None) -> SplitResult:
    """Split, widen by the overlap factor, pad to aspect, resize, flip left."""
    if cfg is None:
        cfg = PreprocessConfig()
    u = imagecore.as_image(u)
    h, w = u.shape
    degenerate = h / w > cfg.degenerate_aspect

    split_col, score = _find_split_scored(u, cfg.split_down_w)
    left_end = min(w, int(math.ceil(split_col * cfg.widen_factor)))
    right_start = max(0, w - int(math.ceil((w - split_col) * cfg.widen_factor)))
    left_w = left_end
    right_w = w - right_start
    if min(left_w, right_w) < cfg.min_half_width:
        raise ImageTooSmall(
            f"half widths {left_w}/{right_w} below minimum {cfg.min_half_width}"
        )

    halves = {
        "left": {"img": u[:, :left_end], "col_offset": 0},
        "right": {"img": u[:, right_start:], "col_offset": right_start},
    }

    # Equalize widths: the narrower half gets symmetric zero columns.
    wide = max(left_w, right_w)
    for side in halves.values():
        img = side["img"]
        dw = wide - img.shape[1]
        pl = dw // 2
        img = imagecore.pad_zeros(img, 0, 0, pl, dw - pl)
        side["img"] = img
        side["pad_left"] = pl

    # Shared aspect padding.
    (apl, apr), (apt, apb) = _pad_to_aspect(wide, h, cfg.aspect)
    out = {}
    for name, side in halves.items():
        img = imagecore.pad_zeros(side["img"], apt, apb, apl, apr)
        pre_h, pre_w = img.shape
        img = imagecore.resize(img, cfg.out_h, cfg.out_w)
        flip = name == "left"
        if flip:
            img = imagecore.horizontal_flip(img)
        out[name] = (
            img,
            HalfTransform(
                flip=flip,
                out_w=cfg.out_w,
                out_h=cfg.out_h,
                pre_w=pre_w,
                pre_h=pre_h,
                pad_left=side["pad_left"] + apl,
                pad_top=apt,
                col_offset=side["col_offset"],
            ),
        )

    return SplitResult(
        u_left=out["left"][0],
        u_right=out["right"][0],
        split_column=split_col,
        left_transform=out["left"][1],
        right_transform=out["right"][1],
        degenerate_input=degenerate,
        symmetry_score=score,
    )


def augment(half: np.ndarray, rng, max_shift: float = 0.02) -> np.ndarray:
    """Random integer-pixel translation with zero fill."""
    if not (0.0 <= max_shift <= 0.1):
        raise ValueError("max_shift must lie in [0, 0.1]")
    half = imagecore.as_image(half)
    h, w = half.shape
    dy_max = int(math.floor(max_shift * h))
    dx_max = int(math.floor(max_shift * w))
    dy = int(rng.integers(-dy_max, dy_max + 1)) if dy_max else 0
    dx = int(rng.integers(-dx_max, dx_max + 1)) if dx_max else 0
    out = np.zeros_like(half)
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = half[src_y, src_x]
    return out
