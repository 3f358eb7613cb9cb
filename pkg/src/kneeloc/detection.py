"""Detection record shared by every method, and its JSON wire format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .loss import LossBreakdown
from .parametrize import pose_from_dict, pose_to_dict
from .synth import pose_corners

__all__ = ["SPEC_VERSION", "Detection", "boxes_in_frame"]

SPEC_VERSION = "1"


def boxes_in_frame(theta, f, half_shape, transform=None) -> list:
    """Rotated-rectangle corners of a pose, in original-image pixels.

    Corners go normalized -> half pixels -> (optionally) through the half's
    transform back to the original frame.
    """
    h, w = half_shape
    corners = pose_corners(theta, f)
    px = np.stack(
        [(corners[:, 0] + 1) / 2 * (w - 1), (corners[:, 1] + 1) / 2 * (h - 1)],
        axis=1,
    )
    if transform is not None:
        px = transform.to_original(px)
    return [[float(x), float(y)] for x, y in px]


@dataclass
class Detection:
    """Per-side pose, decomposed losses, and provenance of one detection."""

    method: str
    template_hash: str
    pose_left: np.ndarray
    pose_right: np.ndarray
    loss: LossBreakdown
    f: float
    stats: dict = field(default_factory=dict)
    boxes: list = None  # [left 4x[x,y], right 4x[x,y]] in the original frame

    def to_json_dict(self) -> dict:
        return {
            "spec_version": SPEC_VERSION,
            "method": self.method,
            "template_hash": self.template_hash,
            "left": {
                "pose": pose_to_dict(self.pose_left),
                "loss": self.loss.l_left,
                "negated": self.loss.negated_left,
            },
            "right": {
                "pose": pose_to_dict(self.pose_right),
                "loss": self.loss.l_right,
                "negated": self.loss.negated_right,
            },
            "l_reg": self.loss.l_reg,
            "total": self.loss.total,
            "original_frame_boxes": self.boxes,
            "stats": self.stats,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_dict(cls, d: dict, f: float = 1.0) -> "Detection":
        if d.get("spec_version") != SPEC_VERSION:
            raise ValueError(f"unsupported spec_version {d.get('spec_version')!r}")
        loss = LossBreakdown(
            total=d["total"],
            l_left=d["left"]["loss"],
            l_right=d["right"]["loss"],
            l_reg=d["l_reg"],
            negated_left=d["left"]["negated"],
            negated_right=d["right"]["negated"],
        )
        return cls(
            method=d["method"],
            template_hash=d["template_hash"],
            pose_left=pose_from_dict(d["left"]["pose"]),
            pose_right=pose_from_dict(d["right"]["pose"]),
            loss=loss,
            f=f,
            stats=d.get("stats", {}),
            boxes=d.get("original_frame_boxes"),
        )
