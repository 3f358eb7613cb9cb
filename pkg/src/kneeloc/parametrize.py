"""Constrained pose parametrization.

A pose theta = (scale, tx, ty, rot) places a possibly rotated rectangle
inside the normalized [-1,1]^2 frame of a half image: scale is the half-width
of the patch, (tx, ty) its center, rot a small rotation in radians. The
unconstrained preimage v in R^4 maps onto the box of valid poses through
tanh squashing, which turns the box-constrained matching problem into an
unconstrained one.

Poses and preimages are plain float arrays of shape (..., 4); every function
here is vectorized over leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParamConfig",
    "BoundaryPose",
    "constrain",
    "unconstrain",
    "affine_matrix",
    "constrain_jacobian",
    "pose_to_dict",
    "pose_from_dict",
]


class BoundaryPose(ValueError):
    """Pose lies on or outside the constraint box: no unconstrained preimage."""


@dataclass(frozen=True)
class ParamConfig:
    """Pose box shape: scale range [alpha0, alpha0+beta0], rotation bound, aspect f."""

    alpha0: float = 0.15
    beta0: float = 0.8
    rot_bound: float = 0.13
    f: float = 1.0

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise ValueError("alpha0 and beta0 must be positive")
        if self.alpha0 + self.beta0 > 1.0 + 1e-12:
            raise ValueError("alpha0 + beta0 must not exceed 1")
        if self.f < 1.0:
            raise ValueError("template aspect ratio f must be >= 1")
        if self.rot_bound < 0:
            raise ValueError("rot_bound must be non-negative")


def constrain(v, cfg: ParamConfig) -> np.ndarray:
    """Map unconstrained parameters (..., 4) onto valid poses.

    scale = alpha0 + beta0 * (1 + tanh(v1)) / 2, centers scaled by the
    remaining slack (1 - half-width) per axis, rotation = rot_bound * tanh(v4).
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.empty_like(v)
    s1 = cfg.alpha0 + cfg.beta0 * 0.5 * (1.0 + np.tanh(v[..., 0]))
    s2 = s1 / cfg.f
    theta[..., 0] = s1
    theta[..., 1] = (1.0 - s1) * np.tanh(v[..., 1])
    theta[..., 2] = (1.0 - s2) * np.tanh(v[..., 2])
    theta[..., 3] = cfg.rot_bound * np.tanh(v[..., 3])
    return theta


def unconstrain(theta, cfg: ParamConfig) -> np.ndarray:
    """Invert constrain on strictly interior poses.

    Raises BoundaryPose when any component sits on or outside its bound
    (the atanh argument reaches magnitude 1).
    """
    theta = np.asarray(theta, dtype=np.float64)
    s1 = theta[..., 0]
    s2 = s1 / cfg.f
    with np.errstate(divide="ignore", invalid="ignore"):
        args = np.stack(
            [
                2.0 * (s1 - cfg.alpha0) / cfg.beta0 - 1.0,
                theta[..., 1] / (1.0 - s1),
                theta[..., 2] / (1.0 - s2),
                theta[..., 3] / cfg.rot_bound
                if cfg.rot_bound > 0
                else np.where(theta[..., 3] == 0.0, 0.0, np.inf),
            ],
            axis=-1,
        )
    if np.any(~np.isfinite(args)) or np.any(np.abs(args) >= 1.0):
        raise BoundaryPose("pose on or outside the constraint box")
    return np.arctanh(args)


def affine_matrix(theta, f: float) -> np.ndarray:
    """The 2x3 transform mapping output-grid coordinates into the input frame."""
    theta = np.asarray(theta, dtype=np.float64)
    s1, tx, ty, rot = theta[0], theta[1], theta[2], theta[3]
    c, s = np.cos(rot), np.sin(rot)
    return np.array(
        [
            [s1 * c, -s1 * s, tx],
            [(s1 / f) * s, (s1 / f) * c, ty],
        ]
    )


def constrain_jacobian(v, cfg: ParamConfig) -> np.ndarray:
    """Analytic d(theta)/d(v), shape (..., 4, 4)."""
    v = np.asarray(v, dtype=np.float64)
    t1 = np.tanh(v[..., 0])
    t2 = np.tanh(v[..., 1])
    t3 = np.tanh(v[..., 2])
    t4 = np.tanh(v[..., 3])
    ds1 = cfg.beta0 * 0.5 * (1.0 - t1 * t1)
    s1 = cfg.alpha0 + cfg.beta0 * 0.5 * (1.0 + t1)
    s2 = s1 / cfg.f

    jac = np.zeros(v.shape[:-1] + (4, 4))
    jac[..., 0, 0] = ds1
    jac[..., 1, 0] = -ds1 * t2
    jac[..., 1, 1] = (1.0 - s1) * (1.0 - t2 * t2)
    jac[..., 2, 0] = -(ds1 / cfg.f) * t3
    jac[..., 2, 2] = (1.0 - s2) * (1.0 - t3 * t3)
    jac[..., 3, 3] = cfg.rot_bound * (1.0 - t4 * t4)
    return jac


def pose_to_dict(theta) -> dict:
    theta = np.asarray(theta, dtype=np.float64)
    return {
        "scale": float(theta[0]),
        "tx": float(theta[1]),
        "ty": float(theta[2]),
        "rot": float(theta[3]),
    }


def pose_from_dict(d: dict) -> np.ndarray:
    return np.array([d["scale"], d["tx"], d["ty"], d["rot"]], dtype=np.float64)
