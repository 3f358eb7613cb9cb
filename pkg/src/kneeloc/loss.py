"""Matching energy: negative normalized cross-correlation costs and the
regularized bilateral pair cost.

The per-patch cost combines a global NCC term with the worse of two fixed
sub-window NCC terms; image negatives are absorbed by taking the minimum of
the cost on the patch and on its negation. The bilateral cost warps each half
onto the template grid at its pose, sums the two matching losses and adds a
squared penalty on scale and vertical-center disagreement between sides.

Everything is vectorized over a batch of K pose pairs; the scalar operations
wrap the batch with K = 1 so both paths share one numeric route.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imagecore
from .parametrize import ParamConfig, constrain, constrain_jacobian

__all__ = [
    "EPS_SQ",
    "SubWindow",
    "Template",
    "LossBreakdown",
    "default_red_window",
    "default_green_window",
    "ncc_cost",
    "ncc_cost_flagged",
    "windowed_cost",
    "combined_cost",
    "matching_loss",
    "pair_loss",
    "pair_loss_grad",
    "pair_loss_batch",
    "template_hash",
    "save_template",
    "load_template",
]

# Guard on squared norms of mean-removed windows; below this a window is
# treated as constant: cost 1.0 (uncorrelated), zero gradient.
EPS_SQ = 1e-12


@dataclass(frozen=True)
class SubWindow:
    """Fractional rectangle (left, top, right, bottom) in [0,1]^2 of the template frame."""

    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if not (0.0 <= self.left < self.right <= 1.0):
            raise ValueError(f"invalid horizontal bounds {self.left}..{self.right}")
        if not (0.0 <= self.top < self.bottom <= 1.0):
            raise ValueError(f"invalid vertical bounds {self.top}..{self.bottom}")

    def pixel_rect(self, h: int, w: int):
        """Row/column slice bounds covering the fractional rectangle."""
        r0 = int(np.floor(self.top * h))
        r1 = int(np.ceil(self.bottom * h))
        c0 = int(np.floor(self.left * w))
        c1 = int(np.ceil(self.right * w))
        return r0, r1, c0, c1

    def as_list(self):
        return [self.left, self.top, self.right, self.bottom]


def default_red_window() -> SubWindow:
    return SubWindow(0.02, 0.30, 0.25, 0.70)


def default_green_window() -> SubWindow:
    return SubWindow(0.75, 0.30, 0.98, 0.70)


class _WindowData:
    """Precomputed reference data for one comparison window of a template."""

    def __init__(self, name, idx, ref_vals):
        self.name = name
        self.idx = idx  # None means the full frame
        ref = np.asarray(ref_vals, dtype=np.float64)
        self.ref_centered = ref - ref.mean()
        self.ref_sq = float(self.ref_centered @ self.ref_centered)
        self.degenerate = self.ref_sq < EPS_SQ


@dataclass
class Template:
    """Reference patch with two fixed sub-windows and aspect ratio f = h/w >= 1."""

    patch: np.ndarray
    red: SubWindow = field(default_factory=default_red_window)
    green: SubWindow = field(default_factory=default_green_window)

    def __post_init__(self):
        self.patch = imagecore.as_image(self.patch)
        h, w = self.patch.shape
        if h < w:
            raise ValueError("template aspect ratio f = h/w must be >= 1")
        flat = self.patch.reshape(-1)
        self._windows = []
        for name, win in (("global", None), ("red", self.red), ("green", self.green)):
            if win is None:
                idx = None
                vals = flat
            else:
                r0, r1, c0, c1 = win.pixel_rect(h, w)
                if (r1 - r0) * (c1 - c0) < 4:
                    raise ValueError(f"{name} sub-window covers fewer than 4 pixels")
                rows, cols = np.mgrid[r0:r1, c0:c1]
                idx = (rows * w + cols).ravel()
                vals = flat[idx]
            wd = _WindowData(name, idx, vals)
            if wd.degenerate:
                raise ValueError(f"template is constant inside the {name} window")
            self._windows.append(wd)

    @property
    def f(self) -> float:
        h, w = self.patch.shape
        return h / w

    @property
    def shape(self):
        return self.patch.shape


@dataclass
class LossBreakdown:
    """Decomposed bilateral cost: total = l_left + l_right + l_reg."""

    total: float
    l_left: float
    l_right: float
    l_reg: float
    negated_left: bool
    negated_right: bool
    degenerate_left: bool = False
    degenerate_right: bool = False


# ---------------------------------------------------------------------------
# Scalar NCC surface.

def _ncc_q(u: np.ndarray, w: np.ndarray):
    """Normalized correlation of equal-shape patches; q = 0 flags degeneracy."""
    u = np.asarray(u, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    uc = u - u.mean()
    wc = w - w.mean()
    b2 = uc @ uc
    c2 = wc @ wc
    if b2 < EPS_SQ or c2 < EPS_SQ:
        return 0.0, True
    return float((uc @ wc) / np.sqrt(b2 * c2)), False


def ncc_cost_flagged(u, w):
    """(1 - NCC, degeneracy flag); a constant window costs 1.0 with the flag set."""
    u = np.asarray(u)
    w = np.asarray(w)
    if u.shape != w.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {w.shape}")
    q, deg = _ncc_q(u, w)
    return 1.0 - q, deg


def ncc_cost(u, w) -> float:
    """Negative normalized cross-correlation cost in [0, 2]."""
    return ncc_cost_flagged(u, w)[0]


def windowed_cost(u, w, win: SubWindow) -> float:
    """ncc_cost restricted to the pixel rectangle covering the fractional window."""
    u = np.asarray(u)
    w_arr = np.asarray(w)
    if u.shape != w_arr.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {w_arr.shape}")
    r0, r1, c0, c1 = win.pixel_rect(*u.shape)
    return ncc_cost(u[r0:r1, c0:c1], w_arr[r0:r1, c0:c1])


def combined_cost(u, T: Template) -> float:
    """Half global cost plus half the worse sub-window cost."""
    u = np.asarray(u)
    if u.shape != T.patch.shape:
        raise ValueError(f"patch shape {u.shape} does not match template {T.patch.shape}")
    c_gl = ncc_cost(u, T.patch)
    c_r = windowed_cost(u, T.patch, T.red)
    c_g = windowed_cost(u, T.patch, T.green)
    return 0.5 * (c_gl + max(c_r, c_g))


def matching_loss(u, T: Template):
    """min of the combined cost on u and on -u; flag records the winning branch."""
    c_pos = combined_cost(u, T)
    c_neg = combined_cost(-np.asarray(u), T)
    if c_neg < c_pos:
        return c_neg, True
    return c_pos, False


# ---------------------------------------------------------------------------
# Batched bilateral cost with analytic gradients.

class _SideEval:
    __slots__ = ("loss", "negated", "degenerate", "dtheta")


def _window_corr_batch(vals, vals_centered, wd: _WindowData, need_grad):
    """Correlation q per batch row against one reference window.

    vals/vals_centered: (K, n) float64 for this window's pixels.
    Returns (q (K,), gq (K, n) or None, degenerate (K,) bool).
    """
    # Row-wise multiply-then-sum keeps each row's accumulation order
    # independent of the batch row count (BLAS matmul and einsum do not);
    # the multi-start sweep relies on this for thread-count-invariant results.
    b2 = (vals_centered * vals_centered).sum(axis=1)
    deg = (b2 < EPS_SQ) | wd.degenerate
    a = (vals_centered * wd.ref_centered[None, :]).sum(axis=1)
    denom = np.sqrt(b2 * wd.ref_sq)
    safe = np.where(deg, 1.0, denom)
    q = np.where(deg, 0.0, a / safe)
    gq = None
    if need_grad:
        # d q / d u_i = (w_c_i - (a / b2) u_c_i) / sqrt(b2 * c2)
        safe_b2 = np.where(deg, 1.0, b2)
        gq = (wd.ref_centered[None, :] - (a / safe_b2)[:, None] * vals_centered) / safe[
            :, None
        ]
        gq[deg] = 0.0
    return q, gq, deg


def _side_eval_batch(half, theta, T: Template, f, need_grad) -> _SideEval:
    """Matching loss of one half warped at a batch of poses, with d(loss)/d(theta)."""
    out_h, out_w = T.patch.shape
    K = theta.shape[0]

    grid = imagecore.make_regular_grid(out_h, out_w)
    gx_coord = grid[:, 0]
    gy_coord = grid[:, 1]

    s1 = theta[:, 0]
    tx = theta[:, 1]
    ty = theta[:, 2]
    rot = theta[:, 3]
    c4 = np.cos(rot)
    s4 = np.sin(rot)

    # Pixel positions with per-row coefficients folded in:
    # px = kx * (A11 x + A12 y + tx + 1), analogously for py.
    h, w = half.shape
    kx = 0.5 * (w - 1)
    ky = 0.5 * (h - 1)
    px = (
        (s1 * c4 * kx)[:, None] * gx_coord
        - (s1 * s4 * kx)[:, None] * gy_coord
        + ((tx + 1.0) * kx)[:, None]
    )
    py = (
        ((s1 / f) * s4 * ky)[:, None] * gx_coord
        + ((s1 / f) * c4 * ky)[:, None] * gy_coord
        + ((ty + 1.0) * ky)[:, None]
    )
    # Sampled values stay float64 end to end: rounding them to float32 would
    # put quantization noise at the 1e-3 level into finite-difference checks
    # of the pose gradient.
    if need_grad:
        vals, dpx, dpy = imagecore.sample_pixels_with_spatial_grad(half, px, py)
    else:
        vals = imagecore.sample_pixels(half, px, py)
        dpx = dpy = None

    per_window = []
    for wd in T._windows:
        sub = vals if wd.idx is None else vals[:, wd.idx]
        sub_centered = sub - sub.mean(axis=1)[:, None]
        per_window.append(_window_corr_batch(sub, sub_centered, wd, need_grad))

    (q_gl, gq_gl, deg_gl), (q_r, gq_r, deg_r), (q_g, gq_g, deg_g) = per_window

    # Costs on u use 1 - q; on -u every q flips sign, so both branches and the
    # active sub-window derive from the same three correlations.
    pos = 0.5 * ((1.0 - q_gl) + (1.0 - np.minimum(q_r, q_g)))
    neg = 0.5 * ((1.0 + q_gl) + (1.0 + np.maximum(q_r, q_g)))
    negated = neg < pos
    loss = np.where(negated, neg, pos)

    out = _SideEval()
    out.loss = loss
    out.negated = negated
    out.degenerate = deg_gl | deg_r | deg_g

    if not need_grad:
        out.dtheta = None
        return out

    sign = np.where(negated, 0.5, -0.5)
    # Active sub-window: the worse cost; exact ties resolve to the red window.
    red_active = np.where(negated, q_r >= q_g, q_r <= q_g)

    gpix = sign[:, None] * gq_gl
    wd_r = T._windows[1]
    wd_g = T._windows[2]
    gpix[:, wd_r.idx] += (sign * red_active)[:, None] * gq_r
    gpix[:, wd_g.idx] += (sign * ~red_active)[:, None] * gq_g

    gx = gpix * dpx * (0.5 * (w - 1))
    gy = gpix * dpy * (0.5 * (h - 1))
    sx_sum = gx.sum(axis=1)
    sxx = (gx * gx_coord[None, :]).sum(axis=1)
    sxy = (gx * gy_coord[None, :]).sum(axis=1)
    sy_sum = gy.sum(axis=1)
    syx = (gy * gx_coord[None, :]).sum(axis=1)
    syy = (gy * gy_coord[None, :]).sum(axis=1)

    dtheta = np.empty((K, 4))
    dtheta[:, 0] = c4 * sxx - s4 * sxy + (s4 * syx + c4 * syy) / f
    dtheta[:, 1] = sx_sum
    dtheta[:, 2] = sy_sum
    dtheta[:, 3] = s1 * (-s4 * sxx - c4 * sxy) + (s1 / f) * (c4 * syx - s4 * syy)
    out.dtheta = dtheta
    return out


class PairBatch:
    """Vectorized bilateral cost over K pose pairs."""

    __slots__ = (
        "total",
        "l_left",
        "l_right",
        "l_reg",
        "negated_left",
        "negated_right",
        "degenerate_left",
        "degenerate_right",
        "grad",
    )


def pair_loss_batch(u_left, u_right, v, T: Template, cfg: ParamConfig, need_grad=True):
    """Evaluate the regularized bilateral cost for a (K, 8) batch of preimages.

    cfg.f sets the extraction family's vertical compression; it equals the
    template aspect for the main matching problem. Returns a PairBatch with
    per-row components and, when requested, the analytic gradient of the
    total with respect to each preimage row.
    """
    u_left = imagecore.as_image(u_left)
    u_right = imagecore.as_image(u_right)
    if u_left.shape != u_right.shape:
        raise ValueError("halves must share one shape")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 8:
        raise ValueError(f"expected (K, 8) preimages, got {v.shape}")

    v_l = v[:, :4]
    v_r = v[:, 4:]
    th_l = constrain(v_l, cfg)
    th_r = constrain(v_r, cfg)

    left = _side_eval_batch(u_left, th_l, T, cfg.f, need_grad)
    right = _side_eval_batch(u_right, th_r, T, cfg.f, need_grad)

    d_scale = th_l[:, 0] - th_r[:, 0]
    d_vert = th_l[:, 2] - th_r[:, 2]
    l_reg = d_scale * d_scale + d_vert * d_vert

    out = PairBatch()
    out.l_left = left.loss
    out.l_right = right.loss
    out.l_reg = l_reg
    out.total = left.loss + right.loss + l_reg
    out.negated_left = left.negated
    out.negated_right = right.negated
    out.degenerate_left = left.degenerate
    out.degenerate_right = right.degenerate
    out.grad = None

    if need_grad:
        dth_l = left.dtheta.copy()
        dth_r = right.dtheta.copy()
        dth_l[:, 0] += 2.0 * d_scale
        dth_r[:, 0] -= 2.0 * d_scale
        dth_l[:, 2] += 2.0 * d_vert
        dth_r[:, 2] -= 2.0 * d_vert
        jac_l = constrain_jacobian(v_l, cfg)
        jac_r = constrain_jacobian(v_r, cfg)
        grad = np.empty_like(v)
        grad[:, :4] = (jac_l * dth_l[:, :, None]).sum(axis=1)
        grad[:, 4:] = (jac_r * dth_r[:, :, None]).sum(axis=1)
        out.grad = grad
    return out


def _breakdown_from_batch(batch: PairBatch, row: int) -> LossBreakdown:
    return LossBreakdown(
        total=float(batch.total[row]),
        l_left=float(batch.l_left[row]),
        l_right=float(batch.l_right[row]),
        l_reg=float(batch.l_reg[row]),
        negated_left=bool(batch.negated_left[row]),
        negated_right=bool(batch.negated_right[row]),
        degenerate_left=bool(batch.degenerate_left[row]),
        degenerate_right=bool(batch.degenerate_right[row]),
    )


def pair_loss(u_left, u_right, v, T: Template, cfg: ParamConfig) -> LossBreakdown:
    """Regularized bilateral cost at one 8-vector preimage."""
    v = np.asarray(v, dtype=np.float64).reshape(1, 8)
    batch = pair_loss_batch(u_left, u_right, v, T, cfg, need_grad=False)
    return _breakdown_from_batch(batch, 0)


def pair_loss_grad(u_left, u_right, v, T: Template, cfg: ParamConfig):
    """Bilateral cost and its analytic gradient with respect to the 8 preimages."""
    v = np.asarray(v, dtype=np.float64).reshape(1, 8)
    batch = pair_loss_batch(u_left, u_right, v, T, cfg, need_grad=True)
    return _breakdown_from_batch(batch, 0), batch.grad[0]


# ---------------------------------------------------------------------------
# Template bundle on disk: directory with patch.png + template.json.

def template_hash(T: Template) -> str:
    """Stable content hash of patch pixels, sub-windows and aspect ratio."""
    h = hashlib.sha256()
    h.update(np.asarray(T.patch.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(T.patch).tobytes())
    meta = {"f": T.f, "red": T.red.as_list(), "green": T.green.as_list()}
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()


def save_template(directory, T: Template) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    imagecore.save_png(directory / "patch.png", T.patch)
    meta = {"f": T.f, "red": T.red.as_list(), "green": T.green.as_list()}
    (directory / "template.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_template(directory) -> Template:
    directory = Path(directory)
    patch_path = directory / "patch.png"
    meta_path = directory / "template.json"
    for p in (patch_path, meta_path):
        if not p.exists():
            raise FileNotFoundError(f"template bundle is missing {p}")
    patch = imagecore.load_image(patch_path)
    meta = json.loads(meta_path.read_text())
    return Template(
        patch=patch,
        red=SubWindow(*meta["red"]),
        green=SubWindow(*meta["green"]),
    )
