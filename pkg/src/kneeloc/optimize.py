"""Gradient-based minimization of the bilateral matching cost.

Three layers: a from-scratch Adam loop over an 8-vector, the sharpening step
(a 300-iteration Adam refinement that returns the best iterate seen, not the
final one), and a grid-initialized multi-start search whose initial poses
tile scale-translation space with a configurable overlap ratio. The sweep
runs every initialization with a short per-init budget, then polishes the
best with a full-length run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .loss import Template, pair_loss, pair_loss_batch
from .parametrize import ParamConfig, constrain, unconstrain

__all__ = [
    "AdamConfig",
    "GridConfig",
    "OptTrace",
    "NonFiniteLoss",
    "adam_minimize",
    "sharpen",
    "translation_count",
    "grid_axis",
    "grid_init_points",
    "grid_search",
]

# Inward nudge applied to grid poses that would otherwise sit on the
# constraint-box boundary (where the preimage map is non-invertible).
_EDGE_NUDGE = 1e-6


class NonFiniteLoss(ArithmeticError):
    """Objective returned a non-finite value at the starting point."""


@dataclass(frozen=True)
class AdamConfig:
    step_size: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 300

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class GridConfig:
    n_scales: int = 5
    overlap_ratio: float = 0.25
    pair_halfwidth: float = 1.0 / 3.0
    include_rotation_inits: bool = False
    iters_per_init: int = 60
    polish_iters: int = 300

    def __post_init__(self):
        if self.n_scales < 2:
            raise ValueError("n_scales must be >= 2")
        if not (0.0 < self.overlap_ratio < 1.0):
            raise ValueError("overlap_ratio must lie in (0, 1)")


@dataclass
class OptTrace:
    """All iterates of one descent; includes the starting point."""

    vs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    truncated: bool = False

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.losses))

    @property
    def best_v(self) -> np.ndarray:
        return self.vs[self.best_index]

    @property
    def best_loss(self) -> float:
        return self.losses[self.best_index]


def adam_minimize(objective, v0, cfg: AdamConfig) -> OptTrace:
    """Minimize objective(v) -> (value, gradient) from v0; record every iterate.

    The returned trace's best entry is the argmin over all recorded values,
    not the final iterate. A non-finite value at v0 raises NonFiniteLoss;
    one appearing mid-run truncates the trace at the last finite point.
    """
    x = np.asarray(v0, dtype=np.float64).copy()
    trace = OptTrace()
    m = np.zeros_like(x)
    s = np.zeros_like(x)

    val, grad = objective(x)
    if not math.isfinite(val):
        raise NonFiniteLoss(f"objective non-finite at the starting point: {val}")
    trace.vs.append(x.copy())
    trace.losses.append(float(val))

    for t in range(1, cfg.iterations + 1):
        grad = np.asarray(grad, dtype=np.float64)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        s = cfg.beta2 * s + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1**t)
        s_hat = s / (1.0 - cfg.beta2**t)
        x = x - cfg.step_size * m_hat / (np.sqrt(s_hat) + cfg.eps)
        val, grad = objective(x)
        if not math.isfinite(val):
            trace.truncated = True
            break
        trace.vs.append(x.copy())
        trace.losses.append(float(val))
    return trace


def sharpen(u_left, u_right, T: Template, pcfg: ParamConfig, v0, adam: AdamConfig = None):
    """Refine a pose-pair preimage by Adam on the bilateral cost.

    Runs the default 300-iteration schedule unless adam overrides it.
    Returns (best preimage over the whole trace, LossBreakdown there).
    """
    if adam is None:
        adam = AdamConfig()

    def objective(v):
        batch = pair_loss_batch(u_left, u_right, v.reshape(1, 8), T, pcfg, need_grad=True)
        return float(batch.total[0]), batch.grad[0]

    trace = adam_minimize(objective, v0, adam)
    v_best = trace.best_v
    return v_best, pair_loss(u_left, u_right, v_best, T, pcfg)


# ---------------------------------------------------------------------------
# Grid-initialized multi-start search.

def translation_count(s: float, r: float) -> int:
    """Number of translation grid points for patch half-width s and overlap ratio r."""
    return 1 + math.ceil((2.0 - 2.0 * s) / (r * 2.0 * s))


def grid_axis(s: float, r: float):
    """Equispaced centers covering [s-1, 1-s] with adjacent-patch overlap >= 1-r."""
    n = translation_count(s, r)
    lo = s - 1.0
    hi = 1.0 - s
    pts = np.linspace(lo, hi, n)
    # Endpoints sit on the constraint-box boundary; pull them strictly inside.
    bound = (1.0 - s) * (1.0 - _EDGE_NUDGE)
    return np.clip(pts, -bound, bound)


def grid_init_points(cfg: GridConfig, pcfg: ParamConfig) -> np.ndarray:
    """Unconstrained 8-vector initializations tiling scale-translation space.

    Scales are equispaced over the full scale range (endpoints nudged inward
    so every pose inverts); per scale, horizontal and vertical centers tile
    their feasible intervals with spacing at most r * patch-extent. The right
    side shares the left's scale and vertical center while its horizontal
    center enumerates grid points within pair_halfwidth of the left's.
    """
    scales = np.linspace(pcfg.alpha0, pcfg.alpha0 + pcfg.beta0, cfg.n_scales)
    scales[0] += _EDGE_NUDGE
    scales[-1] -= _EDGE_NUDGE

    thetas = []
    for s in scales:
        xs = grid_axis(s, cfg.overlap_ratio)
        ys = grid_axis(s / pcfg.f, cfg.overlap_ratio)
        for y in ys:
            for x_left in xs:
                near = xs[np.abs(xs - x_left) <= cfg.pair_halfwidth + 1e-12]
                for x_right in near:
                    thetas.append((s, x_left, y, x_right))
    thetas = np.asarray(thetas)

    theta_l = np.zeros((len(thetas), 4))
    theta_r = np.zeros((len(thetas), 4))
    theta_l[:, 0] = thetas[:, 0]
    theta_l[:, 1] = thetas[:, 1]
    theta_l[:, 2] = thetas[:, 2]
    theta_r[:, 0] = thetas[:, 0]
    theta_r[:, 1] = thetas[:, 3]
    theta_r[:, 2] = thetas[:, 2]

    out = np.empty((len(thetas), 8))
    out[:, :4] = unconstrain(theta_l, pcfg)
    out[:, 4:] = unconstrain(theta_r, pcfg)
    return out


def _descend_batch(u_left, u_right, v0, T, pcfg, adam: AdamConfig, iterations: int):
    """Vectorized Adam over a (K, 8) batch of independent initializations.

    Tracks the running per-row best. Rows whose loss turns non-finite stop
    updating but keep their recorded best. Returns (best_loss, best_v, evals).
    """
    x = np.asarray(v0, dtype=np.float64).copy()
    K = x.shape[0]
    m = np.zeros_like(x)
    s = np.zeros_like(x)
    alive = np.ones(K, dtype=bool)

    batch = pair_loss_batch(u_left, u_right, x, T, pcfg, need_grad=True)
    finite = np.isfinite(batch.total)
    best_loss = np.where(finite, batch.total, np.inf)
    best_v = x.copy()
    alive &= finite
    evals = K

    for t in range(1, iterations + 1):
        if not alive.any():
            break
        grad = np.where(alive[:, None], batch.grad, 0.0)
        m = adam.beta1 * m + (1.0 - adam.beta1) * grad
        s = adam.beta2 * s + (1.0 - adam.beta2) * grad * grad
        m_hat = m / (1.0 - adam.beta1**t)
        s_hat = s / (1.0 - adam.beta2**t)
        step = adam.step_size * m_hat / (np.sqrt(s_hat) + adam.eps)
        x = np.where(alive[:, None], x - step, x)

        batch = pair_loss_batch(u_left, u_right, x, T, pcfg, need_grad=True)
        evals += int(alive.sum())
        finite = np.isfinite(batch.total)
        alive &= finite
        improved = alive & (batch.total < best_loss)
        best_loss = np.where(improved, batch.total, best_loss)
        best_v = np.where(improved[:, None], x, best_v)
    return best_loss, best_v, evals


def _sweep_chunk(args):
    u_left, u_right, v0_chunk, T, pcfg, adam, iterations, offset = args
    best_loss, best_v, evals = _descend_batch(
        u_left, u_right, v0_chunk, T, pcfg, adam, iterations
    )
    k = int(np.argmin(best_loss))
    return best_loss[k], offset + k, best_v[k], evals


def grid_search(
    u_left,
    u_right,
    T: Template,
    gcfg: GridConfig,
    acfg: AdamConfig,
    pcfg: ParamConfig,
    threads: int = 1,
):
    """Multi-start descent over the full initialization grid.

    Every init runs a short Adam budget; the best iterate over all traces is
    polished with a full-length run. The reduction is ordered by
    (loss, init index), so results do not depend on the thread count.
    Returns (best preimage, LossBreakdown, stats dict).
    """
    t_start = time.perf_counter()
    v0 = grid_init_points(gcfg, pcfg)
    n_inits = v0.shape[0]

    chunk_rows = max(1, min(n_inits, 512))
    chunks = [
        (u_left, u_right, v0[i : i + chunk_rows], T, pcfg, acfg, gcfg.iters_per_init, i)
        for i in range(0, n_inits, chunk_rows)
    ]

    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_chunk, chunks))
    else:
        results = [_sweep_chunk(c) for c in chunks]

    evals = sum(r[3] for r in results)
    best = min(results, key=lambda r: (r[0], r[1]))
    if not math.isfinite(best[0]):
        raise NonFiniteLoss("every initialization produced a non-finite loss")

    polish = AdamConfig(
        step_size=acfg.step_size,
        beta1=acfg.beta1,
        beta2=acfg.beta2,
        eps=acfg.eps,
        iterations=gcfg.polish_iters,
    )
    p_loss, p_v, p_evals = _descend_batch(
        u_left, u_right, best[2].reshape(1, 8), T, pcfg, polish, polish.iterations
    )
    evals += p_evals
    v_best = p_v[0] if p_loss[0] <= best[0] else best[2]

    breakdown = pair_loss(u_left, u_right, v_best, T, pcfg)
    stats = {
        "inits": int(n_inits),
        "evals": int(evals),
        "wall_ms": (time.perf_counter() - t_start) * 1000.0,
    }
    return v_best, breakdown, stats
