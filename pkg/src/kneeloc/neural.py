"""Trainable pose regressor: a small Siamese conv network with in-repo
forward and backward passes.

The network maps a downsampled half image to the 4-vector preimage of a
pose; one weight set serves both halves. Training minimizes the bilateral
matching cost of the predicted poses directly (no pose labels), with a
per-example scaling factor refreshed from sharpened minima so hard examples
cannot dominate a minibatch. The two-phase scheme trains a second network on
slightly enlarged crops around the first network's detections.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import imagecore
from .loss import Template, pair_loss, pair_loss_grad
from .optimize import AdamConfig, NonFiniteLoss, sharpen
from .parametrize import ParamConfig, affine_matrix, constrain, unconstrain

__all__ = [
    "ShapeMismatch",
    "StaleCache",
    "LocNetConfig",
    "LocNetWeights",
    "TrainConfig",
    "TrainHistory",
    "init_weights",
    "locnet_forward",
    "locnet_backward",
    "train_phase",
    "two_phase_train",
    "enlarge_pose",
    "compose_pose",
    "compose_affine",
    "infer",
    "save_weights",
    "load_weights",
]

CHECKPOINT_VERSION = "1"


class ShapeMismatch(ValueError):
    """Network input does not match the configured resolution."""


class StaleCache(RuntimeError):
    """Backward called with a cache from an outdated forward pass."""


@dataclass(frozen=True)
class LocNetConfig:
    """Architecture descriptor; every conv is 3x3 stride 2 with 1-pixel pad."""

    input_hw: tuple = (200, 125)
    conv_channels: tuple = (8, 16, 32, 32)
    mid_channels: tuple = (16, 8)
    fc_widths: tuple = (128, 32)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_hw": list(self.input_hw),
                "conv_channels": list(self.conv_channels),
                "mid_channels": list(self.mid_channels),
                "fc_widths": list(self.fc_widths),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, blob: str) -> "LocNetConfig":
        d = json.loads(blob)
        return cls(
            input_hw=tuple(d["input_hw"]),
            conv_channels=tuple(d["conv_channels"]),
            mid_channels=tuple(d["mid_channels"]),
            fc_widths=tuple(d["fc_widths"]),
        )

    def feature_hw(self) -> tuple:
        h, w = self.input_hw
        for _ in self.conv_channels:
            h = (h + 1) // 2
            w = (w + 1) // 2
        return h, w


class LocNetWeights:
    """Parameter store; `version` invalidates caches after in-place updates."""

    def __init__(self, cfg: LocNetConfig, params: dict, seed: int = 0):
        self.cfg = cfg
        self.params = params
        self.seed = seed
        self.version = 0

    def bump(self):
        self.version += 1

    def copy(self) -> "LocNetWeights":
        out = LocNetWeights(self.cfg, copy.deepcopy(self.params), self.seed)
        out.version = self.version
        return out

    def backbone_keys(self):
        return [k for k in self.params if k.startswith("conv")]

    def head_keys(self):
        return [k for k in self.params if not k.startswith("conv")]


def init_weights(cfg: LocNetConfig, rng) -> LocNetWeights:
    """He-initialized conv/fc stack; the final layer starts at zero so the
    initial prediction is the center pose."""
    params = {}
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels):
        fan_in = c_in * 9
        params[f"conv{i}_w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3))
        params[f"conv{i}_b"] = np.zeros(c_out)
        c_in = c_out
    for i, c_out in enumerate(cfg.mid_channels):
        params[f"mid{i}_w"] = rng.normal(0, np.sqrt(2.0 / c_in), (c_out, c_in))
        params[f"mid{i}_b"] = np.zeros(c_out)
        c_in = c_out
    fh, fw = cfg.feature_hw()
    width_in = cfg.mid_channels[-1] * fh * fw
    for i, width in enumerate(cfg.fc_widths):
        params[f"fc{i}_w"] = rng.normal(0, np.sqrt(2.0 / width_in), (width, width_in))
        params[f"fc{i}_b"] = np.zeros(width)
        width_in = width
    last = len(cfg.fc_widths)
    params[f"fc{last}_w"] = np.zeros((4, width_in))
    params[f"fc{last}_b"] = np.zeros(4)
    return LocNetWeights(cfg, params, seed=0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _im2col(x, stride=2):
    """(C, H, W) -> (C*9, Ho*Wo) patches for a 3x3 kernel, 1-pixel zero pad."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    ho = (h + 1) // 2
    wo = (w + 1) // 2
    cols = np.empty((c, 9, ho, wo))
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = xp[:, di : di + 2 * ho : stride, dj : dj + 2 * wo : stride][
                :, :ho, :wo
            ]
    return cols.reshape(c * 9, ho * wo), (ho, wo)


def _col2im(dcols, x_shape, stride=2):
    """Adjoint of _im2col."""
    c, h, w = x_shape
    ho = (h + 1) // 2
    wo = (w + 1) // 2
    dxp = np.zeros((c, h + 2, w + 2))
    dcols = dcols.reshape(c, 9, ho, wo)
    for di in range(3):
        for dj in range(3):
            view = dxp[:, di : di + 2 * ho : stride, dj : dj + 2 * wo : stride][:, :ho, :wo]
            view += dcols[:, di * 3 + dj]
    return dxp[:, 1:-1, 1:-1]


_NORM_EPS = 1e-12


def locnet_forward(weights: LocNetWeights, half: np.ndarray):
    """Forward pass; returns (v 4-vector, cache for the backward pass).

    The input must already be at cfg.input_hw (ShapeMismatch otherwise).
    The conv stack feeds two ReLU 1x1 convs, per-location channel
    L2-normalization, three fully connected layers, and the bounded head
    x -> 6(sigmoid(x) - 0.5) keeping every output in (-3, 3).
    """
    cfg = weights.cfg
    half = np.asarray(half, dtype=np.float64)
    if half.shape != tuple(cfg.input_hw):
        raise ShapeMismatch(f"input {half.shape} != configured {cfg.input_hw}")

    p = weights.params
    cache = {"version": weights.version, "x0": half}
    x = half[None]
    for i in range(len(cfg.conv_channels)):
        cols, (ho, wo) = _im2col(x)
        pre = p[f"conv{i}_w"].reshape(len(p[f"conv{i}_b"]), -1) @ cols + p[f"conv{i}_b"][:, None]
        pre = pre.reshape(-1, ho, wo)
        cache[f"conv{i}_in_shape"] = x.shape
        cache[f"conv{i}_cols"] = cols
        cache[f"conv{i}_pre"] = pre
        x = np.maximum(pre, 0.0)

    c, fh, fw = x.shape
    flat = x.reshape(c, fh * fw)
    for i in range(len(cfg.mid_channels)):
        pre = p[f"mid{i}_w"] @ flat + p[f"mid{i}_b"][:, None]
        cache[f"mid{i}_in"] = flat
        cache[f"mid{i}_pre"] = pre
        flat = np.maximum(pre, 0.0)

    norm = np.sqrt((flat * flat).sum(axis=0) + _NORM_EPS)
    normed = flat / norm
    cache["norm_in"] = flat
    cache["norm"] = norm
    cache["normed"] = normed

    vec = normed.reshape(-1)
    n_fc = len(cfg.fc_widths) + 1
    for i in range(n_fc):
        pre = p[f"fc{i}_w"] @ vec + p[f"fc{i}_b"]
        cache[f"fc{i}_in"] = vec
        cache[f"fc{i}_pre"] = pre
        vec = np.maximum(pre, 0.0) if i < n_fc - 1 else pre

    sig = _sigmoid(vec)
    cache["head_sig"] = sig
    v = 6.0 * (sig - 0.5)
    return v, cache


def locnet_backward(weights: LocNetWeights, cache: dict, upstream: np.ndarray) -> dict:
    """Gradients of (upstream . v) with respect to every parameter."""
    if cache.get("version") != weights.version:
        raise StaleCache("weights changed since this forward pass")
    cfg = weights.cfg
    p = weights.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    sig = cache["head_sig"]
    d = np.asarray(upstream, dtype=np.float64) * 6.0 * sig * (1.0 - sig)

    n_fc = len(cfg.fc_widths) + 1
    for i in reversed(range(n_fc)):
        if i < n_fc - 1:
            d = d * (cache[f"fc{i}_pre"] > 0)
        grads[f"fc{i}_w"] += np.outer(d, cache[f"fc{i}_in"])
        grads[f"fc{i}_b"] += d
        d = p[f"fc{i}_w"].T @ d

    c = cfg.mid_channels[-1]
    d = d.reshape(c, -1)
    flat = cache["norm_in"]
    norm = cache["norm"]
    normed = cache["normed"]
    d = d / norm - normed * (d * normed).sum(axis=0) / norm

    for i in reversed(range(len(cfg.mid_channels))):
        d = d * (cache[f"mid{i}_pre"] > 0)
        grads[f"mid{i}_w"] += d @ cache[f"mid{i}_in"].T
        grads[f"mid{i}_b"] += d.sum(axis=1)
        d = p[f"mid{i}_w"].T @ d

    fh, fw = cfg.feature_hw()
    d = d.reshape(-1, fh, fw)
    for i in reversed(range(len(cfg.conv_channels))):
        d = d * (cache[f"conv{i}_pre"] > 0)
        ho, wo = d.shape[1:]
        d2 = d.reshape(d.shape[0], ho * wo)
        grads[f"conv{i}_w"] += (d2 @ cache[f"conv{i}_cols"].T).reshape(
            p[f"conv{i}_w"].shape
        )
        grads[f"conv{i}_b"] += d2.sum(axis=1)
        dcols = p[f"conv{i}_w"].reshape(d.shape[0], -1).T @ d2
        d = _col2im(dcols, cache[f"conv{i}_in_shape"])
    return grads


# ---------------------------------------------------------------------------
# Training.

@dataclass(frozen=True)
class TrainConfig:
    outer_iterations: int = 2
    epochs: int = 5
    batch_size: int = 8
    lr_backbone: float = 1e-5
    lr_head: float = 1e-4
    cu_floor: float = 1e-3
    seed: int = 0
    sharpen_iterations: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.outer_iterations < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("outer_iterations, epochs and batch_size must be >= 1")
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainHistory:
    epoch_raw_mean: list = field(default_factory=list)
    epoch_scaled_mean: list = field(default_factory=list)
    c_u: list = field(default_factory=list)
    aborted: bool = False


class _TwoTierAdam:
    """Adam over named parameter groups with separate learning rates."""

    def __init__(self, weights: LocNetWeights, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = {}
        for k in weights.backbone_keys():
            self.lr[k] = cfg.lr_backbone
        for k in weights.head_keys():
            self.lr[k] = cfg.lr_head
        self.m = {k: np.zeros_like(v) for k, v in weights.params.items()}
        self.s = {k: np.zeros_like(v) for k, v in weights.params.items()}
        self.t = 0

    def step(self, weights: LocNetWeights, grads: dict):
        self.t += 1
        b1 = self.cfg.beta1
        b2 = self.cfg.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.s[k] = b2 * self.s[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            s_hat = self.s[k] / (1 - b2**self.t)
            weights.params[k] -= self.lr[k] * m_hat / (np.sqrt(s_hat) + self.cfg.adam_eps)
        weights.bump()


def _net_input(cfg: LocNetConfig, half: np.ndarray) -> np.ndarray:
    """Resize to the network resolution and standardize intensities."""
    half = imagecore.as_image(half)
    if half.shape != tuple(cfg.input_hw):
        half = imagecore.resize(half, *cfg.input_hw)
    x = half.astype(np.float64)
    x -= x.mean()
    x /= max(float(x.std()), 1e-6)
    return x.astype(np.float32)


def _predict_pair(weights, net_l, net_r):
    v_l, cache_l = locnet_forward(weights, net_l)
    v_r, cache_r = locnet_forward(weights, net_r)
    return np.concatenate([v_l, v_r]), cache_l, cache_r


def train_phase(
    data,
    template: Template,
    cfg: TrainConfig,
    pcfg: ParamConfig,
    net_cfg: LocNetConfig = None,
    weights: LocNetWeights = None,
):
    """One training phase: minibatch descent on the scaled bilateral cost.

    Outer iteration 0 uses unit example scales; later outer iterations
    refresh each example's scale to the reciprocal of its sharpened minimum
    (floored), then run the configured number of epochs. Returns
    (weights, TrainHistory). A non-finite loss stops training and returns the
    last end-of-epoch checkpoint with history.aborted set.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        if net_cfg is None:
            net_cfg = LocNetConfig()
        weights = init_weights(net_cfg, rng)
        weights.seed = cfg.seed

    net_inputs = [
        (_net_input(weights.cfg, u_l), _net_input(weights.cfg, u_r)) for u_l, u_r in data
    ]
    history = TrainHistory()
    optimizer = _TwoTierAdam(weights, cfg)
    checkpoint = weights.copy()
    n = len(data)
    c_u = np.ones(n)

    sharpen_cfg = AdamConfig(iterations=cfg.sharpen_iterations)
    for outer in range(cfg.outer_iterations):
        if outer > 0:
            for i, (u_l, u_r) in enumerate(data):
                v0, _, _ = _predict_pair(weights, *net_inputs[i])
                try:
                    _, bd = sharpen(u_l, u_r, template, pcfg, v0, sharpen_cfg)
                    best = bd.total
                except NonFiniteLoss:
                    best = pair_loss(u_l, u_r, v0, template, pcfg).total
                c_u[i] = 1.0 / max(best, cfg.cu_floor)
        history.c_u = c_u.copy().tolist()

        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            raw_sum = 0.0
            scaled_sum = 0.0
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                grads = {k: np.zeros_like(v) for k, v in weights.params.items()}
                bad = False
                for i in batch:
                    u_l, u_r = data[i]
                    v8, cache_l, cache_r = _predict_pair(weights, *net_inputs[i])
                    bd, g8 = pair_loss_grad(u_l, u_r, v8, template, pcfg)
                    if not np.isfinite(bd.total):
                        bad = True
                        break
                    raw_sum += bd.total
                    scaled_sum += c_u[i] * bd.total
                    gl = locnet_backward(weights, cache_l, c_u[i] * g8[:4])
                    gr = locnet_backward(weights, cache_r, c_u[i] * g8[4:])
                    for k in grads:
                        grads[k] += gl[k] + gr[k]
                if bad:
                    history.aborted = True
                    return checkpoint, history
                for k in grads:
                    grads[k] /= len(batch)
                optimizer.step(weights, grads)
            history.epoch_raw_mean.append(raw_sum / n)
            history.epoch_scaled_mean.append(scaled_sum / n)
            checkpoint = weights.copy()
    return weights, history


def enlarge_pose(theta, pcfg: ParamConfig, factor: float = 1.2) -> np.ndarray:
    """Grow the patch scale, re-clamping so it stays strictly inside the frame."""
    theta = np.asarray(theta, dtype=np.float64).copy()
    margin = 1e-6
    s_max = pcfg.alpha0 + pcfg.beta0 - margin
    theta[0] = min(theta[0] * factor, s_max)
    bx = (1.0 - theta[0]) * (1.0 - margin)
    by = (1.0 - theta[0] / pcfg.f) * (1.0 - margin)
    theta[1] = np.clip(theta[1], -bx, bx)
    theta[2] = np.clip(theta[2], -by, by)
    return theta


def inner_param_config(pcfg: ParamConfig) -> ParamConfig:
    """Pose box for the second-phase extraction from an enlarged crop.

    The crop is already aspect-corrected, so the inner family is isotropic
    (f = 1); with that choice the composed pose is exactly in-family. The
    scale range spans nearly (0, 1) so the inner pose can reach
    1/enlarge_factor and undo the enlargement.
    """
    return ParamConfig(alpha0=0.15, beta0=0.8, rot_bound=pcfg.rot_bound, f=1.0)


def compose_pose(theta_outer, theta_inner, f_outer: float) -> np.ndarray:
    """Pose of the inner extraction expressed in the outer pose's frame.

    Scales multiply, the inner center maps through the outer transform,
    rotations add. Composition with the identity-like inner pose
    (scale 1, centered) reproduces the outer pose exactly; for an isotropic
    rotation-free inner pose the rule is the exact matrix composition.
    """
    theta_outer = np.asarray(theta_outer, dtype=np.float64)
    theta_inner = np.asarray(theta_inner, dtype=np.float64)
    A = affine_matrix(theta_outer, f_outer)
    center = A[:, :2] @ theta_inner[1:3] + A[:, 2]
    return np.array(
        [
            theta_outer[0] * theta_inner[0],
            center[0],
            center[1],
            theta_outer[3] + theta_inner[3],
        ]
    )


def compose_affine(a_outer, a_inner) -> np.ndarray:
    """Exact matrix composition: apply a_inner, then a_outer."""
    a_outer = np.asarray(a_outer, dtype=np.float64)
    a_inner = np.asarray(a_inner, dtype=np.float64)
    out = np.empty((2, 3))
    out[:, :2] = a_outer[:, :2] @ a_inner[:, :2]
    out[:, 2] = a_outer[:, :2] @ a_inner[:, 2] + a_outer[:, 2]
    return out


def _clamp_into_box(theta, pcfg: ParamConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).copy()
    margin = 1e-6
    lo = pcfg.alpha0 * (1 + margin)
    hi = (pcfg.alpha0 + pcfg.beta0) * (1 - margin)
    theta[0] = np.clip(theta[0], lo, hi)
    bx = (1.0 - theta[0]) * (1.0 - margin)
    by = (1.0 - theta[0] / pcfg.f) * (1.0 - margin)
    theta[1] = np.clip(theta[1], -bx, bx)
    theta[2] = np.clip(theta[2], -by, by)
    if pcfg.rot_bound > 0:
        theta[3] = np.clip(
            theta[3], -pcfg.rot_bound * (1 - margin), pcfg.rot_bound * (1 - margin)
        )
    else:
        theta[3] = 0.0
    return theta


def two_phase_train(
    data,
    t_coarse: Template,
    t_fine: Template,
    cfg: TrainConfig,
    pcfg: ParamConfig,
    net_cfg: LocNetConfig = None,
    enlarge_factor: float = 1.2,
):
    """Train the coarse network, then a fresh network on enlarged crops.

    Phase-2 inputs are each half warped at its phase-1 pose enlarged by the
    given factor, on the coarse template grid. Returns
    (weights_coarse, weights_fine, histories).
    """
    pcfg_coarse = replace(pcfg, f=t_coarse.f)
    w_coarse, hist1 = train_phase(data, t_coarse, cfg, pcfg_coarse, net_cfg=net_cfg)

    crops = []
    for u_l, u_r in data:
        pair = []
        for half in (u_l, u_r):
            v, _ = locnet_forward(w_coarse, _net_input(w_coarse.cfg, half))
            theta = enlarge_pose(constrain(v, pcfg_coarse), pcfg_coarse, enlarge_factor)
            pair.append(
                imagecore.warp(half, affine_matrix(theta, t_coarse.f), *t_coarse.shape)
            )
        crops.append(tuple(pair))

    cfg_fine = replace(cfg, seed=cfg.seed + 1)
    w_fine, hist2 = train_phase(
        crops, t_fine, cfg_fine, inner_param_config(pcfg), net_cfg=net_cfg
    )
    return w_coarse, w_fine, (hist1, hist2)


def infer(
    weights_coarse: LocNetWeights,
    weights_fine: LocNetWeights,
    u_left,
    u_right,
    t_coarse: Template,
    t_fine: Template,
    pcfg: ParamConfig,
    sharpen_refine: bool = False,
    adam: AdamConfig = None,
    enlarge_factor: float = 1.2,
):
    """Two-phase detection: coarse pose, enlarged crop, fine pose, composition.

    Returns (v8, LossBreakdown, info). The loss is evaluated at the composed
    pose against the fine template in the original half frame; the optional
    refinement runs the sharpening step from the composed preimage, so its
    reported loss can never exceed the unrefined one.
    """
    pcfg_coarse = replace(pcfg, f=t_coarse.f)
    pcfg_fine = replace(pcfg, f=t_fine.f)
    pcfg_inner = inner_param_config(pcfg)

    composed = []
    for half in (imagecore.as_image(u_left), imagecore.as_image(u_right)):
        v1, _ = locnet_forward(weights_coarse, _net_input(weights_coarse.cfg, half))
        theta_e = enlarge_pose(constrain(v1, pcfg_coarse), pcfg_coarse, enlarge_factor)
        crop = imagecore.warp(half, affine_matrix(theta_e, t_coarse.f), *t_coarse.shape)
        v2, _ = locnet_forward(weights_fine, _net_input(weights_fine.cfg, crop))
        theta_2 = constrain(v2, pcfg_inner)
        theta_c = _clamp_into_box(compose_pose(theta_e, theta_2, t_coarse.f), pcfg_fine)
        composed.append(theta_c)

    v8 = np.concatenate(
        [unconstrain(composed[0], pcfg_fine), unconstrain(composed[1], pcfg_fine)]
    )
    info = {"theta_left": composed[0], "theta_right": composed[1]}
    if sharpen_refine:
        v8, bd = sharpen(u_left, u_right, t_fine, pcfg_fine, v8, adam)
        info["sharpened"] = True
    else:
        bd = pair_loss(u_left, u_right, v8, t_fine, pcfg_fine)
        info["sharpened"] = False
    return v8, bd, info


# ---------------------------------------------------------------------------
# Checkpoints: npz archive with an architecture descriptor.

def save_weights(path, weights: LocNetWeights, weights_fine: LocNetWeights = None):
    """Write one or both phases to an npz checkpoint."""
    payload = {
        "__meta__": np.frombuffer(
            json.dumps(
                {
                    "version": CHECKPOINT_VERSION,
                    "arch": weights.cfg.to_json(),
                    "arch_fine": weights_fine.cfg.to_json() if weights_fine else None,
                    "seed": weights.seed,
                }
            ).encode(),
            dtype=np.uint8,
        )
    }
    for k, v in weights.params.items():
        payload[f"coarse/{k}"] = v
    if weights_fine is not None:
        for k, v in weights_fine.params.items():
            payload[f"fine/{k}"] = v
    np.savez(path, **payload)


def load_weights(path):
    """Read a checkpoint; returns (coarse, fine-or-None)."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = LocNetConfig.from_json(meta["arch"])
        coarse_params = {
            k.split("/", 1)[1]: archive[k] for k in archive.files if k.startswith("coarse/")
        }
        coarse = LocNetWeights(cfg, coarse_params, seed=meta.get("seed", 0))
        fine = None
        if meta.get("arch_fine"):
            fine_cfg = LocNetConfig.from_json(meta["arch_fine"])
            fine_params = {
                k.split("/", 1)[1]: archive[k] for k in archive.files if k.startswith("fine/")
            }
            fine = LocNetWeights(fine_cfg, fine_params, seed=meta.get("seed", 0))
    return coarse, fine
