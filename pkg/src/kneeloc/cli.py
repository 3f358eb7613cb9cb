"""Command-line surface: preprocess, detect, train, eval, synth.

Exit codes: 1 usage, 2 I/O, 3 degenerate input, 4 numerical failure.
Every numeric default can be overridden from a JSON (or TOML, when a toml
reader is installed) config file; explicit flags win over the config file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import imagecore, neural, preprocess
from .detection import Detection, boxes_in_frame
from .loss import LossBreakdown, Template, load_template, save_template, template_hash
from .optimize import AdamConfig, GridConfig, NonFiniteLoss, grid_search
from .parametrize import BoundaryPose, ParamConfig, constrain
from .preprocess import ImageTooSmall, PreprocessConfig, split_bilateral
from .synth import NoiseModel, PlantSpec, generate, joint_like_template

__all__ = ["main"]

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DEGENERATE = 3
EXIT_NUMERIC = 4

METHODS = ("baseline", "neural", "neural+sharpen", "gridsearch")


class DegenerateInput(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    if path is None:
        return {}
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml_reader
        except ImportError:
            try:
                import tomli as toml_reader
            except ImportError:
                raise ValueError(
                    "TOML config requires Python 3.11+ or the tomli package; use JSON instead"
                )
        return toml_reader.loads(text)
    return json.loads(text)


def _section(cfg, name):
    out = cfg.get(name, {})
    if not isinstance(out, dict):
        raise ValueError(f"config section {name!r} must be a table/object")
    return out


def _param_config(cfg, f, args=None):
    sec = dict(_section(cfg, "param"))
    if args is not None:
        for key in ("alpha0", "beta0", "rot_bound"):
            val = getattr(args, key, None)
            if val is not None:
                sec[key] = val
    sec.pop("f", None)
    return ParamConfig(f=f, **sec)


def _adam_config(cfg):
    return AdamConfig(**_section(cfg, "adam"))


def _grid_config(cfg, args=None):
    sec = dict(_section(cfg, "grid"))
    if args is not None:
        for flag, key in (
            ("scales", "n_scales"),
            ("overlap_ratio", "overlap_ratio"),
            ("pair_halfwidth", "pair_halfwidth"),
            ("iters_per_init", "iters_per_init"),
            ("polish_iters", "polish_iters"),
        ):
            val = getattr(args, flag, None)
            if val is not None:
                sec[key] = val
    return GridConfig(**sec)


def _preprocess_config(cfg):
    return PreprocessConfig(**_section(cfg, "preprocess"))


def _net_config(cfg):
    sec = _section(cfg, "net")
    if not sec:
        return neural.LocNetConfig()
    return neural.LocNetConfig(
        input_hw=tuple(sec.get("input_hw", (200, 125))),
        conv_channels=tuple(sec.get("conv_channels", (8, 16, 32, 32))),
        mid_channels=tuple(sec.get("mid_channels", (16, 8))),
        fc_widths=tuple(sec.get("fc_widths", (128, 32))),
    )


def _train_config(cfg, args):
    sec = dict(_section(cfg, "train"))
    for flag, key in (
        ("outer", "outer_iterations"),
        ("epochs", "epochs"),
        ("batch", "batch_size"),
        ("lr_backbone", "lr_backbone"),
        ("lr_head", "lr_head"),
        ("seed", "seed"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            sec[key] = val
    return neural.TrainConfig(**sec)


# ---------------------------------------------------------------------------
# Detection core shared by cmd_detect and cmd_eval.

def _detect_on_halves(method, u_left, u_right, template, fine_template, cfg, args,
                      weights=None):
    # All methods report against the same scoring template (the fine one
    # when given), so losses and template hashes are comparable.
    scoring = fine_template or template
    pcfg = _param_config(cfg, scoring.f, args)
    t0 = time.perf_counter()

    if method == "gridsearch":
        gcfg = _grid_config(cfg, args)
        v8, bd, stats = grid_search(
            u_left, u_right, scoring, gcfg, _adam_config(cfg), pcfg,
            threads=getattr(args, "threads", 1) or 1,
        )
        pose_l = constrain(v8[:4], pcfg)
        pose_r = constrain(v8[4:], pcfg)
    elif method == "baseline":
        sec = _section(cfg, "baseline")
        ratios = getattr(args, "baseline_scales", None) or sec.get("scale_ratios")
        pose_l, pose_r, info, stats = baseline_mod.multiscale_match(
            u_left,
            u_right,
            scoring,
            n_scales=sec.get("n_scales", 5),
            scale_ratios=ratios,
            top_k=sec.get("top_k", 3),
        )
        l_reg = (pose_l[0] - pose_r[0]) ** 2 + (pose_l[2] - pose_r[2]) ** 2
        bd = LossBreakdown(
            total=info["l_left"] + info["l_right"] + l_reg,
            l_left=info["l_left"],
            l_right=info["l_right"],
            l_reg=l_reg,
            negated_left=info["negated_left"],
            negated_right=info["negated_right"],
        )
        stats = dict(stats)
    elif method in ("neural", "neural+sharpen"):
        if weights is None:
            raise FileNotFoundError("neural methods require --weights CHECKPOINT")
        w_coarse, w_fine = weights
        if w_fine is None:
            w_fine = w_coarse
        pcfg_coarse = replace(pcfg, f=template.f)
        v8, bd, info = neural.infer(
            w_coarse,
            w_fine,
            u_left,
            u_right,
            template,
            scoring,
            pcfg_coarse,
            sharpen_refine=(method == "neural+sharpen"),
            adam=_adam_config(cfg),
        )
        pose_l = constrain(v8[:4], pcfg)
        pose_r = constrain(v8[4:], pcfg)
        stats = {"sharpened": info["sharpened"]}
    else:
        raise ValueError(f"unknown method {method!r}")

    stats.setdefault("wall_ms", (time.perf_counter() - t0) * 1000.0)
    return Detection(
        method=method,
        template_hash=template_hash(scoring),
        pose_left=pose_l,
        pose_right=pose_r,
        loss=bd,
        f=scoring.f,
        stats=stats,
    )


def _render_overlay(path, image01, boxes):
    from PIL import Image as PILImage
    from PIL import ImageDraw

    base = np.clip(np.asarray(image01, dtype=np.float64), 0, 1)
    pil = PILImage.fromarray(np.round(base * 255).astype(np.uint8), mode="L").convert(
        "RGB"
    )
    draw = ImageDraw.Draw(pil)
    for corners, color in zip(boxes, ((255, 64, 64), (64, 255, 64))):
        pts = [tuple(p) for p in corners] + [tuple(corners[0])]
        draw.line(pts, fill=color, width=2)
    pil.save(str(path))


def cmd_detect(args) -> int:
    cfg = _load_config(args.config)
    template = load_template(args.template)
    fine_template = load_template(args.fine_template) if args.fine_template else None

    transforms = {"left": None, "right": None}
    original = None
    if args.image:
        original = imagecore.load_image(args.image)
        res = split_bilateral(original, _preprocess_config(cfg))
        if res.degenerate_input:
            raise DegenerateInput(
                "input looks like a single-side crop (taller than wide); "
                "pass the halves explicitly with --left/--right"
            )
        u_left, u_right = res.u_left, res.u_right
        transforms = {"left": res.left_transform, "right": res.right_transform}
    else:
        u_left = imagecore.load_image(args.left)
        u_right = imagecore.load_image(args.right)
        if u_left.shape != u_right.shape:
            raise DegenerateInput(
                f"halves must share one shape, got {u_left.shape} vs {u_right.shape}"
            )

    weights = neural.load_weights(args.weights) if args.weights else None
    det = _detect_on_halves(
        args.method, u_left, u_right, template, fine_template, cfg, args, weights
    )
    det.boxes = [
        boxes_in_frame(det.pose_left, det.f, u_left.shape, transforms["left"]),
        boxes_in_frame(det.pose_right, det.f, u_right.shape, transforms["right"]),
    ]

    payload = det.to_json()
    if args.out:
        Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)

    if args.overlay_dir:
        overlay_dir = Path(args.overlay_dir)
        overlay_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(args.image or args.left).stem
        name = (
            f"{stem}_{args.method.replace('+', '-')}"
            f"_L{det.loss.l_left:.4f}_R{det.loss.l_right:.4f}.png"
        )
        if original is not None:
            _render_overlay(overlay_dir / name, original, det.boxes)
        else:
            _render_overlay(overlay_dir / f"left_{name}", u_left, [det.boxes[0]])
            _render_overlay(overlay_dir / f"right_{name}", u_right, [det.boxes[1]])
    return 0


def _list_pairs(directory):
    directory = Path(directory)
    lefts = sorted(directory.glob("left_*.png")) + sorted(directory.glob("left_*.pgm"))
    pairs = []
    for lp in lefts:
        rp = lp.with_name(lp.name.replace("left_", "right_", 1))
        if rp.exists():
            pairs.append((lp, rp))
    if not pairs:
        raise FileNotFoundError(f"no left_*/right_* image pairs found in {directory}")
    return pairs


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    template = load_template(args.template)
    fine_template = load_template(args.fine_template) if args.fine_template else None
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    weights = neural.load_weights(args.weights) if args.weights else None

    pairs = _list_pairs(args.pairs)
    sums = {m: 0.0 for m in methods}
    for lp, rp in pairs:
        u_l = imagecore.load_image(lp)
        u_r = imagecore.load_image(rp)
        for m in methods:
            det = _detect_on_halves(
                m, u_l, u_r, template, fine_template, cfg, args, weights
            )
            sums[m] += det.loss.l_left + det.loss.l_right

    rows = [(m, sums[m] / len(pairs)) for m in methods]
    if args.out and str(args.out).endswith(".csv"):
        text = "method,left_plus_right_loss\n" + "".join(
            f"{m},{v:.6f}\n" for m, v in rows
        )
    else:
        width = max(len(m) for m, _ in rows)
        text = (
            f"| {'Method'.ljust(width)} | Left+right loss |\n"
            f"| {'-' * width} | {'-' * 15} |\n"
        )
        text += "".join(f"| {m.ljust(width)} | {v:15.6f} |\n" for m, v in rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    template = load_template(args.template)
    fine_template = load_template(args.fine_template) if args.fine_template else None
    tcfg = _train_config(cfg, args)
    net_cfg = _net_config(cfg)
    pcfg = _param_config(cfg, template.f, args)

    pairs = _list_pairs(args.pairs)
    data = [(imagecore.load_image(lp), imagecore.load_image(rp)) for lp, rp in pairs]

    if args.two_phase or fine_template is not None:
        t_fine = fine_template or template
        w_c, w_f, hists = neural.two_phase_train(
            data, template, t_fine, tcfg, pcfg, net_cfg=net_cfg
        )
        neural.save_weights(args.out, w_c, w_f)
        curves = {
            "phase1_raw": hists[0].epoch_raw_mean,
            "phase1_scaled": hists[0].epoch_scaled_mean,
            "phase2_raw": hists[1].epoch_raw_mean,
            "phase2_scaled": hists[1].epoch_scaled_mean,
        }
    else:
        w, hist = neural.train_phase(data, template, tcfg, pcfg, net_cfg=net_cfg)
        if hist.aborted:
            neural.save_weights(args.out, w)
            raise NonFiniteLoss("training aborted on a non-finite loss; last checkpoint saved")
        neural.save_weights(args.out, w)
        curves = {"raw": hist.epoch_raw_mean, "scaled": hist.epoch_scaled_mean}

    if args.curve_out:
        Path(args.curve_out).write_text(json.dumps(curves, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(f"saved weights to {args.out}\n")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    template = (
        load_template(args.template) if args.template else joint_like_template(36, 30)
    )
    if args.emit_template:
        save_template(out / "template", template)

    rng = np.random.default_rng(args.seed)
    noise = NoiseModel(white_amp=args.noise_white, field_amp=args.noise_field)
    truths = []
    for i in range(args.n):
        s = rng.uniform(args.scale_lo, args.scale_hi)
        th_l = np.array(
            [
                s,
                rng.uniform(-args.spread, args.spread),
                rng.uniform(-args.spread, args.spread),
                rng.uniform(-args.rot, args.rot),
            ]
        )
        th_r = np.array(
            [s, rng.uniform(-args.spread, args.spread), th_l[2], th_l[3]]
        )
        spec = PlantSpec(
            template=template,
            theta_left=th_l,
            theta_right=th_r,
            half_shape=(args.half_height, args.half_width),
            noise=noise,
            negate_left=bool(rng.random() < args.negate_prob),
            negate_right=bool(rng.random() < args.negate_prob),
        )
        u_l, u_r, truth = generate(spec, rng)
        imagecore.save_png(out / f"left_{i:04d}.png", u_l)
        imagecore.save_png(out / f"right_{i:04d}.png", u_r)
        truths.append(
            {
                "index": i,
                "theta_left": list(truth["theta_left"]),
                "theta_right": list(truth["theta_right"]),
                "negate_left": truth["negate_left"],
                "negate_right": truth["negate_right"],
            }
        )
    (out / "truth.json").write_text(
        json.dumps(
            {
                "seed": args.seed,
                "template_hash": template_hash(template),
                "half_shape": [args.half_height, args.half_width],
                "pairs": truths,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    sys.stdout.write(f"wrote {args.n} pairs to {out}\n")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args.config)
    img = imagecore.load_image(args.image)
    res = split_bilateral(img, _preprocess_config(cfg))
    if res.degenerate_input and not args.allow_degenerate:
        raise DegenerateInput(
            "input looks like a single-side crop (taller than wide); "
            "re-run with --allow-degenerate to split it anyway"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    u_left, u_right = res.u_left, res.u_right
    if args.augment_max_shift:
        rng = np.random.default_rng(args.seed)
        u_left = preprocess.augment(u_left, rng, args.augment_max_shift)
        u_right = preprocess.augment(u_right, rng, args.augment_max_shift)
    imagecore.save_png(out / "left.png", u_left)
    imagecore.save_png(out / "right.png", u_right)
    (out / "transforms.json").write_text(res.transforms_json() + "\n")
    sys.stdout.write(f"wrote halves and transforms.json to {out}\n")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="kneeloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect the paired regions in one image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="bilateral image (PNG/PGM); split automatically")
    src.add_argument("--left", help="left half image (with --right)")
    p.add_argument("--right", help="right half image (with --left)")
    p.add_argument("--template", required=True, help="template bundle directory")
    p.add_argument("--fine-template", help="second-stage template bundle")
    p.add_argument("--method", choices=METHODS, default="gridsearch")
    p.add_argument("--weights", help="npz checkpoint for the neural methods")
    p.add_argument("--out", help="detection JSON path (default: stdout)")
    p.add_argument("--overlay-dir", help="write overlay PNGs here")
    p.add_argument("--config", help="JSON/TOML config file")
    p.add_argument("--alpha0", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--rot-bound", dest="rot_bound", type=float)
    p.add_argument("--scales", type=int, help="grid search: number of scales")
    p.add_argument("--overlap-ratio", dest="overlap_ratio", type=float)
    p.add_argument("--pair-halfwidth", dest="pair_halfwidth", type=float)
    p.add_argument("--iters-per-init", dest="iters_per_init", type=int)
    p.add_argument("--polish-iters", dest="polish_iters", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument(
        "--baseline-scales",
        dest="baseline_scales",
        type=lambda s: [float(x) for x in s.split(",")],
        help="baseline: comma-separated template/image width ratios",
    )
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="mean loss per method over a pair directory")
    p.add_argument("--pairs", required=True, help="directory with left_*/right_* images")
    p.add_argument("--template", required=True)
    p.add_argument("--fine-template")
    p.add_argument("--methods", default="baseline,gridsearch")
    p.add_argument("--weights")
    p.add_argument("--out", help=".md or .csv table (default: stdout)")
    p.add_argument("--config")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--rot-bound", dest="rot_bound", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train the localization network")
    p.add_argument("--pairs", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--fine-template")
    p.add_argument("--two-phase", action="store_true")
    p.add_argument("--out", required=True, help="output npz checkpoint")
    p.add_argument("--curve-out", help="write the loss curves as JSON")
    p.add_argument("--outer", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr-backbone", dest="lr_backbone", type=float)
    p.add_argument("--lr-head", dest="lr_head", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="generate synthetic pairs with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template", help="template bundle (default: built-in pattern)")
    p.add_argument("--emit-template", action="store_true")
    p.add_argument("--half-height", type=int, default=160)
    p.add_argument("--half-width", type=int, default=100)
    p.add_argument("--scale-lo", dest="scale_lo", type=float, default=0.38)
    p.add_argument("--scale-hi", dest="scale_hi", type=float, default=0.62)
    p.add_argument("--spread", type=float, default=0.2)
    p.add_argument("--rot", type=float, default=0.08)
    p.add_argument("--noise-white", dest="noise_white", type=float, default=0.02)
    p.add_argument("--noise-field", dest="noise_field", type=float, default=0.15)
    p.add_argument("--negate-prob", dest="negate_prob", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="split a bilateral image into halves")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--augment-max-shift", dest="augment_max_shift", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-degenerate", action="store_true")
    p.set_defaults(func=cmd_preprocess)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DegenerateInput, ImageTooSmall, baseline_mod.TemplateTooLarge) as exc:
        print(f"kneeloc: degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NonFiniteLoss, BoundaryPose, FloatingPointError) as exc:
        print(f"kneeloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"kneeloc: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, OSError) as exc:
        print(f"kneeloc: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
