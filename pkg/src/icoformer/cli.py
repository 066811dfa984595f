"""Command line front end: ``icoformer <subcommand> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or IO error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cache import resolve_cache_dir, tables_provider
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint_config, save_checkpoint
from .model import ModelConfig, flop_estimate, param_count
from .resample import (ErpImage, ImageKind, SphereSignal, erp_to_sphere, load_image, save_image,
                       sphere_to_erp)
from .sphere import NodeType, icosphere, neighbor_table
from .training import DivergenceError, evaluate, make_scene, train_toy, write_curve
from .verify import (EQUIVARIANCE_TOLERANCE, MODEL_TOLERANCE, OP_TOLERANCE, equivariance_suite,
                     model_gradcheck, op_gradcheck_suite)

SCHEMA_VERSION = 1
MAX_INFO_RANK = 9
# balls away from the 12 pentagons look alike at every rank >= this one
_EXACT_BALL_RANK = 6

log = logging.getLogger("icoformer")


class UsageError(Exception):
    """Bad flags, incompatible inputs or unreadable files (exit 2)."""


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps({"schema_version": SCHEMA_VERSION, "command": args.command, **payload},
                         sort_keys=True))
    else:
        print("\n".join(lines))


def _load_config(args, **overrides) -> ModelConfig:
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ModelConfig.from_dict(d)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return cfg


# -- info ----------------------------------------------------------------

def cmd_info(args) -> int:
    r = args.rank
    if not 0 <= r <= MAX_INFO_RANK:
        raise UsageError(f"rank must be in [0, {MAX_INFO_RANK}], got {r}")
    nt = NodeType.parse(args.node_type)
    g = icosphere(r)
    ball_rank = min(r, _EXACT_BALL_RANK)
    gb = icosphere(ball_rank)
    max_ball = {k: int(neighbor_table(gb, nt, k).width) for k in (1, 2, 3)}
    hist = g.degree_histogram(nt)
    payload = {
        "rank": r, "node_type": nt.value, "vertices": g.vertex_count, "faces": g.face_count,
        "edges": g.edge_count, "nodes": g.node_count(nt),
        "degree_histogram": {str(k): v for k, v in sorted(hist.items())},
        "max_neighborhood": {str(k): v for k, v in max_ball.items()},
    }
    lines = [f"rank {r} ({nt.value} nodes)",
             f"vertices {g.vertex_count}", f"faces {g.face_count}", f"edges {g.edge_count}",
             f"nodes {g.node_count(nt)}",
             "degree histogram " + ", ".join(f"{k}:{v}" for k, v in sorted(hist.items())),
             "max neighborhood size " + ", ".join(f"K={k}:{v}" for k, v in max_ball.items())]
    _emit(args, payload, lines)
    return 0


# -- stats ---------------------------------------------------------------

def cmd_stats(args) -> int:
    cfg = _load_config(args, rank=args.rank)
    n_params = param_count(cfg)
    flops = flop_estimate(cfg)
    payload = {"config": cfg.to_dict(), "params": n_params, "flops": flops.total,
               "flops_breakdown": flops.breakdown, "flop_convention": flops.convention}
    lines = [f"rank {cfg.rank} {cfg.node_type} c_head={cfg.c_head} c_win={cfg.c_win}",
             f"parameters {n_params} ({n_params / 1e6:.2f}M)",
             f"flops {flops.total} ({flops.total / 1e9:.2f}G)",
             f"convention: {flops.convention}"]
    _emit(args, payload, lines)
    return 0


# -- convert -------------------------------------------------------------

def cmd_convert(args) -> int:
    try:
        if args.direction == "erp2sph":
            if args.rank is None:
                raise UsageError("erp2sph needs --rank")
            img = load_image(args.input, args.kind)
            sig = erp_to_sphere(img, icosphere(args.rank), args.node_type)
            sig.save(args.output)
            payload = {"rank": sig.rank, "node_type": sig.node_type.value, "nodes": sig.values.shape[0],
                       "channels": sig.channels}
            lines = [f"wrote {args.output}: {sig.values.shape[0]} x {sig.channels} values "
                     f"(rank {sig.rank} {sig.node_type.value})"]
        else:
            sig = SphereSignal.load(args.input)
            vals = sig.values
            kind = ImageKind(args.kind)
            if kind is ImageKind.LABEL and args.mode != "nearest":
                raise UsageError("labels can only be rendered with --mode nearest")
            img = sphere_to_erp(SphereSignal(sig.rank, sig.node_type, vals), args.width, args.height,
                                args.mode, kind)
            if kind is ImageKind.LABEL:
                img = ErpImage(np.round(img.values), kind)
            save_image(img, args.output)
            payload = {"width": img.width, "height": img.height, "channels": img.channels}
            lines = [f"wrote {args.output}: {img.width}x{img.height}x{img.channels}"]
    except UsageError:
        raise
    except (OSError, ValueError, CheckpointError) as exc:
        raise UsageError(str(exc)) from None
    _emit(args, payload, lines)
    return 0


# -- infer ---------------------------------------------------------------

def cmd_infer(args) -> int:
    try:
        stored = read_checkpoint_config(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(str(exc)) from None
    if args.config:
        cfg = _load_config(args, rank=args.rank)
    elif args.rank is not None:
        cfg = stored.with_rank(args.rank)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(f"invalid config: {exc}") from None
    else:
        cfg = stored
    provider = tables_provider(resolve_cache_dir(args.cache_dir))
    try:
        model = load_checkpoint(args.checkpoint, cfg, tables_provider=provider)
    except CheckpointError as exc:
        raise UsageError(f"checkpoint incompatible with config: {exc}") from None

    scene = None
    try:
        if args.image:
            img = load_image(args.image, ImageKind.RGB)
            if img.channels != cfg.in_channels:
                raise UsageError(f"image has {img.channels} channels, model expects {cfg.in_channels}")
            x = erp_to_sphere(img, icosphere(cfg.rank), cfg.node_type).values
        else:
            scene = make_scene(args.scene, cfg.rank, cfg.node_type)
            x = scene.rgb
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    pred = model.predict(np.asarray(x, dtype=np.float32))
    if not np.isfinite(pred).all():
        print("error: non-finite model output", file=sys.stderr)
        return 1

    payload: dict = {"rank": cfg.rank, "nodes": int(pred.shape[0]), "out_channels": int(pred.shape[1])}
    lines = [f"inferred {pred.shape[0]} nodes x {pred.shape[1]} channels at rank {cfg.rank}"]
    task = "depth" if cfg.out_channels == 1 else "seg"
    if scene is not None:
        metrics = evaluate(model, scene, task).to_dict()
        payload["metrics"] = metrics
        lines.append("metrics " + " ".join(f"{k}={v:.6f}" for k, v in metrics.items()))
        if args.metrics:
            Path(args.metrics).write_text(json.dumps(metrics, indent=2, sort_keys=True))
    if args.output:
        vals = pred if task == "depth" else pred.argmax(axis=1)[:, None].astype(np.float32)
        kind = ImageKind.DEPTH if task == "depth" else ImageKind.LABEL
        if kind is ImageKind.DEPTH:
            vals = np.maximum(vals, 0.0)
        try:
            img = sphere_to_erp(SphereSignal(cfg.rank, cfg.node_type, vals), args.width, args.height,
                                "nearest", kind)
            save_image(img, args.output)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        payload["output"] = str(args.output)
        lines.append(f"wrote {args.output}")
    _emit(args, payload, lines)
    return 0


# -- train-toy -----------------------------------------------------------

def cmd_train_toy(args) -> int:
    out_ch = 1 if args.task == "depth" else 6
    overrides = {"rank": args.rank, "out_channels": out_ch}
    if not args.config:
        overrides["num_stages"] = args.num_stages
        overrides["rank"] = 4 if args.rank is None else args.rank
    cfg = _load_config(args, **overrides)
    try:
        scene = make_scene(args.scene, cfg.rank, cfg.node_type)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    provider = tables_provider(resolve_cache_dir(args.cache_dir))
    init = None
    if args.init:
        try:
            init = load_checkpoint(args.init, cfg, tables_provider=provider)
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"cannot initialize from {args.init}: {exc}") from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        res = train_toy(cfg, scene, steps=args.steps, seed=args.seed, task=args.task, lr=args.lr,
                        eval_every=args.eval_every, model=init, tables_provider=provider)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_checkpoint(res.model, out_dir / "checkpoint.sufm")
    write_curve(out_dir / "curve.csv", res.losses, res.evals)
    metrics = res.metrics.to_dict()
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    payload = {"steps": args.steps, "final_loss": res.losses[-1] if res.losses else None,
               "metrics": metrics, "out_dir": str(out_dir), "seconds": round(res.seconds, 3)}
    lines = [f"trained {args.steps} steps in {res.seconds:.1f}s, final loss "
             f"{res.losses[-1] if res.losses else float('nan'):.6f}",
             "metrics " + " ".join(f"{k}={v:.6f}" for k, v in metrics.items()),
             f"wrote {out_dir}/checkpoint.sufm, curve.csv, metrics.json, config.json"]
    _emit(args, payload, lines)
    return 0


# -- verification --------------------------------------------------------

def cmd_gradcheck(args) -> int:
    ops_rep = op_gradcheck_suite(seed=args.seed)
    model_rep = model_gradcheck(rank=args.rank, num_stages=args.num_stages, seed=args.seed,
                                max_coords=args.max_coords)
    ok = ops_rep.worst < OP_TOLERANCE and model_rep.worst < MODEL_TOLERANCE
    results = {**ops_rep.results, **model_rep.results}
    payload = {"passed": ok, "op_worst": ops_rep.worst, "model_worst": model_rep.worst,
               "op_tolerance": OP_TOLERANCE, "model_tolerance": MODEL_TOLERANCE,
               "results": {k: {"max_rel_error": v[0], "worst_param": v[1], "checked": v[2]}
                           for k, v in results.items()}}
    lines = [f"{k:28s} {v[0]:.3e}  ({v[2]} coords, worst {v[1] or '-'})" for k, v in results.items()]
    lines.append(f"{'PASS' if ok else 'FAIL'}: worst op error {ops_rep.worst:.3e} (< {OP_TOLERANCE:g}), "
                 f"worst model error {model_rep.worst:.3e} (< {MODEL_TOLERANCE:g})")
    _emit(args, payload, lines)
    return 0 if ok else 1


def cmd_equivariance(args) -> int:
    try:
        rep = equivariance_suite(rank=args.rank, num_stages=args.num_stages, seed=args.seed,
                                 node_type=args.node_type, tilt=args.tilt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ok = rep.worst < EQUIVARIANCE_TOLERANCE
    payload = {"passed": ok, "max_deviation": None if rep.error else rep.worst, "tolerance": EQUIVARIANCE_TOLERANCE,
               "deviations": rep.deviations, "error": rep.error}
    lines = [f"{k:12s} {v:.3e}" for k, v in rep.deviations.items()]
    if rep.error:
        lines.append(f"symmetry error: {rep.error}")
    lines.append(f"{'PASS' if ok else 'FAIL'}: max deviation {rep.worst:.3e} (< {EQUIVARIANCE_TOLERANCE:g})")
    _emit(args, payload, lines)
    return 0 if ok else 1


# -- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--cache-dir", default=None, help="table cache (default: $SUFM_CACHE_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="icoformer", description="Spherical attention U-Net toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("info", parents=[common], help="icosphere counts and neighborhoods")
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--node-type", choices=["hex", "ico"], default="hex")
    s.set_defaults(fn=cmd_info)

    s = sub.add_parser("stats", parents=[common], help="parameter count and FLOP estimate")
    s.add_argument("--config", help="model config JSON")
    s.add_argument("--rank", type=int, default=None, help="override the config rank")
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("convert", parents=[common], help="ERP image <-> sphere signal")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--direction", choices=["erp2sph", "sph2erp"], required=True)
    s.add_argument("--rank", type=int)
    s.add_argument("--node-type", choices=["hex", "ico"], default="hex")
    s.add_argument("--kind", choices=[k.value for k in ImageKind], default="rgb")
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--mode", choices=["nearest", "barycentric"], default="nearest")
    s.set_defaults(fn=cmd_convert)

    s = sub.add_parser("infer", parents=[common], help="run a checkpoint on a scene or image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="target config JSON (may change the rank)")
    s.add_argument("--rank", type=int, default=None, help="run the checkpoint at another rank")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--scene", choices=["box", "sphere"], default="box")
    src.add_argument("--image", help="RGB PNG in equirectangular layout")
    s.add_argument("--out", dest="output", help="prediction image (.pfm depth or .png labels)")
    s.add_argument("--metrics", help="write metrics JSON here (scene input only)")
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=256)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("train-toy", parents=[common], help="overfit one synthetic scene")
    s.add_argument("--config", help="model config JSON")
    s.add_argument("--rank", type=int, default=None)
    s.add_argument("--num-stages", type=int, default=2)
    s.add_argument("--task", choices=["depth", "seg"], default="depth")
    s.add_argument("--scene", choices=["box", "sphere"], default="box")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--eval-every", type=int, default=100)
    s.add_argument("--init", help="start from this checkpoint (any rank)")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--rank", type=int, default=4)
    s.add_argument("--num-stages", type=int, default=2)
    s.add_argument("--max-coords", type=int, default=2, help="coordinates sampled per model tensor")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("equivariance", parents=[common], help="C5 rotation / reflection check")
    s.add_argument("--rank", type=int, default=5)
    s.add_argument("--num-stages", type=int, default=3)
    s.add_argument("--node-type", choices=["hex", "ico"], default="hex")
    s.add_argument("--tilt", type=float, default=0.0,
                   help="rotate the mesh off the pole axis (radians); nonzero is a negative control")
    s.set_defaults(fn=cmd_equivariance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
