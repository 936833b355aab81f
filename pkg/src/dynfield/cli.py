"""Command-line entry points.

Subcommands: gen-data, train-base, finetune, render, eval, gradcheck.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for data
errors (missing or malformed scenes and checkpoints), 3 for numerical
failures (non-finite losses, failed gradient checks).

Only the standard library is imported at module scope: ``main`` applies the
DFRF_THREADS cap to the BLAS thread-count environment variables before any
numerical code loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _cap_threads() -> None:
    cap = os.environ.get("DFRF_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        print(f"warning: ignoring non-integer DFRF_THREADS={cap!r}",
              file=sys.stderr)
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; usage errors are exit 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_frames(spec: str, n_frames: int) -> list[int]:
    """Frame selection: '7', '0,5,10', or 'start:stop[:step]'."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) not in (2, 3) or not all(p == "" or p.lstrip("-").isdigit()
                                               for p in parts):
            raise ValueError(f"bad frame range {spec!r}; expected start:stop[:step]")
        start = int(parts[0]) if parts[0] else 0
        stop = int(parts[1]) if parts[1] else n_frames
        step = int(parts[2]) if len(parts) == 3 and parts[2] else 1
        ids = list(range(start, stop, step))
    else:
        try:
            ids = [int(p) for p in spec.split(",")]
        except ValueError:
            raise ValueError(f"bad frame list {spec!r}; expected indices like 0,5,10")
    for t in ids:
        if not 0 <= t < n_frames:
            raise ValueError(f"frame {t} out of range; scene has {n_frames} frames")
    if not ids:
        raise ValueError(f"frame selection {spec!r} selects nothing")
    return ids


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    from dynfield.dataio import DataError

    if not os.path.exists(path):
        raise DataError("missing_file", f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return cfg


def _train_config(args, file_cfg: dict):
    """TrainConfig from defaults <- config file <- flags (flags win)."""
    from dynfield.training import TrainConfig

    merged = dict(file_cfg.get("train", {}))
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    if getattr(args, "refs", None) is not None:
        merged["n_references"] = args.refs
    iters = getattr(args, "iters", None)
    if iters is not None:
        if args.command == "finetune":
            merged["finetune_iters"] = iters
        else:
            # keep the default 3:2 coarse/joint split
            merged["coarse_iters"] = (iters * 3) // 5
            merged["joint_iters"] = iters - merged["coarse_iters"]
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise ValueError(f"bad train config: {exc}")


def _model_config(file_cfg: dict, d_a: int):
    from dynfield.model import ModelConfig

    section = dict(file_cfg.get("model", {}))
    section.setdefault("condition_dim", d_a)
    try:
        return ModelConfig(**section)
    except TypeError as exc:
        raise ValueError(f"bad model config: {exc}")


# --------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    from dynfield import dataio

    for i in range(args.scenes):
        path = (os.path.join(args.out, f"scene_{i:03d}") if args.scenes > 1
                else args.out)
        dataio.generate_synthetic_scene(
            path, seed=args.seed + i, n_frames=args.frames,
            resolution=args.resolution,
            deformation_amplitude=args.amplitude, d_a=args.da)
        print(f"wrote {path}")
    return 0


def _cmd_train_base(args) -> int:
    from dynfield import dataio, training

    file_cfg = _load_config_file(args.config)
    scenes = [dataio.load_scene(p) for p in args.scene]
    cfg = _train_config(args, file_cfg)
    model_cfg = _model_config(file_cfg, scenes[0].track.dim)
    _, records = training.train_base(scenes, cfg, model_cfg=model_cfg,
                                     out_dir=args.out)
    final = records[-1] if records else {}
    print(f"trained {cfg.coarse_iters + cfg.joint_iters} iterations; "
          f"final total loss {final.get('total', float('nan')):.6f}")
    print(f"wrote {os.path.join(args.out, 'base.ckpt')}")
    return 0


def _cmd_finetune(args) -> int:
    from dynfield import dataio, training

    file_cfg = _load_config_file(args.config)
    scene = dataio.load_scene(args.scene)
    if args.frames is not None:
        scene = scene.subset(_parse_frames(args.frames, len(scene)))
    cfg = _train_config(args, file_cfg)
    _, records = training.finetune(args.checkpoint, scene, cfg, out_dir=args.out)
    final = records[-1] if records else {}
    print(f"fine-tuned {cfg.finetune_iters} iterations; "
          f"final total loss {final.get('total', float('nan')):.6f}")
    print(f"wrote {os.path.join(args.out, 'finetuned.ckpt')}")
    return 0


def _load_conditions(path: str, n: int, d_a: int):
    """Condition-vector file: JSON, either a list of rows or
    {"conditions": [...]}; must match the frame selection length."""
    import numpy as np

    from dynfield.dataio import DataError

    if not os.path.exists(path):
        raise DataError("missing_file", f"condition file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"condition file {path} is not valid JSON: {exc}")
    rows = doc.get("conditions") if isinstance(doc, dict) else doc
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != d_a:
        raise ValueError(f"condition file must hold (n, {d_a}) rows, "
                         f"got shape {arr.shape}")
    if arr.shape[0] != n:
        raise ValueError(f"{arr.shape[0]} condition rows for {n} selected frames")
    return arr


def _cmd_render(args) -> int:
    from dynfield import dataio, renderer, training

    scene = dataio.load_scene(args.scene)
    model, _, _ = training.load_model_checkpoint(args.checkpoint)
    if model.cfg.condition_dim != scene.track.dim:
        raise ValueError(f"checkpoint expects condition dim "
                         f"{model.cfg.condition_dim}, scene has {scene.track.dim}")
    frame_ids = _parse_frames(args.frames, len(scene))
    conditions = (None if args.conditions is None else
                  _load_conditions(args.conditions, len(frame_ids),
                                   scene.track.dim))
    refs = training.clip_references(model, scene, args.refs)
    if conditions is None:
        track = scene.track
    else:
        from dynfield.conditioning import ConditionTrack

        track = ConditionTrack(conditions)

    images = []
    for pos, t in enumerate(frame_ids):
        condition = model.condition_at(track, pos if conditions is not None else t)
        images.append(renderer.render_frame(model, scene.frames[t], refs,
                                            condition, args.samples))
    # all frames rendered before anything is written: a failure above
    # leaves no partial output
    os.makedirs(args.out, exist_ok=True)
    for t, image in zip(frame_ids, images):
        out_path = os.path.join(args.out, f"{t:05d}.png")
        dataio.write_png(out_path, image)
        print(f"wrote {out_path}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from dynfield import dataio, renderer, training

    scene = dataio.load_scene(args.scene)
    model, _, _ = training.load_model_checkpoint(args.checkpoint)
    frame_ids = _parse_frames(args.frames, len(scene))
    refs = training.clip_references(model, scene, args.refs)

    lines = ["frame\tpsnr\tssim"]
    psnrs, ssims = [], []
    for t in frame_ids:
        frame = scene.frames[t]
        condition = model.condition_at(scene.track, t)
        image = renderer.render_frame(model, frame, refs, condition, args.samples)
        truth = frame.image if args.against == "frames" else frame.background
        p, s = dataio.psnr(image, truth), dataio.ssim(image, truth)
        psnrs.append(p)
        ssims.append(s)
        lines.append(f"{t}\t{p:.4f}\t{s:.6f}")
    lines.append(f"mean\t{np.mean(psnrs):.4f}\t{np.mean(ssims):.6f}")
    table = "\n".join(lines) + "\n"
    if args.out:
        tmp = args.out + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(table)
        os.replace(tmp, args.out)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(table)
    return 0


def _cmd_gradcheck(args) -> int:
    from dynfield import diffmath as dm
    from dynfield.gradsuites import run_suites

    dm.set_profile("test")
    results = run_suites(seed=args.seed if args.seed is not None else 0)
    tol = 1e-4
    worst_name, worst = None, -1.0
    failed = False
    for suite, checks in results.items():
        suite_worst = max(checks.values())
        status = "ok" if suite_worst <= tol else "FAIL"
        if suite_worst > tol:
            failed = True
        if suite_worst > worst:
            worst_name, worst = suite, suite_worst
        print(f"{suite:16s} {status}  worst {suite_worst:.3e} "
              f"over {len(checks)} checks")
    print(f"overall worst {worst:.3e} ({worst_name}), tolerance {tol:.0e}")
    return 3 if failed else 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="dynfield",
                     description="Train and render condition-driven dynamic "
                                 "radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scene directories")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=1,
                   help="number of scenes (>1 writes scene_### subdirectories)")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--amplitude", type=float, default=1.0,
                   help="deformation amplitude; 0 freezes the geometry")
    p.add_argument("--da", type=int, default=32, help="condition vector length")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-base", help="two-stage training over scenes")
    p.add_argument("--scene", required=True, nargs="+",
                   help="two or more scene directories")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file (flags win)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int,
                   help="total base iterations (split 3:2 coarse:joint)")
    p.add_argument("--refs", type=int, default=None,
                   help="reference frames per batch (default 4)")
    p.set_defaults(func=_cmd_train_base)

    p = sub.add_parser("finetune", help="adapt a base checkpoint to one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--refs", type=int, default=None)
    p.add_argument("--frames", help="clip frame selection, e.g. 0:80")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", default="0:1",
                   help="frame selection: '7', '0,5,10', or 'start:stop[:step]'")
    p.add_argument("--conditions",
                   help="JSON file of condition vectors to drive the render "
                        "instead of the scene's own")
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM table for rendered frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", help="write the table here instead of stdout")
    p.add_argument("--frames", default="0:1")
    p.add_argument("--against", choices=("frames", "backgrounds"),
                   default="frames")
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient check suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)

    from dynfield.dataio import DataError
    from dynfield.diffmath import NumericalError

    try:
        return int(args.func(args) or 0)
    except DataError as exc:
        print(f"error ({exc.code}): {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return 3
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
