"""Operator entry point: generate data, render scenes, train folds, evaluate,
explain single passes, sweep arrival points, serve the HTTP API.

Settings resolve as flags > config file > built-in defaults. The resolved
run configuration and its hash are embedded in every results file so a rerun
with the same config reproduces identical bytes; wall-clock timestamps only
ever go to the run.log sidecar.

Exit codes: 0 success, 1 usage error, 2 data/model error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import explain as explain_mod
from . import model as model_mod
from . import pipeline, synth, train as train_mod
from .features import passer_stats_from_json
from .model import CLASS_NAMES, load_checkpoint, save_checkpoint
from .scene import (
    RasterImage,
    SceneError,
    desk_raster_config,
    paper_raster_config,
    rasterize_scene,
    scene_from_json,
    write_png,
)

logger = logging.getLogger("passlens")

RASTER_PRESETS = {"desk": desk_raster_config, "paper": paper_raster_config}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1 here
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="passlens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file with per-flag defaults")
        return p

    p = add("gen", "generate a synthetic labeled dataset directory")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=sorted(synth.GENERATOR_MODES))
    p.add_argument("--raster-preset", choices=sorted(RASTER_PRESETS))
    p.add_argument("--render", action="store_true", default=None)
    p.add_argument("--out", required=True)

    p = add("render", "render one scene JSON to a PNG")
    p.add_argument("--scene", required=True)
    p.add_argument("--raster-preset", choices=sorted(RASTER_PRESETS))
    p.add_argument("--out", required=True)

    p = add("train", "train one fold (or all) on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=sorted(model_mod.MODEL_PRESETS))
    p.add_argument("--image-only", action="store_true", default=None)
    p.add_argument("--folds", help="fold index or 'all'")
    p.add_argument("--all-folds", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--out", required=True)

    p = add("eval", "metrics (and optional explanation sweep) for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["test", "val", "train", "all"])
    p.add_argument("--explain", action="store_true", default=None)
    p.add_argument("--overlays", action="store_true", default=None)
    p.add_argument("--out", required=True)

    p = add("explain", "two-stage explanation for one pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--pass-id", type=int)
    p.add_argument("--scene")
    p.add_argument("--stats")
    p.add_argument("--target-class", choices=list(CLASS_NAMES))
    p.add_argument("--out", required=True)

    p = add("sweep", "what-if grid over arrival points in the target zone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--stats")
    p.add_argument("--grid", help="NXxNY, e.g. 24x16")
    p.add_argument("--out", required=True)

    p = add("serve", "start the inference/explanation HTTP service")
    p.add_argument("--checkpoint")
    p.add_argument("--host")
    p.add_argument("--port", type=int)

    return parser


def _load_file_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise ValueError("config file must hold a JSON object")
    return loaded


class _Resolved:
    """flags > config file > defaults, recording everything it resolved."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.args = args
        self.file = _load_file_config(args.config)
        self.values: dict = {"command": command}

    def get(self, name: str, default):
        flag = getattr(self.args, name.replace("-", "_"), None)
        value = flag if flag is not None else self.file.get(name, default)
        self.values[name] = value
        return value

    def run_config(self) -> dict:
        return dict(self.values)

    @property
    def hash(self) -> str:
        return pipeline.config_hash(self.run_config())


def _setup_out_dir(out: str) -> None:
    os.makedirs(out, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out, "run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# --- commands ------------------------------------------------------------------


def _cmd_gen(args) -> int:
    rc = _Resolved(args, "gen")
    n = rc.get("n", 1000)
    seed = rc.get("seed", 7)
    mode = rc.get("mode", "default")
    raster_preset = rc.get("raster-preset", "desk")
    render = bool(rc.get("render", False))
    out = rc.get("out", args.out)
    _setup_out_dir(out)
    config = synth.GENERATOR_MODES[mode](raster=RASTER_PRESETS[raster_preset]())
    logger.info("generating %d scenarios (mode=%s, seed=%d)", n, mode, seed)
    ds = synth.generate_dataset(config, n, seed)
    synth.save_dataset(ds, out, render_png=render)
    print(f"wrote {n} scenarios to {out} (success rate {ds.success_rate():.3f})")
    return 0


def _cmd_render(args) -> int:
    rc = _Resolved(args, "render")
    raster_preset = rc.get("raster-preset", "desk")
    with open(args.scene) as fh:
        scene = scene_from_json(fh.read())
    img = rasterize_scene(scene, RASTER_PRESETS[raster_preset]())
    write_png(img, args.out, metadata={"config_hash": rc.hash})
    print(f"wrote {args.out}")
    return 0


def _train_one_fold(ds, plan, fold, model_config, tc, rc, out) -> tuple:
    result = train_mod.train(
        model_config, ds, plan, fold, tc, metadata={"config_hash": rc.hash}
    )
    ckpt_path = os.path.join(out, f"fold_{fold}.ckpt.npz")
    save_checkpoint(result.checkpoint, ckpt_path)
    _, _, test_idx = plan.fold(fold)
    metrics, _ = train_mod.evaluate(result.checkpoint, ds, test_idx)
    _write_json(
        os.path.join(out, f"fold_{fold}_train.json"),
        {
            "config_hash": rc.hash,
            "run_config": rc.run_config(),
            "fold": fold,
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "val_accuracy_history": result.val_accuracy_history,
            "diverged": result.diverged,
            "test_metrics": metrics.to_dict(),
        },
    )
    logger.info(
        "fold %d: best val acc %.4f (epoch %d), test acc %.4f",
        fold, result.best_val_accuracy, result.best_epoch, metrics.accuracy,
    )
    return result, metrics


def _cmd_train(args) -> int:
    rc = _Resolved(args, "train")
    preset = rc.get("preset", "desk")
    image_only = bool(rc.get("image-only", False))
    folds = rc.get("folds", "0")
    if rc.get("all-folds", False):
        folds = "all"
        rc.values["folds"] = "all"
    tc = train_mod.TrainConfig(
        batch_size=rc.get("batch-size", 128),
        max_epochs=rc.get("epochs", 10),
        learning_rate=rc.get("lr", 1e-4),
        seed=rc.get("seed", 0),
        dtype=rc.get("dtype", "float32"),
    )
    split_seed = rc.get("split-seed", 0)
    out = rc.get("out", args.out)
    _setup_out_dir(out)

    ds = synth.load_dataset(args.data)
    model_config = model_mod.MODEL_PRESETS[preset](image_only=image_only)
    plan = train_mod.make_folds(len(ds), split_seed)
    fold_list = list(range(plan.k)) if folds == "all" else [int(folds)]

    per_fold = []
    for fold in fold_list:
        _, metrics = _train_one_fold(ds, plan, fold, model_config, tc, rc, out)
        per_fold.append(metrics)
        print(f"fold {fold}: test accuracy {metrics.accuracy:.4f}")
    if len(fold_list) > 1:
        summary = train_mod.summarize_fold_metrics(per_fold)
        summary.update({"config_hash": rc.hash, "run_config": rc.run_config()})
        _write_json(os.path.join(out, "summary.json"), summary)
        with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            names = ["accuracy", "precision", "recall", "f1"]
            writer.writerow(["stat"] + names)
            writer.writerow(["mean"] + [repr(summary[n]["mean"]) for n in names])
            writer.writerow(["std"] + [repr(summary[n]["std"]) for n in names])
        print(f"summary over {len(fold_list)} folds: "
              f"accuracy {summary['accuracy']['mean']:.4f} +/- {summary['accuracy']['std']:.4f}")
    return 0


def _split_indices(ckpt, ds, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(len(ds))
    plan = train_mod.make_folds(len(ds), ckpt.metadata.get("split_seed", 0))
    train_idx, val_idx, test_idx = plan.fold(ckpt.metadata.get("fold", 0))
    return {"train": train_idx, "val": val_idx, "test": test_idx}[split]


def _cmd_eval(args) -> int:
    rc = _Resolved(args, "eval")
    split = rc.get("split", "test")
    want_explain = bool(rc.get("explain", False))
    overlays = bool(rc.get("overlays", False))
    out = rc.get("out", args.out)
    rc.get("checkpoint", args.checkpoint)
    rc.get("data", args.data)
    _setup_out_dir(out)

    ckpt = load_checkpoint(args.checkpoint)
    ds = synth.load_dataset(args.data)
    idx = _split_indices(ckpt, ds, split)
    metrics, reports = train_mod.evaluate(ckpt, ds, idx, explain=want_explain)
    payload = {
        "config_hash": rc.hash,
        "run_config": rc.run_config(),
        "checkpoint_hash": ckpt.metadata.get("config_hash", ""),
        "split": split,
        "metrics": metrics.to_dict(),
    }
    _write_json(os.path.join(out, "metrics.json"), payload)
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["accuracy", "precision", "recall", "f1", "n"])
        writer.writerow(
            [repr(metrics.accuracy), repr(metrics.precision), repr(metrics.recall),
             repr(metrics.f1), metrics.n]
        )
    if want_explain:
        with open(os.path.join(out, "explanations.jsonl"), "w") as fh:
            for i, report in zip(idx, reports):
                d = explain_mod.report_to_dict(report)
                d.update({"pass_id": int(i), "config_hash": rc.hash})
                fh.write(json.dumps(d, sort_keys=True))
                fh.write("\n")
        if overlays:
            overlay_dir = os.path.join(out, "overlays")
            os.makedirs(overlay_dir, exist_ok=True)
            for i, report in zip(idx, reports):
                blended = explain_mod.overlay_heatmap(
                    ds.images[i], report.gradcam_upsampled
                )
                write_png(
                    RasterImage(blended),
                    os.path.join(overlay_dir, f"{int(i):05d}.png"),
                    metadata={"config_hash": rc.hash},
                )
    print(f"{split} accuracy {metrics.accuracy:.4f} over {metrics.n} passes")
    return 0


def _cmd_explain(args) -> int:
    rc = _Resolved(args, "explain")
    target = rc.get("target-class", None)
    out = rc.get("out", args.out)
    rc.get("checkpoint", args.checkpoint)
    rc.get("pass-id", None)
    _setup_out_dir(out)
    bundle = pipeline.ModelBundle.from_file(args.checkpoint)

    if args.scene is not None:
        with open(args.scene) as fh:
            scene = scene_from_json(fh.read())
        stats = None
        if args.stats:
            with open(args.stats) as fh:
                stats = passer_stats_from_json(fh.read())
        pass_id = None
    elif args.data is not None and args.pass_id is not None:
        ds = synth.load_dataset(args.data)
        if not 0 <= args.pass_id < len(ds):
            raise ValueError(f"pass-id {args.pass_id} out of range for dataset of {len(ds)}")
        scene, stats, pass_id = ds.scenes[args.pass_id], ds.stats[args.pass_id], args.pass_id
    else:
        raise UsageError("explain needs either --scene [--stats] or --data with --pass-id")

    class_index = None if target is None else CLASS_NAMES.index(target)
    report, raster = pipeline.explain_scene(bundle, scene, stats, class_index)
    d = explain_mod.report_to_dict(report)
    d.update({"pass_id": pass_id, "config_hash": rc.hash})
    _write_json(os.path.join(out, "report.json"), d)
    _write_json(
        os.path.join(out, "feature_bars.json"),
        {
            "config_hash": rc.hash,
            "target_class": CLASS_NAMES[report.target_class],
            "bars": d["feature_grads"],
            "ranked": [
                {"index": i, "value": v}
                for i, v in explain_mod.feature_attribution(report.feature_grads)
            ],
        },
    )
    blended = explain_mod.overlay_heatmap(raster.pixels, report.gradcam_upsampled)
    write_png(RasterImage(blended), os.path.join(out, "overlay.png"),
              metadata={"config_hash": rc.hash})
    print(
        f"class {CLASS_NAMES[report.target_class]}: "
        f"C_T {report.C_T_raw:+.6f}, C_S {report.C_S_raw:+.6f}"
    )
    return 0


def _cmd_sweep(args) -> int:
    rc = _Resolved(args, "sweep")
    grid_text = rc.get("grid", "24x16")
    out = rc.get("out", args.out)
    rc.get("checkpoint", args.checkpoint)
    try:
        nx, ny = (int(part) for part in grid_text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--grid must look like 24x16, got {grid_text!r}") from exc
    _setup_out_dir(out)
    bundle = pipeline.ModelBundle.from_file(args.checkpoint)
    with open(args.scene) as fh:
        scene = scene_from_json(fh.read())
    stats = None
    if args.stats:
        with open(args.stats) as fh:
            stats = passer_stats_from_json(fh.read())
    sweep = pipeline.sweep_scene(bundle, scene, stats, (nx, ny))
    sweep["config_hash"] = rc.hash
    _write_json(os.path.join(out, "sweep.json"), sweep)
    write_png(
        RasterImage(pipeline.sweep_heat_image(bundle, scene, sweep)),
        os.path.join(out, "sweep.png"),
        metadata={"config_hash": rc.hash},
    )
    best = sweep["argmax"]
    print(
        f"best arrival ({best['ball_to'][0]:.1f}, {best['ball_to'][1]:.1f}) "
        f"with p_success {best['p_success']:.4f}"
    )
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    rc = _Resolved(args, "serve")
    host = rc.get("host", "127.0.0.1")
    port = rc.get("port", 8000)
    bundle = None
    if args.checkpoint:
        bundle = pipeline.ModelBundle.from_file(args.checkpoint)
    app = create_app(bundle)
    uvicorn.run(app, host=host, port=port)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "render": _cmd_render,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "sweep": _cmd_sweep,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SceneError, ValueError, FloatingPointError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
