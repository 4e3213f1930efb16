"""Command line entry point: ``mphpe <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Every command that writes artifacts also writes a manifest holding its
config snapshot, seed and the sha256 of each artifact.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "MPHPE_OUT"
MANIFEST_SCHEMA_VERSION = 1

log = logging.getLogger("mphpe")


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so the caller controls the exit code."""

    def error(self, message):
        raise UsageError(message, self.format_usage())


# ---------------------------------------------------------------- helpers

def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, seed, artifacts, root=None) -> Path:
    """Manifest with artifact hashes keyed by path relative to ``root``."""
    path = Path(path)
    root = Path(root) if root else path.parent
    hashes = {}
    for a in sorted({Path(p) for p in artifacts}):
        try:
            key = a.resolve().relative_to(root.resolve()).as_posix()
        except ValueError:
            key = str(a)
        hashes[key] = sha256_file(a)
    obj = {"schema_version": MANIFEST_SCHEMA_VERSION, "command": command, "version": __version__,
           "seed": seed, "config": config, "artifacts": hashes}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _default_out(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _file_manifest(out_file: Path) -> Path:
    return out_file.with_name(out_file.stem + ".manifest.json")


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise FileNotFoundError(f"{what} {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{what} {path}: invalid JSON at line {e.lineno} column {e.colno}") from e


# ---------------------------------------------------------------- commands

def cmd_build_synth(args) -> int:
    from .synthgen import SceneSpec, generate_benchmark

    spec_d = _load_json(args.config, "config") if args.config else {}
    spec_d.update(parse_overrides(args.set))
    if args.seed is not None:
        spec_d["seed"] = args.seed
    spec = SceneSpec.from_dict(spec_d)
    out = _default_out(args, "synth")
    res = generate_benchmark(spec, (args.train, args.val), out)
    artifacts = [res.train, res.val, *res.scene_files.values()]
    artifacts += sorted((out / "images").rglob("*.png"))
    config = {"scene_spec": spec.to_dict(), "train": args.train, "val": args.val}
    write_manifest(out / "manifest.json", "build-synth", config, spec.seed, artifacts, out)
    print(f"wrote {res.train} and {res.val}")
    return EXIT_OK


def cmd_labelgen(args) -> int:
    from . import datamodel
    from .labelgen import HemisphereConfig, build_labels

    over = parse_overrides(args.set)
    unknown = set(over) - {"n", "kappa"}
    if unknown:
        raise ValueError(f"unknown labelgen keys: {sorted(unknown)}")
    n = int(over.get("n", args.n))
    cfg = HemisphereConfig(kappa=float(over.get("kappa", args.kappa)))
    ds = build_labels(args.scene, n=n, cfg=cfg, seed=args.seed)
    out = Path(args.out) if args.out else _default_out(args, "labels") / "labels.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    datamodel.save(ds, out)
    config = {"scene": str(args.scene), "n": n, "kappa": cfg.kappa}
    write_manifest(_file_manifest(out), "labelgen", config, args.seed, [out])
    print(f"wrote {out}: {len(ds.images)} images, {len(ds.annotations)} heads")
    return EXIT_OK


def _train_config(args, name: str = "train"):
    from .trainer import TrainConfig

    if not args.config:
        raise UsageError("--config is required")
    cfg = TrainConfig.load(args.config)
    over = parse_overrides(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    # precedence: --out, then --set out=, then the config file, then the env default
    if args.out:
        over["out"] = args.out
    elif "out" not in over and cfg.out == TrainConfig().out:
        over["out"] = str(_default_out(args, name))
    return cfg.with_overrides(over)


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)
    res = train(cfg, resume=args.resume)
    write_manifest(Path(cfg.out) / "manifest.json", "train", cfg.to_dict(), cfg.seed,
                   [res.checkpoint, Path(cfg.out) / "metrics.jsonl", Path(cfg.out) / "config.json"], cfg.out)
    if res.diverged:
        print(f"training diverged: {res.error}; last good checkpoint at {res.checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps(last, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .trainer import ablation_sweep

    cfg = _train_config(args, "sweep")
    grid = _load_json(args.grid, "grid")
    rows = ablation_sweep(cfg, grid, cfg.out)
    out = Path(cfg.out)
    from .plotting import plot_sweep

    plots = plot_sweep(rows, out)
    write_manifest(out / "manifest.json", "sweep", {"config": cfg.to_dict(), "grid": grid}, cfg.seed,
                   [out / "sweep.json", *plots], out)
    for r in rows:
        print(json.dumps({k: r.get(k) for k in ("name", "status", "val_mae_avg", "val_mae_yaw", "val_ap", "p_m")}))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_predict(args) -> int:
    from . import datamodel
    from .trainer import predict_images

    id_map = None
    if args.gt:
        gt = datamodel.load(args.gt)
        id_map = {Path(im.file_name).name: im.image_id for im in gt.images}
    ds = predict_images(args.weights, args.images, tau_iou=args.tau_iou, conf_floor=args.conf_floor, id_map=id_map)
    out = Path(args.out) if args.out else _default_out(args, "predict") / "preds.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    datamodel.save(ds, out)
    config = {"weights": str(args.weights), "weights_sha256": sha256_file(args.weights), "images": str(args.images),
              "tau_iou": args.tau_iou, "conf_floor": args.conf_floor}
    write_manifest(_file_manifest(out), "predict", config, args.seed, [out])
    print(f"wrote {out}: {len(ds.annotations)} detections on {len(ds.images)} images")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import datamodel
    from .infer_eval import evaluate

    pred = datamodel.load(args.pred)
    gt = datamodel.load(args.gt)
    report = evaluate(pred, gt, args.range, tau_conf=args.tau_conf)
    out = Path(args.report) if args.report else (
        Path(args.out) / "report.json" if args.out else Path(args.pred).with_name("report.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    config = {"pred": str(args.pred), "gt": str(args.gt), "range": args.range, "tau_conf": args.tau_conf,
              "pred_sha256": sha256_file(args.pred), "gt_sha256": sha256_file(args.gt)}
    write_manifest(_file_manifest(out), "eval", config, args.seed, [out])
    print(report.summary())
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_sweep, plot_yaw_bins

    data = _load_json(args.report, "report")
    out = _default_out(args, "plots")
    if isinstance(data, list):
        paths = plot_sweep(data, out)
    elif isinstance(data, dict) and "yaw_bins" in data:
        paths = plot_yaw_bins(data["yaw_bins"], out, f"MAE by ground-truth yaw ({data.get('mode', 'full')})")
    else:
        raise ValueError(f"{args.report}: neither an eval report nor a sweep table")
    write_manifest(out / "manifest.json", "plot", {"report": str(args.report)}, args.seed, paths, out)
    if not paths:
        print("nothing to plot: no finished run matched any head", file=sys.stderr)
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed recorded in the manifest")
    common.add_argument("--out", default=None, help=f"output location (default: ${OUT_ENV}/<command> or runs/)")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="mphpe", description="Multi-person head detection and pose estimation toolkit.")
    p.add_argument("--version", action="version", version=f"mphpe {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("build-synth", parents=[common], help="render a synthetic train/val benchmark")
    s.add_argument("--train", type=int, default=500, help="number of training images")
    s.add_argument("--val", type=int, default=100, help="number of validation images")
    s.set_defaults(func=cmd_build_synth)

    s = sub.add_parser("labelgen", parents=[common], help="build box/pose labels from a landmark scene file")
    s.add_argument("--scene", required=True, help="scene JSON (per image: camera and 68-landmark heads)")
    s.add_argument("--n", type=int, default=13, help="corner landmarks used for alignment (9..17, odd)")
    s.add_argument("--kappa", type=float, default=1.0, help="hemisphere radius factor")
    s.set_defaults(func=cmd_labelgen)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", parents=[common], help="train one model per grid setting")
    s.add_argument("--grid", required=True, help='JSON grid, e.g. {"loss.tau": [0.15, 0.4]}')
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("predict", parents=[common], help="run a checkpoint over an image directory")
    s.add_argument("--weights", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--gt", default=None, help="dataset whose file names supply the image ids")
    s.add_argument("--tau-iou", type=float, default=0.65)
    s.add_argument("--conf-floor", type=float, default=0.001)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--range", choices=("full", "narrow"), default="full")
    s.add_argument("--tau-conf", type=float, default=0.7)
    s.add_argument("--report", default=None, help="report path (default: next to --pred)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", parents=[common], help="plot an eval report or sweep table")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def _invalid_types():
    from .datamodel import DatasetError
    from .trainer import ConfigValidationError

    return (UsageError, DatasetError, ConfigValidationError, ValueError, FileNotFoundError)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e.usage or parser.format_usage(), file=sys.stderr, end="")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _invalid_types() as e:
        if isinstance(e, UsageError):
            print(e.usage or parser.format_usage(), file=sys.stderr, end="")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - mapped to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
