"""``rotcloud`` command line: data generation, pretraining, transfer, keypoints, plots.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command takes
``--config FILE`` (JSON, keys are the long flag names with underscores);
explicit flags override the file, and the merged settings are written to
``config.resolved.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

SEED_ENV = "ROTCLOUD_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# (flag, kwargs) per command; defaults live here so that the config file can
# sit between them and explicit flags
_COMMON = [
    ("--config", dict(help="JSON file with default flag values")),
    ("--seed", dict(type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)")),
    ("--threads", dict(type=int, default=1, help="worker threads (1 gives bit-reproducible output)")),
    ("--outdir", dict(help="where config.resolved.json goes (default: directory of --out)")),
]

COMMANDS = {
    "gen-data": ("generate the synthetic train/test dataset", [
        ("--out", dict(required=True, help="dataset directory")),
        ("--categories", dict(type=int, default=8)),
        ("--train", dict(type=int, default=200, help="training clouds per category")),
        ("--test", dict(type=int, default=50, help="test clouds per category")),
        ("--points", dict(type=int, default=1024)),
    ]),
    "pretrain": ("train a rotation-prediction model", [
        ("--task", dict(choices=["classify", "axisangle", "sixd"], default="classify")),
        ("--k", dict(type=int, default=18, help="number of directions (classify only)")),
        ("--data", dict(required=True)),
        ("--epochs", dict(type=int, default=20)),
        ("--batch-size", dict(type=int, default=32)),
        ("--lr", dict(type=float, default=1e-3)),
        ("--optimizer", dict(choices=["adam", "sgd"], default="adam")),
        ("--num-points", dict(type=int, default=256)),
        ("--holdout", dict(type=float, default=0.1)),
        ("--augment", dict(action="store_true", default=False)),
        ("--up", dict(type=_floats, default=[0.0, 1.0, 0.0], help="canonical up axis as x,y,z")),
        ("--out", dict(required=True, help="weights file")),
        ("--log", dict(help="training log CSV (default: <out>.log.csv)")),
    ]),
    "extract": ("write frozen global features of a split", [
        ("--model", dict(action="append", required=True,
                         help="weights file, or 'random' for a random-init encoder; repeat to concatenate")),
        ("--data", dict(required=True)),
        ("--split", dict(choices=["train", "test"], default="train")),
        ("--out", dict(required=True)),
    ]),
    "svm": ("fit a linear SVM on feature CSVs and report test accuracy", [
        ("--train", dict(required=True)),
        ("--test", dict(required=True)),
        ("--lambda", dict(type=float, default=1e-3, dest="lam")),
        ("--iters", dict(type=int, default=2000)),
        ("--out", dict(help="optional JSON report")),
    ]),
    "sweep": ("label-efficiency sweep over training fractions", [
        ("--train", dict(required=True)),
        ("--test", dict(required=True)),
        ("--fractions", dict(type=_floats, default=[0.01, 0.05, 0.1, 0.25, 0.5, 1.0])),
        ("--lambda", dict(type=float, default=1e-3, dest="lam")),
        ("--iters", dict(type=int, default=2000)),
        ("--out", dict(required=True)),
    ]),
    "keypoints": ("fine-tune a keypoint regressor", [
        ("--init", dict(default="random", help="pretext weights file, or 'random'")),
        ("--data", dict(required=True)),
        ("--epochs", dict(type=int, default=40)),
        ("--batch-size", dict(type=int, default=16)),
        ("--lr", dict(type=float, default=3e-4)),
        ("--num-points", dict(type=int, default=256)),
        ("--category", dict(default="cube", help="synthetic category, or 'all'")),
        ("--fraction", dict(type=float, default=1.0, help="share of training shapes used")),
        ("--out", dict(required=True)),
        ("--log", dict(help="training log CSV (default: <out>.log.csv)")),
    ]),
    "pck": ("PCK curve of a keypoint model on a split", [
        ("--model", dict(required=True)),
        ("--data", dict(required=True)),
        ("--split", dict(choices=["train", "test"], default="test")),
        ("--category", dict(default="cube")),
        ("--num-points", dict(type=int, default=256)),
        ("--thresholds", dict(type=_floats, default=None, help="default 0 to 0.2 in steps of 0.01")),
        ("--snap", dict(action="store_true", default=False)),
        ("--out", dict(required=True)),
    ]),
    "eval-rotation": ("held-out pretext score of a rotation model", [
        ("--model", dict(required=True)),
        ("--data", dict(required=True)),
        ("--split", dict(choices=["train", "test"], default="test")),
        ("--num-points", dict(type=int, default=256)),
        ("--eval-rotations", dict(type=int, default=4)),
        ("--up", dict(type=_floats, default=[0.0, 1.0, 0.0], help="canonical up axis as x,y,z")),
    ]),
    "dirs": ("export a direction set as CSV", [
        ("--k", dict(type=int, required=True)),
        ("--out", dict(required=True)),
    ]),
    "plot": ("render curve CSVs to SVG", [
        ("inputs", dict(nargs="+")),
        ("--kind", dict(choices=["pck", "sweep", "table1"], required=True)),
        ("--out", dict(required=True)),
    ]),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="rotcloud", description="Rotation-prediction pretraining for point clouds.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for flag, kw in _COMMON + flags:
            kw = dict(kw)
            kw.pop("required", None)
            kw["default"] = argparse.SUPPRESS
            if flag.startswith("--"):
                p.add_argument(flag, **kw)
            else:
                kw["nargs"] = "*"
                p.add_argument(flag, **kw)
    return parser


def _dest(flag: str, kw: dict) -> str:
    return kw.get("dest") or flag.lstrip("-").replace("-", "_")


def resolve(argv) -> dict:
    """Merge defaults < config file < explicit flags into one flat dict."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    flags = _COMMON + COMMANDS[command][1]
    known = {_dest(f, kw): (f, kw) for f, kw in flags}
    conf = {}
    if "config" in ns:
        try:
            with open(ns["config"]) as fh:
                conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns['config']}: {exc}") from exc
        if not isinstance(conf, dict):
            raise UsageError(f"config {ns['config']} must hold a JSON object")
        conf.pop("command", None)
        unknown = sorted(set(conf) - set(known) - {"config"})
        if unknown:
            raise UsageError(f"config {ns['config']}: unknown keys {', '.join(unknown)}")
    resolved = {"command": command}
    for dest, (flag, kw) in known.items():
        if dest == "config":
            continue
        if ns.get(dest) not in (None, []):
            resolved[dest] = ns[dest]
        elif dest in conf:
            resolved[dest] = conf[dest]
        elif kw.get("required") or not flag.startswith("--"):
            raise UsageError(f"rotcloud {command}: the following arguments are required: {flag}")
        else:
            resolved[dest] = kw.get("default")
    if resolved.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            resolved["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    if resolved["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return resolved


def _outdir(cfg: dict) -> Path:
    if cfg.get("outdir"):
        return Path(cfg["outdir"])
    out = cfg.get("out")
    if out is None:
        return Path(".")
    return Path(out) if cfg["command"] == "gen-data" else (Path(out).parent if str(Path(out).parent) else Path("."))


def _write_resolved(cfg: dict) -> None:
    d = _outdir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "config.resolved.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# commands


def _load_model(spec: str, seed: int):
    from . import encoder as enc
    from .pretrain import keyed_rng

    if spec == "random":
        return enc.init_model(enc.CLASSIFY, 18, keyed_rng(seed, 0))
    return enc.EncoderModel.load(spec)


def _log_path(cfg) -> str:
    return cfg["log"] or str(Path(cfg["out"]).with_suffix("")) + ".log.csv"


def cmd_gen_data(cfg):
    from .pcdata import gen_dataset

    ms = gen_dataset(cfg["out"], cfg["categories"], cfg["train"], cfg["test"], cfg["points"],
                     cfg["seed"], cfg["threads"])
    print(f"wrote {len(ms['train'])} train and {len(ms['test'])} test clouds to {cfg['out']}")


def cmd_pretrain(cfg):
    from .pcdata import load_split
    from .pretrain import TrainConfig, train_pretext

    tc = TrainConfig(task=cfg["task"], k=cfg["k"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                     lr=cfg["lr"], optimizer=cfg["optimizer"], seed=cfg["seed"], num_points=cfg["num_points"],
                     holdout=cfg["holdout"], threads=cfg["threads"], augment=cfg["augment"], up=cfg["up"])
    model, tlog = train_pretext(load_split(cfg["data"], "train"), tc)
    model.save(cfg["out"])
    tlog.write_csv(_log_path(cfg))
    if tlog.rows:
        print(f"{tlog.metric_name}={tlog.rows[-1][2]!r}")


def cmd_extract(cfg):
    from .downstream import concat_features, extract_dataset_features
    from .pcdata import load_split

    manifest = load_split(cfg["data"], cfg["split"])
    clouds = manifest.load_all(cfg["threads"])
    fm = None
    for spec in cfg["model"]:
        part = extract_dataset_features(_load_model(spec, cfg["seed"]), manifest, cfg["threads"], clouds)
        part.source = spec
        fm = part if fm is None else concat_features(fm, part)
    fm.write_csv(cfg["out"])
    print(f"wrote {len(fm)}x{fm.dim} features to {cfg['out']}")


def cmd_svm(cfg):
    from .downstream import FeatureMatrix, svm_accuracy

    acc = svm_accuracy(FeatureMatrix.read_csv(cfg["train"]), FeatureMatrix.read_csv(cfg["test"]),
                       cfg["lam"], cfg["iters"])
    if cfg.get("out"):
        with open(cfg["out"], "w") as fh:
            json.dump({"accuracy": acc}, fh)
            fh.write("\n")
    print(f"accuracy={acc!r}")


def cmd_sweep(cfg):
    from .downstream import FeatureMatrix, label_efficiency_sweep, write_curve

    curve = label_efficiency_sweep(FeatureMatrix.read_csv(cfg["train"]), FeatureMatrix.read_csv(cfg["test"]),
                                   cfg["fractions"], cfg["seed"], cfg["lam"], cfg["iters"])
    write_curve(cfg["out"], curve)
    for f, a in curve:
        print(f"fraction={f!r} accuracy={a!r}")


def _category(cfg):
    return None if cfg["category"] == "all" else cfg["category"]


def cmd_keypoints(cfg):
    from . import keypoint as kp
    from .pcdata import load_split

    kc = kp.KeypointConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
                           num_points=cfg["num_points"], threads=cfg["threads"], category=_category(cfg))
    clouds = kp.keypoint_clouds(load_split(cfg["data"], "train"), kc.category)
    clouds = [clouds[i] for i in kp.fraction_subset(len(clouds), cfg["fraction"], kc.seed)]
    init = None if cfg["init"] == "random" else _load_model(cfg["init"], cfg["seed"])
    model, tlog = kp.finetune_keypoints(init, clouds, kc)
    model.save(cfg["out"])
    tlog.write_csv(_log_path(cfg))
    if tlog.rows:
        print(f"chamfer={tlog.rows[-1][2]!r}")


def cmd_pck(cfg):
    from . import keypoint as kp
    from .encoder import EncoderModel
    from .pcdata import load_split

    model = EncoderModel.load(cfg["model"])
    kc = kp.KeypointConfig(seed=cfg["seed"], num_points=cfg["num_points"], threads=cfg["threads"],
                           category=_category(cfg), num_keypoints=model.k)
    thresholds = cfg["thresholds"] or kp.DEFAULT_THRESHOLDS
    curve = kp.evaluate_pck(model, load_split(cfg["data"], cfg["split"]), kc, thresholds, cfg["snap"])
    curve.write_csv(cfg["out"])
    print(f"wrote {len(curve.values)} thresholds to {cfg['out']}")


def cmd_eval_rotation(cfg):
    from .encoder import EncoderModel
    from .pcdata import load_split
    from .pretrain import TrainConfig, evaluate_pretext

    model = EncoderModel.load(cfg["model"])
    if model.head not in ("classify", "axisangle", "sixd"):
        raise ValueError(f"{cfg['model']} is a {model.head} model, not a rotation model")
    tc = TrainConfig(task=model.head, k=model.k, seed=cfg["seed"], num_points=cfg["num_points"],
                     eval_rotations=cfg["eval_rotations"], threads=cfg["threads"],
                     widths=model.widths, head_hidden=model.head_hidden, up=cfg["up"])
    score = evaluate_pretext(model, load_split(cfg["data"], cfg["split"]), tc)
    name = "accuracy" if model.head == "classify" else "geodesic_error"
    print(f"{name}={score!r}")


def cmd_dirs(cfg):
    from .dirset import build_direction_set, write_csv

    ds = build_direction_set(cfg["k"])
    write_csv(ds, cfg["out"])
    print(f"wrote {ds.k} {ds.scheme} directions to {cfg['out']}")


def cmd_plot(cfg):
    from .plot import plot

    plot(cfg["inputs"], cfg["kind"], cfg["out"])
    print(f"wrote {cfg['out']}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "svm": cmd_svm,
    "sweep": cmd_sweep,
    "keypoints": cmd_keypoints,
    "pck": cmd_pck,
    "eval-rotation": cmd_eval_rotation,
    "dirs": cmd_dirs,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _write_resolved(cfg)
        HANDLERS[cfg["command"]](cfg)
    except (OSError, ValueError, KeyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"rotcloud {cfg['command']}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
