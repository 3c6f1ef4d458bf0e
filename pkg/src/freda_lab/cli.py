"""Command line entry points: gen-data, pretrain, run, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import harness as H
from . import model as M
from .core import Checkpoint, ContainerError, Rng
from .freda import ConfigError, FredaConfig
from .stream import LabeledDataset, make_shapes_dataset

log = logging.getLogger("freda_lab")

ABLATIONS = {"no-fd": "disable_fd", "no-fa": "disable_fa", "no-select": "disable_selection"}

# flag dest -> (section, key); section None means a top-level RunConfig field
RUN_FLAGS = {
    "method": (None, "method"),
    "clusters": ("freda", "clusters"),
    "kmeans_size": ("freda", "kmeans_size"),
    "comm_interval": ("freda", "comm_interval"),
    "alpha": ("freda", "alpha"),
    "sigma": ("freda", "sigma"),
    "lam": ("freda", "lam"),
    "h0": ("freda", "h0"),
    "eps": ("freda", "eps"),
    "lr": ("freda", "lr"),
    "batch_size": (None, "batch_size"),
    "scenario": (None, "scenario"),
    "severity": (None, "severity"),
    "length": (None, "length"),
    "seed": (None, "seed"),
}


def _dataset_paths(root: Path) -> tuple[Path, Path]:
    return root / "train.frda", root / "test.frda"


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(args.seed).child("data")
    train = make_shapes_dataset(args.train_per_class, args.classes, args.size, args.size, root.child("train"))
    test = make_shapes_dataset(args.test_per_class, args.classes, args.size, args.size, root.child("test"))
    train_path, test_path = _dataset_paths(out)
    train.save(train_path)
    test.save(test_path)
    print(json.dumps({"train": str(train_path), "test": str(test_path), "classes": args.classes,
                      "train_size": len(train.labels), "test_size": len(test.labels)}))
    return 0


def cmd_pretrain(args) -> int:
    train_path, test_path = _dataset_paths(Path(args.data))
    if not train_path.exists():
        print(f"error: training set not found: {train_path}", file=sys.stderr)
        return 2
    train = LabeledDataset.load(train_path)
    ckpt = M.pretrain(train, args.epochs, args.lr, Rng(_seed(args.seed)).child("pretrain"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out)
    params = M.checkpoint_params(Checkpoint.load(args.out))
    summary = {"checkpoint": str(args.out), "epochs": args.epochs, "lr": args.lr,
               "train_accuracy": M.accuracy(params, train)}
    if test_path.exists():
        test = LabeledDataset.load(test_path)
        summary["clean_accuracy"] = M.accuracy(params, test)
    print(json.dumps(summary))
    return 0


def _seed(flag_value):
    env = os.environ.get("FREDA_SEED")
    if env is None:
        return flag_value
    try:
        return int(env)
    except ValueError:
        raise ConfigError("seed", f"FREDA_SEED must be an integer, got {env!r}") from None


def build_run_config(args) -> H.RunConfig:
    """Defaults, then the JSON config file, then explicit flags, then FREDA_SEED."""
    top: dict = {}
    freda: dict = {}
    top_names = {f.name for f in dataclasses.fields(H.RunConfig)} - {"freda"}
    freda_names = {f.name for f in dataclasses.fields(FredaConfig)}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        nested = data.pop("freda", {})
        if not isinstance(nested, dict):
            raise ConfigError("freda", "must be an object")
        for key, value in {**data, **nested}.items():
            if key in freda_names:
                freda[key] = value
            elif key in top_names:
                top[key] = value
            else:
                raise ConfigError(key, "unknown configuration key")
    for dest, (section, key) in RUN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            (freda if section == "freda" else top)[key] = value
    if args.corruptions is not None:
        top["corruptions"] = [c.strip() for c in args.corruptions.split(",") if c.strip()]
    for name in args.ablate or []:
        freda[ABLATIONS[name]] = True
    if os.environ.get("FREDA_SEED") is not None:
        top["seed"] = _seed(None)
    try:
        cfg = H.RunConfig(freda=FredaConfig(**freda), **top)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
    cfg.corruptions = tuple(cfg.corruptions)
    return cfg


def cmd_run(args) -> int:
    ckpt_path = Path(args.checkpoint)
    _, test_path = _dataset_paths(Path(args.data))
    for p in (ckpt_path, test_path):
        if not p.exists():
            print(f"error: not found: {p}", file=sys.stderr)
            return 2
    ckpt = Checkpoint.load(ckpt_path)
    test = LabeledDataset.load(test_path)
    cfg = build_run_config(args)
    cfg.classes = ckpt.num_classes
    cfg.image_size = int(test.images.shape[-1])
    cfg.validate()
    report = H.run_config(cfg, ckpt, test)
    jpath, cpath = report.write(args.out)
    err = report.overall_error
    print(json.dumps({"run_id": report.run_id, "method": cfg.method, "overall_error": err,
                      "report": str(jpath), "samples": str(cpath)}))
    return 0


def cmd_report(args) -> int:
    reports = []
    for name in args.reports:
        path = Path(name)
        if not path.exists():
            print(f"error: report not found: {path}", file=sys.stderr)
            return 2
        try:
            reports.append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return 2
    try:
        rows = H.summarize(reports)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    columns = ["method", "seeds"]
    for row in rows:
        columns += [c for c in row if c not in columns and c != "mean"]
    columns.append("mean")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freda-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write clean train/test shape datasets")
    g.add_argument("--out", default="data")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--train-per-class", type=int, default=H.TRAIN_PER_CLASS)
    g.add_argument("--test-per-class", type=int, default=H.TEST_PER_CLASS)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the source model on the clean training set")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="data/source.frda")
    p.add_argument("--epochs", type=int, default=H.PRETRAIN_EPOCHS)
    p.add_argument("--lr", type=float, default=H.PRETRAIN_LR)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="adapt on a corrupted test stream and write a report")
    r.add_argument("--checkpoint", default="data/source.frda")
    r.add_argument("--data", default="data")
    r.add_argument("--out", default="runs/latest")
    r.add_argument("--config", help="JSON file with configuration keys")
    r.add_argument("--method", choices=H.METHODS)
    r.add_argument("--clusters", type=int)
    r.add_argument("--kmeans-size", type=int)
    r.add_argument("--comm-interval", type=int)
    r.add_argument("--alpha", type=float)
    r.add_argument("--sigma", type=float)
    r.add_argument("--lambda", dest="lam", type=float)
    r.add_argument("--h0", type=float)
    r.add_argument("--eps", type=float)
    r.add_argument("--lr", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--scenario", choices=("mixed", "continual"))
    r.add_argument("--corruptions", help="comma separated corruption names")
    r.add_argument("--severity", type=int)
    r.add_argument("--length", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="summarize run reports into a method x corruption CSV")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
