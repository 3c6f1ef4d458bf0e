"""Prequential evaluation of adapters on test streams, reports, and the
standard synthetic benchmark recipe."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import model as M
from .baselines import Adapter, SourceAdapter, TbnAdapter, TbnDecentralizedAdapter, TentAdapter
from .clustering import purity
from .core import Checkpoint, Rng
from .freda import FredaAdapter, FredaConfig
from .stream import (
    CorruptionSpec,
    LabeledDataset,
    StreamEvent,
    batch,
    continual_stream,
    images_of,
    make_shapes_dataset,
    mixed_stream,
)

log = logging.getLogger(__name__)

METHODS = ("source", "tbn", "tbn-dec", "tent", "freda")
STANDARD_CORRUPTIONS = ("gaussian_noise", "gaussian_blur", "contrast", "pixelate")
SAMPLE_COLUMNS = ("index", "true_label", "predicted", "cluster", "domain", "entropy")


@dataclass
class RunConfig:
    method: str = "freda"
    freda: FredaConfig = field(default_factory=FredaConfig)
    scenario: str = "mixed"
    corruptions: tuple[str, ...] = STANDARD_CORRUPTIONS
    severity: int = 5
    length: int = 8000
    batch_size: int = 64
    seed: int = 0
    classes: int = 4
    image_size: int = 32
    tent_predict_before: bool = False

    def validate(self) -> "RunConfig":
        from .freda import ConfigError

        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.scenario not in ("mixed", "continual"):
            raise ConfigError("scenario", "must be 'mixed' or 'continual'")
        if not self.corruptions:
            raise ConfigError("corruptions", "at least one corruption required")
        try:
            CorruptionSpec.parse(list(self.corruptions), self.severity)
        except ValueError as exc:
            raise ConfigError("corruptions" if "severity" not in str(exc) else "severity", str(exc)) from exc
        if self.length < 0:
            raise ConfigError("length", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        self.freda.validate(self.classes)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruptions"] = list(self.corruptions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        freda = FredaConfig(**d.pop("freda", {}))
        if "corruptions" in d:
            d["corruptions"] = tuple(d["corruptions"])
        return cls(freda=freda, **d)

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunReport:
    run_id: str
    config: dict
    n_samples: int
    overall_error: float | None
    per_domain_error: dict[str, float]
    step_purity: list[float | None] = field(default_factory=list)
    step_selection_rate: list[float | None] = field(default_factory=list)
    step_loss: list[float | None] = field(default_factory=list)
    step_error: list[float] = field(default_factory=list)
    samples: list[dict] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def error_defined(self) -> bool:
        return self.overall_error is not None

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        d["error_defined"] = self.error_defined
        return d

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
        jpath.write_text(json.dumps(_jsonable(self.to_json()), indent=2, sort_keys=True))
        with cpath.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SAMPLE_COLUMNS)
            writer.writeheader()
            writer.writerows(self.samples)
        return jpath, cpath


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def run(
    adapter: Adapter,
    events: Iterable[StreamEvent],
    batch_size: int,
    *,
    domain_names: list[str] | None = None,
    config: dict | None = None,
    run_id: str = "adhoc",
) -> RunReport:
    """Feed the stream to ``adapter`` batch by batch and score every sample once.

    The adapter sees image arrays only; labels and domains are joined back
    after each step for scoring.
    """
    start = time.perf_counter()
    rows: list[dict] = []
    purities, rates, losses, step_err = [], [], [], []
    for chunk in batch(events, batch_size):
        preds = adapter.step(images_of(chunk))
        if len(preds) != len(chunk):
            raise RuntimeError(f"{adapter.name} returned {len(preds)} predictions for {len(chunk)} samples")
        probs = np.clip(preds.probs, 1e-300, 1.0)
        ent = -(preds.probs * np.log(probs)).sum(axis=1)
        domains = np.array([e.true_domain for e in chunk])
        wrong = 0
        for j, e in enumerate(chunk):
            p = int(preds.labels[j])
            wrong += p != e.true_label
            rows.append(
                {
                    "index": e.index,
                    "true_label": e.true_label,
                    "predicted": p,
                    "cluster": "" if preds.clusters is None else int(preds.clusters[j]),
                    "domain": e.true_domain,
                    "entropy": float(ent[j]),
                }
            )
        step_err.append(wrong / len(chunk))
        purities.append(purity(preds.clusters, domains) if preds.clusters is not None else None)
        rates.append(preds.info.get("selection_rate"))
        loss = preds.info.get("loss")
        if loss is None and preds.info.get("losses"):
            vals = [v for v in preds.info["losses"].values() if math.isfinite(v)]
            loss = float(np.mean(vals)) if vals else None
        losses.append(loss)

    names = domain_names or sorted({str(r["domain"]) for r in rows})
    if rows:
        wrong = np.array([r["predicted"] != r["true_label"] for r in rows])
        dom = np.array([r["domain"] for r in rows])
        overall = float(wrong.mean())
        per_domain = {names[d]: float(wrong[dom == d].mean()) for d in np.unique(dom)}
    else:
        overall, per_domain = None, {}
    return RunReport(
        run_id=run_id,
        config=config or {},
        n_samples=len(rows),
        overall_error=overall,
        per_domain_error=per_domain,
        step_purity=purities,
        step_selection_rate=rates,
        step_loss=losses,
        step_error=step_err,
        samples=rows,
        elapsed_seconds=time.perf_counter() - start,
    )


def make_adapter(cfg: RunConfig, checkpoint: Checkpoint) -> Adapter:
    root = Rng(cfg.seed)
    if cfg.method == "source":
        return SourceAdapter(checkpoint)
    if cfg.method == "tbn":
        return TbnAdapter(checkpoint)
    if cfg.method == "tbn-dec":
        return TbnDecentralizedAdapter(
            checkpoint,
            clusters=cfg.freda.clusters,
            kmeans_size=cfg.freda.kmeans_size,
            rng=root,
            log1p_features=cfg.freda.log1p_features,
        )
    if cfg.method == "tent":
        return TentAdapter(checkpoint, lr=cfg.freda.lr, predict_before_update=cfg.tent_predict_before)
    if cfg.method == "freda":
        return FredaAdapter(checkpoint, cfg.freda, rng=root)
    raise ValueError(cfg.method)


def make_stream(cfg: RunConfig, dataset: LabeledDataset):
    specs = CorruptionSpec.parse(list(cfg.corruptions), cfg.severity)
    rng = Rng(cfg.seed).child("stream")
    if cfg.scenario == "mixed":
        return mixed_stream(dataset, specs, cfg.length, rng), [str(s) for s in specs]
    per = cfg.length // len(specs)
    return continual_stream(dataset, specs, per, rng), [str(s) for s in specs]


def run_config(cfg: RunConfig, checkpoint: Checkpoint, test_set: LabeledDataset) -> RunReport:
    cfg.validate()
    events, names = make_stream(cfg, test_set)
    adapter = make_adapter(cfg, checkpoint)
    return run(adapter, events, cfg.batch_size, domain_names=names, config=cfg.to_dict(), run_id=cfg.run_id())


# ------------------------------------------------------------ standard recipe

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 250
PRETRAIN_EPOCHS = 30
PRETRAIN_LR = 0.05


def standard_datasets(classes: int = 4, size: int = 32, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    root = Rng(seed).child("data")
    train = make_shapes_dataset(TRAIN_PER_CLASS, classes, size, size, root.child("train"))
    test = make_shapes_dataset(TEST_PER_CLASS, classes, size, size, root.child("test"))
    return train, test


def standard_checkpoint(train: LabeledDataset, seed: int = 0, cache: str | Path | None = None) -> Checkpoint:
    """Pretrain the benchmark model, reusing ``cache`` if it already exists."""
    if cache is not None and Path(cache).exists():
        return Checkpoint.load(cache)
    ckpt = M.pretrain(train, PRETRAIN_EPOCHS, PRETRAIN_LR, Rng(seed).child("pretrain"))
    if cache is not None:
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(cache)
        ckpt = Checkpoint.load(cache)
    return ckpt


def summarize(reports: list[dict]) -> list[dict]:
    """Collapse report JSONs into ``method x corruption -> error`` rows.

    Rows are grouped by method and configuration (seed excluded); each domain
    column holds the mean over seeds, plus an overall ``mean`` column.
    """
    groups: dict[str, list[dict]] = {}
    for r in reports:
        for key in ("config", "overall_error", "per_domain_error"):
            if key not in r:
                raise ValueError(f"report schema mismatch: missing {key!r}")
        cfg = dict(r["config"])
        cfg.pop("seed", None)
        label = json.dumps(cfg, sort_keys=True)
        groups.setdefault(label, []).append(r)
    rows = []
    for label, rs in groups.items():
        cfg = json.loads(label)
        row = {"method": cfg.get("method", "?"), "seeds": ";".join(str(r["config"].get("seed")) for r in rs)}
        domains = sorted({d for r in rs for d in r["per_domain_error"]})
        for d in domains:
            vals = [r["per_domain_error"][d] for r in rs if d in r["per_domain_error"]]
            row[d] = float(np.mean(vals))
        overall = [r["overall_error"] for r in rs if r["overall_error"] is not None]
        row["mean"] = float(np.mean(overall)) if overall else None
        rows.append(row)
    return rows
