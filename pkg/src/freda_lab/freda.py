"""Frequency-based decentralized adaptation.

Per batch: extract high-frequency amplitude features, update the warm-started
K-means, route samples to per-cluster local models, select reliable pool
samples, train each local model on entropy plus an amplitude-augmentation
consistency term, emit predictions in input order, and every ``comm_interval``
steps replace all local models by their size-weighted average.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import model as M
from .baselines import Adapter, Predictions, probs_for
from .clustering import ClusterState, FeatureRepository, kmeans_step
from .core import Checkpoint, Rng
from .spectral import augment, high_freq_feature

log = logging.getLogger(__name__)

YBAR_MOMENTUM = 0.1


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class FredaConfig:
    clusters: int = 4
    kmeans_size: int = 512
    comm_interval: int = 10
    alpha: float = 0.1
    sigma: float = 1.0
    lam: float = 0.5
    h0: float | None = None  # None -> 0.4 * ln(C)
    eps: float = 0.6
    lr: float = 0.01
    disable_fd: bool = False
    disable_fa: bool = False
    disable_selection: bool = False
    centered_cosine: bool = False
    per_channel_delta: bool = False
    log1p_features: bool = True

    def resolved_h0(self, num_classes: int) -> float:
        return 0.4 * math.log(num_classes) if self.h0 is None else self.h0

    def validate(self, num_classes: int | None = None) -> "FredaConfig":
        if self.clusters < 1:
            raise ConfigError("clusters", "must be >= 1")
        if self.kmeans_size < self.clusters:
            raise ConfigError("kmeans_size", "must be >= clusters")
        if self.comm_interval < 1:
            raise ConfigError("comm_interval", "must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if self.sigma <= 0:
            raise ConfigError("sigma", "must be > 0")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")
        if not 0 < self.eps <= 1:
            raise ConfigError("eps", "must be in (0, 1]")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if num_classes is not None:
            h0 = self.resolved_h0(num_classes)
            if not 0 < h0 <= math.log(num_classes) + 1e-12:
                raise ConfigError("h0", f"must be in (0, ln C = {math.log(num_classes):.4f}]")
        return self

    @property
    def effective_clusters(self) -> int:
        return 1 if self.disable_fd else self.clusters

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LocalBranch:
    params: M.Params
    ybar: np.ndarray
    rng: Rng
    pool: np.ndarray | None = None  # (m, c, h, w), oldest first
    seen: int = 0  # samples routed here since the last aggregation
    last_loss: float = float("nan")
    history: list = field(default_factory=list)

    def push(self, images: np.ndarray, capacity: int) -> None:
        self.pool = images if self.pool is None else np.concatenate([self.pool, images])
        self.pool = self.pool[-capacity:]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def select_samples(
    probs: np.ndarray,
    ybar: np.ndarray,
    h0: float,
    eps: float,
    *,
    centered: bool = False,
    momentum: float = YBAR_MOMENTUM,
) -> tuple[np.ndarray, np.ndarray]:
    """Keep samples with entropy below ``h0`` and ``|cos(y, ybar)| < eps``.

    Samples are tested in order; ``ybar`` moves towards every kept sample by
    an EMA with the given momentum before the next test. Returns the boolean
    mask and the updated ``ybar``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    ybar = np.asarray(ybar, dtype=np.float64).copy()
    uniform = 1.0 / probs.shape[1]
    keep = np.zeros(len(probs), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=1)
    for i, y in enumerate(probs):
        if not ent[i] < h0:
            continue
        cos = _cosine(y - uniform, ybar - uniform) if centered else _cosine(y, ybar)
        if abs(cos) < eps:
            keep[i] = True
            ybar = (1 - momentum) * ybar + momentum * y
    return keep, ybar


class FredaAdapter(Adapter):
    name = "freda"

    def __init__(self, checkpoint: Checkpoint, config: FredaConfig | None = None, rng: Rng | None = None,
                 dtype=torch.float32):
        super().__init__(checkpoint, dtype)
        self.config = (config or FredaConfig()).validate(checkpoint.num_classes)
        self.rng = rng or Rng(0)
        self.k = self.config.effective_clusters
        self.h0 = self.config.resolved_h0(self.num_classes)
        self.adaptable = M.bn_affine_names()
        self.repo = FeatureRepository(self.config.kmeans_size)
        self.cluster_state: ClusterState | None = None
        self.kmeans_rng = self.rng.child("kmeans-init")
        uniform = np.full(self.num_classes, 1.0 / self.num_classes)
        self.branches = [
            LocalBranch(dict(self.params), uniform.copy(), self.rng.child(f"augment:cluster-{k}"))
            for k in range(self.k)
        ]
        self.t = 0
        self.aggregations = 0

    # -- step 1-2
    def cluster(self, images: np.ndarray) -> np.ndarray:
        if self.k == 1:
            return np.zeros(len(images), dtype=np.int64)
        feats = high_freq_feature(np.asarray(images, dtype=np.float64), log1p=self.config.log1p_features)
        self.repo.push(feats)
        if len(self.repo) < self.k:
            return np.zeros(len(images), dtype=np.int64)
        self.cluster_state = kmeans_step(self.repo, self.k, self.cluster_state, self.kmeans_rng)
        return self.cluster_state.labels

    # -- step 3
    def local_train(self, branch: LocalBranch, selected: np.ndarray) -> float:
        """One SGD step on entropy + lam * consistency over ``selected`` images."""
        cfg = self.config
        x = self.batch(selected)
        mode = M.BnMode.BATCH_STATS if len(x) >= 2 else M.BnMode.SOURCE_STATS
        if cfg.disable_fa or cfg.lam == 0:
            spec = M.LossSpec("entropy")
        else:
            aug = augment(selected.astype(np.float64), cfg.alpha, cfg.sigma, branch.rng,
                          per_channel=cfg.per_channel_delta)
            spec = M.LossSpec("combined", augmented=self.batch(aug), lam=cfg.lam)
        try:
            grads, loss = M.grad(branch.params, x, mode, spec, self.adaptable)
        except FloatingPointError as exc:
            log.warning("branch update skipped, parameters kept: %s", exc)
            return float("nan")
        branch.params = M.sgd_step(branch.params, grads, cfg.lr)
        return loss

    def _branch_step(self, branch: LocalBranch, current: np.ndarray, capacity: int):
        cfg = self.config
        branch.push(current, capacity)
        branch.seen += len(current)
        pool = branch.pool
        if cfg.disable_selection:
            mask = np.ones(len(pool), dtype=bool)
        else:
            probs = probs_for(branch.params, self.batch(pool)).to(torch.float64).numpy()
            mask, branch.ybar = select_samples(probs, branch.ybar, self.h0, cfg.eps, centered=cfg.centered_cosine)
        loss = self.local_train(branch, pool[mask]) if mask.any() else float("nan")
        branch.last_loss = loss
        out = probs_for(branch.params, self.batch(pool))[len(pool) - len(current):]
        return out, int(mask.sum()), len(pool), loss

    # -- step 5
    def aggregate(self) -> bool:
        counts = np.array([b.seen for b in self.branches], dtype=np.float64)
        total = counts.sum()
        if total == 0:
            return False
        weights = counts / total
        base = M.weighted_average([b.params for b in self.branches], weights.tolist())
        for b in self.branches:
            b.params = dict(base)
            b.seen = 0
        self.aggregations += 1
        return True

    def step(self, images) -> Predictions:
        images = np.asarray(images, dtype=np.float32)
        n = len(images)
        self.t += 1
        labels = self.cluster(images)
        probs = torch.empty(n, self.num_classes, dtype=self.dtype)
        selected = pooled = 0
        losses = {}
        for k, branch in enumerate(self.branches):
            idx = np.flatnonzero(labels == k)
            if len(idx) == 0:
                continue
            out, n_sel, n_pool, loss = self._branch_step(branch, images[idx], capacity=n)
            probs[idx] = out
            selected += n_sel
            pooled += n_pool
            losses[k] = loss
        assert len(self.repo) <= self.config.kmeans_size
        assert all(b.pool is None or len(b.pool) <= n for b in self.branches)
        aggregated = self.t % self.config.comm_interval == 0 and self.aggregate()
        return Predictions(
            probs.argmax(1).numpy(),
            probs.to(torch.float64).numpy(),
            labels.copy(),
            {
                "selected": selected,
                "pooled": pooled,
                "selection_rate": selected / pooled if pooled else 0.0,
                "losses": losses,
                "aggregated": bool(aggregated),
            },
        )
