"""Reference adapters: Source, TBN, decentralized TBN and TENT.

Every adapter consumes an image array only and returns one prediction per
input row, in input order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as M
from .clustering import ClusterState, FeatureRepository, kmeans_step
from .core import Checkpoint, Rng
from .spectral import high_freq_feature

log = logging.getLogger(__name__)


@dataclass
class Predictions:
    labels: np.ndarray
    probs: np.ndarray
    clusters: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def _emit(probs: torch.Tensor, clusters=None, **info) -> Predictions:
    p = probs.detach().to(torch.float64).numpy()
    return Predictions(p.argmax(axis=1), p, None if clusters is None else np.asarray(clusters), info)


@torch.no_grad()
def probs_for(params: M.Params, x: torch.Tensor) -> torch.Tensor:
    """Batch-stats softmax, falling back to source stats for a single sample."""
    mode = M.BnMode.BATCH_STATS if len(x) >= 2 else M.BnMode.SOURCE_STATS
    return torch.softmax(M.forward(params, x, mode), dim=1)


class Adapter:
    """Base class. Subclasses implement :meth:`step`."""

    name = "adapter"

    def __init__(self, checkpoint: Checkpoint, dtype=torch.float32):
        self.checkpoint = checkpoint
        self.dtype = dtype
        self.num_classes = checkpoint.num_classes
        self.params = M.checkpoint_params(checkpoint, dtype)

    def batch(self, images: np.ndarray) -> torch.Tensor:
        return M.as_batch(images, self.dtype)

    def step(self, images: np.ndarray) -> Predictions:  # pragma: no cover
        raise NotImplementedError


class SourceAdapter(Adapter):
    name = "source"

    @torch.no_grad()
    def step(self, images):
        x = self.batch(images)
        return _emit(torch.softmax(M.forward(self.params, x, M.BnMode.SOURCE_STATS), dim=1))


class TbnAdapter(Adapter):
    name = "tbn"

    def step(self, images):
        return _emit(probs_for(self.params, self.batch(images)))


class TbnDecentralizedAdapter(Adapter):
    """TBN with BatchNorm statistics computed per frequency cluster.

    ``oracle_domains`` may be set before a step to bypass K-means (used to
    measure the clustering quality bound); it is never set by the harness.
    """

    name = "tbn-dec"

    def __init__(self, checkpoint, *, clusters: int = 4, kmeans_size: int = 512, rng: Rng | None = None,
                 log1p_features: bool = True, dtype=torch.float32):
        super().__init__(checkpoint, dtype)
        self.k = clusters
        self.repo = FeatureRepository(kmeans_size)
        self.state: ClusterState | None = None
        self.rng = (rng or Rng(0)).child("kmeans-init")
        self.log1p = log1p_features
        self.oracle_domains: np.ndarray | None = None

    def cluster(self, images) -> np.ndarray:
        if self.oracle_domains is not None:
            labels, self.oracle_domains = np.asarray(self.oracle_domains), None
            return labels
        self.repo.push(high_freq_feature(np.asarray(images, dtype=np.float64), log1p=self.log1p))
        if len(self.repo) < self.k:
            return np.zeros(len(images), dtype=np.int64)
        self.state = kmeans_step(self.repo, self.k, self.state, self.rng)
        return self.state.labels

    @torch.no_grad()
    def step(self, images):
        x = self.batch(images)
        labels = self.cluster(images)
        probs = torch.empty(len(x), self.num_classes, dtype=self.dtype)
        global_probs = None
        for k in np.unique(labels):
            idx = np.flatnonzero(labels == k)
            if len(idx) >= 2:
                probs[idx] = torch.softmax(M.forward(self.params, x[idx], M.BnMode.BATCH_STATS), dim=1)
            else:
                if global_probs is None:
                    global_probs = probs_for(self.params, x)
                probs[idx] = global_probs[idx]
        return _emit(probs, labels)


class TentAdapter(Adapter):
    """Entropy minimization over BatchNorm affine parameters, one SGD step per batch."""

    name = "tent"

    def __init__(self, checkpoint, *, lr: float = 0.01, predict_before_update: bool = False, dtype=torch.float32):
        super().__init__(checkpoint, dtype)
        self.lr = lr
        self.predict_before_update = predict_before_update
        self.adaptable = M.bn_affine_names()

    def step(self, images):
        x = self.batch(images)
        before = probs_for(self.params, x) if self.predict_before_update else None
        mode = M.BnMode.BATCH_STATS if len(x) >= 2 else M.BnMode.SOURCE_STATS
        try:
            grads, loss = M.grad(self.params, x, mode, M.LossSpec("entropy"), self.adaptable)
        except FloatingPointError as exc:
            log.warning("tent: skipping update (%s)", exc)
            grads, loss = None, float("nan")
        if grads is not None:
            self.params = M.sgd_step(self.params, grads, self.lr)
        probs = before if before is not None else probs_for(self.params, x)
        return _emit(probs, loss=loss)
