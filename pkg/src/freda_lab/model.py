"""Small BatchNorm CNN as a functional parameter map, with reverse-mode
gradients for the adaptable subset, SGD, pretraining and parameter averaging.

Parameters live in a plain ``dict[str, torch.Tensor]``; the forward pass is a
pure function of that map, so local models are just separate dicts.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Checkpoint, Rng
from .stream import LabeledDataset

log = logging.getLogger(__name__)

ARCH = "smallcnn-v1"
WIDTHS = (32, 64, 128)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

Params = dict[str, torch.Tensor]


class BnMode(str, enum.Enum):
    SOURCE_STATS = "source_stats"
    BATCH_STATS = "batch_stats"


def param_shapes(num_classes: int, in_channels: int = 3) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = in_channels
    for i, c in enumerate(WIDTHS, start=1):
        shapes[f"conv{i}.weight"] = (c, c_in, 3, 3)
        shapes[f"bn{i}.weight"] = (c,)
        shapes[f"bn{i}.bias"] = (c,)
        shapes[f"bn{i}.running_mean"] = (c,)
        shapes[f"bn{i}.running_var"] = (c,)
        c_in = c
    shapes["fc.weight"] = (num_classes, c_in)
    shapes["fc.bias"] = (num_classes,)
    return shapes


def bn_affine_names() -> list[str]:
    """Default adaptable set: every BatchNorm scale and shift."""
    return [f"bn{i}.{p}" for i in range(1, len(WIDTHS) + 1) for p in ("weight", "bias")]


def init_params(num_classes: int, rng: Rng, in_channels: int = 3) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(num_classes, in_channels).items():
        if name.endswith("running_var") or (name.startswith("bn") and name.endswith("weight")):
            params[name] = np.ones(shape)
        elif name.startswith("bn") or name == "fc.bias":
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return {k: v.astype(np.float32) for k, v in params.items()}


def check_params(params, num_classes: int, in_channels: int = 3) -> None:
    expected = param_shapes(num_classes, in_channels)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match {ARCH}: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {tuple(params[name].shape)} != {shape}")


def to_torch(params: dict[str, np.ndarray], dtype=torch.float32) -> Params:
    return {k: torch.as_tensor(np.asarray(v), dtype=dtype).clone() for k, v in params.items()}


def to_numpy(params: Params) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in params.items()}


def checkpoint_params(ckpt: Checkpoint, dtype=torch.float32) -> Params:
    if ckpt.arch != ARCH:
        raise ValueError(f"unsupported architecture {ckpt.arch!r}")
    check_params(ckpt.params, ckpt.num_classes)
    return to_torch(ckpt.params, dtype)


def as_batch(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    arr = np.asarray(x)
    if not (np.issubdtype(arr.dtype, np.number) or arr.dtype == bool):
        raise TypeError(f"expected a numeric image array, got dtype {arr.dtype}")
    return torch.tensor(arr, dtype=dtype)


def forward(params: Params, x: torch.Tensor, bn_mode: BnMode = BnMode.BATCH_STATS) -> torch.Tensor:
    """Logits for an ``(n, c, h, w)`` batch.

    In ``batch_stats`` mode each BatchNorm layer normalizes with the biased
    per-channel mean/variance of the current batch, and gradients flow through
    those statistics.
    """
    bn_mode = BnMode(bn_mode)
    if bn_mode is BnMode.BATCH_STATS and x.shape[0] < 2:
        raise ValueError("batch_stats mode needs at least 2 samples")
    h = x.contiguous(memory_format=torch.channels_last)
    for i in range(1, len(WIDTHS) + 1):
        h = F.conv2d(h, params[f"conv{i}.weight"], padding=1)
        if bn_mode is BnMode.BATCH_STATS:
            h = F.batch_norm(h, None, None, params[f"bn{i}.weight"], params[f"bn{i}.bias"], training=True, eps=BN_EPS)
        else:
            h = F.batch_norm(
                h,
                params[f"bn{i}.running_mean"],
                params[f"bn{i}.running_var"],
                params[f"bn{i}.weight"],
                params[f"bn{i}.bias"],
                training=False,
                eps=BN_EPS,
            )
        h = F.avg_pool2d(F.relu(h), 2)
    h = h.mean(dim=(2, 3))
    return F.linear(h, params["fc.weight"], params["fc.bias"])


def softmax_entropy(logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise softmax probabilities and Shannon entropy (nats)."""
    logp = torch.log_softmax(logits, dim=1)
    probs = logp.exp()
    return probs, -(probs * logp).sum(dim=1)


def soft_cross_entropy(targets: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-sample ``-sum_j targets_j * log softmax(logits)_j``."""
    return -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1)


@dataclass
class LossSpec:
    """What :func:`grad` differentiates.

    ``entropy``: mean of ``weights * H(y)`` over the batch.
    ``consistency``: mean cross-entropy between ``pseudo_labels`` and the
    predictions on ``augmented``.
    ``combined``: entropy plus ``lam`` times consistency. Without explicit
    ``pseudo_labels`` the detached probabilities of the entropy forward pass
    are used as targets.
    """

    kind: str = "entropy"
    weights: torch.Tensor | None = None
    pseudo_labels: torch.Tensor | None = None
    augmented: torch.Tensor | None = None
    lam: float = 0.5


def loss_value(params: Params, batch: torch.Tensor, bn_mode: BnMode, spec: LossSpec) -> torch.Tensor:
    if spec.kind not in ("entropy", "consistency", "combined"):
        raise ValueError(f"unknown loss kind {spec.kind!r}")
    loss = None
    probs = None
    if spec.kind in ("entropy", "combined"):
        probs, ent = softmax_entropy(forward(params, batch, bn_mode))
        if spec.weights is not None:
            ent = ent * spec.weights
        loss = ent.mean()
    if spec.kind == "consistency" or (spec.kind == "combined" and spec.lam != 0):
        targets = spec.pseudo_labels if spec.pseudo_labels is not None else probs
        if targets is None or spec.augmented is None:
            raise ValueError("consistency loss needs pseudo_labels and an augmented batch")
        con = soft_cross_entropy(targets.detach(), forward(params, spec.augmented, bn_mode)).mean()
        loss = con if loss is None else loss + spec.lam * con
    return loss


def grad(
    params: Params,
    batch: torch.Tensor,
    bn_mode: BnMode,
    loss_spec: LossSpec,
    adaptable: Sequence[str] | None = None,
) -> tuple[dict[str, torch.Tensor], float]:
    """Exact gradients of the loss w.r.t. the ``adaptable`` parameters.

    Returns ``(grads, loss)``. Raises ``FloatingPointError`` on a non-finite
    loss.
    """
    names = list(adaptable) if adaptable is not None else bn_affine_names()
    unknown = set(names) - set(params)
    if unknown:
        raise ValueError(f"adaptable names not in model: {sorted(unknown)}")
    leaves = {k: (v.detach().requires_grad_(True) if k in names else v.detach()) for k, v in params.items()}
    loss = loss_value(leaves, batch, bn_mode, loss_spec)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    gs = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    out = {n: (g if g is not None else torch.zeros_like(leaves[n])) for n, g in zip(names, gs)}
    return out, float(loss.detach())


def sgd_step(params: Params, grads: dict[str, torch.Tensor], lr: float) -> Params:
    """``p - lr * g`` for every name in ``grads``; other entries are shared, untouched."""
    out = dict(params)
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(params[name].shape)}")
        out[name] = (params[name] - lr * g).detach()
    return out


def weighted_average(checkpoints: Sequence[Params], weights: Sequence[float]) -> Params:
    """Elementwise ``sum_k w_k * theta_k`` over every parameter, stats included."""
    if len(checkpoints) == 0 or len(checkpoints) != len(weights):
        raise ValueError("need one weight per checkpoint")
    w = [float(x) for x in weights]
    if any(x < 0 or not math.isfinite(x) for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
        raise ValueError(f"weights must be non-negative and sum to 1, got {w}")
    names = list(checkpoints[0])
    for ck in checkpoints[1:]:
        if list(ck) != names and set(ck) != set(names):
            raise ValueError("parameter names differ between checkpoints")
        for n in names:
            if ck[n].shape != checkpoints[0][n].shape:
                raise ValueError(f"{n}: shape mismatch")
    out = {}
    for n in names:
        acc = checkpoints[0][n] * w[0]
        for ck, wk in zip(checkpoints[1:], w[1:]):
            acc = acc + ck[n] * wk
        out[n] = acc.detach()
    return out


@torch.no_grad()
def predict(params: Params, x, bn_mode: BnMode = BnMode.SOURCE_STATS, batch_size: int = 256) -> np.ndarray:
    """Predicted labels, evaluated in chunks (``source_stats`` is chunk-independent)."""
    x = as_batch(x, next(iter(params.values())).dtype)
    out = [forward(params, x[i : i + batch_size], bn_mode).argmax(1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def accuracy(params: Params, dataset: LabeledDataset, bn_mode: BnMode = BnMode.SOURCE_STATS) -> float:
    return float((predict(params, dataset.images, bn_mode) == dataset.labels).mean())


def pretrain(
    dataset: LabeledDataset,
    epochs: int,
    lr: float,
    rng: Rng,
    *,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> Checkpoint:
    """Supervised cross-entropy training on clean data.

    BatchNorm running statistics are accumulated with momentum 0.1 (unbiased
    running variance). Learning rate follows a cosine schedule.
    """
    c, h, w = dataset.images.shape[1:]
    params = to_torch(init_params(dataset.num_classes, rng.child("init"), c))
    trainable = [k for k in params if "running" not in k]
    velocity = {k: torch.zeros_like(params[k]) for k in trainable}
    x_all = as_batch(dataset.images)
    y_all = torch.from_numpy(dataset.labels)
    shuffle = rng.child("shuffle")
    steps = epochs * math.ceil(len(dataset) / batch_size)
    step = 0
    for epoch in range(epochs):
        order = torch.from_numpy(shuffle.permutation(len(dataset)))
        total = 0.0
        for i in range(0, len(dataset), batch_size):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                continue
            xb, yb = x_all[idx], y_all[idx]
            leaves = {k: (v.requires_grad_(True) if k in velocity else v) for k, v in params.items()}
            hcur = xb
            for j in range(1, len(WIDTHS) + 1):
                hcur = F.conv2d(hcur, leaves[f"conv{j}.weight"], padding=1)
                hcur = F.batch_norm(
                    hcur,
                    params[f"bn{j}.running_mean"],
                    params[f"bn{j}.running_var"],
                    leaves[f"bn{j}.weight"],
                    leaves[f"bn{j}.bias"],
                    training=True,
                    momentum=BN_MOMENTUM,
                    eps=BN_EPS,
                )
                hcur = F.avg_pool2d(F.relu(hcur), 2)
            logits = F.linear(hcur.mean(dim=(2, 3)), leaves["fc.weight"], leaves["fc.bias"])
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch}")
            gs = torch.autograd.grad(loss, [leaves[k] for k in trainable])
            cur_lr = 0.5 * lr * (1 + math.cos(math.pi * step / steps))
            with torch.no_grad():
                for k, g in zip(trainable, gs):
                    if weight_decay and not k.startswith("bn"):
                        g = g + weight_decay * params[k]
                    velocity[k].mul_(momentum).add_(g)
                    params[k] = (params[k] - cur_lr * velocity[k]).detach()
            total += float(loss.detach()) * len(idx)
            step += 1
        log.info("pretrain epoch %d loss %.4f", epoch + 1, total / len(dataset))
    return Checkpoint(arch=ARCH, num_classes=dataset.num_classes, params=to_numpy(params))
