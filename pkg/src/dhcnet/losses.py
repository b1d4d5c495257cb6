"""Training objectives: classification, hierarchical ordering, expansion, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .tensor import Tensor, as_tensor, maximum, mul, reduce, sqrt, sub, add


@dataclass
class LossWeights:
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.6

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name}={v} must be finite and non-negative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.alpha * factor, self.beta * factor, self.gamma * factor)


@dataclass
class LossReport:
    cls: float
    hor: float
    exp: float
    total: float
    confidences: List[float] = field(default_factory=list)
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"cls": self.cls, "hor": self.hor, "exp": self.exp, "total": self.total,
                "confidences": list(self.confidences)}


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes: {labels.tolist()}")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def pick(logprobs: Tensor, labels) -> Tensor:
    """Per-row log-probability of the labelled class (N)."""
    logprobs = as_tensor(logprobs)
    return reduce("sum", mul(logprobs, _one_hot(labels, logprobs.shape[-1])), 1)


def cls_loss(logprobs: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer labels."""
    return -reduce("mean", pick(logprobs, labels))


def soft_cls_loss(logprobs: Tensor, targets: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy against soft (e.g. mixed) targets."""
    logprobs = as_tensor(logprobs)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logprobs.shape:
        raise ValueError(f"target shape {targets.shape} != logprob shape {logprobs.shape}")
    return -reduce("mean", reduce("sum", mul(logprobs, targets), 1))


def confidence(logits, label: int) -> Tuple[float, float]:
    """Softmax probability of ``label`` and its log, computed through log-softmax."""
    z = as_tensor(logits)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    logc = float(nn.log_softmax(z).data[0, int(label)])
    return math.exp(logc), logc


def ordering_term(logc: Sequence[Tensor], mode: str = "hinge") -> Tensor:
    """Sum over i < j of pen(logC_i - logC_j), batch-averaged.

    ``logc`` lists per-sample log-confidences (each of shape N) in ascending
    depth. ``raw`` uses the difference itself, ``hinge`` clamps it at zero.
    """
    if mode not in ("hinge", "raw"):
        raise ValueError(f"ordering mode must be 'hinge' or 'raw', got {mode!r}")
    total = None
    for i in range(len(logc)):
        for j in range(i + 1, len(logc)):
            d = sub(logc[i], logc[j])
            if mode == "hinge":
                d = maximum(d, 0.0)
            total = d if total is None else add(total, d)
    if total is None:
        return Tensor(0.0)
    return reduce("mean", total)


def hor_loss(ordered_logits: Sequence[Tuple[Tensor, Sequence[int]]], mode: str = "hinge",
             with_ordering: bool = True) -> Tuple[Tensor, List[float]]:
    """Cross-entropy at every granularity plus the confidence-ordering penalty.

    Entries must be ordered by ascending granularity k (ascending depth).
    Returns the loss and the batch-mean confidence of each entry.
    """
    if not ordered_logits:
        raise ValueError("hor_loss needs at least one granularity")
    ce = None
    logcs = []
    confs = []
    for logits, labels in ordered_logits:
        lp = nn.log_softmax(logits)
        lc = pick(lp, labels)
        logcs.append(lc)
        confs.append(float(np.exp(lc.data).mean()))
        term = -reduce("mean", lc)
        ce = term if ce is None else add(ce, term)
    if with_ordering:
        ce = add(ce, ordering_term(logcs, mode))
    return ce, confs


def exp_loss(f_global: Tensor, f_local: Tensor) -> Tensor:
    """Sum over the four views of the L2 distance between pooled features.

    Accepts 4 x C x h x w, or N x 4 x C x h x w (averaged over N).
    """
    f_global, f_local = as_tensor(f_global), as_tensor(f_local)
    if f_global.shape != f_local.shape:
        raise ValueError(f"exp_loss shape mismatch: {f_global.shape} vs {f_local.shape}")
    single = f_global.ndim == 4
    if single:
        f_global = f_global.reshape((1,) + f_global.shape)
        f_local = f_local.reshape((1,) + f_local.shape)
    if f_global.ndim != 5:
        raise ValueError(f"exp_loss expects (N x) 4 x C x h x w, got {f_global.shape}")
    diff = sub(reduce("mean", f_global, (3, 4)), reduce("mean", f_local, (3, 4)))  # N x 4 x C
    norms = sqrt(reduce("sum", mul(diff, diff), 2))  # N x 4
    return reduce("mean", reduce("sum", norms, 1))


def total_loss(cls: Tensor, hor: Optional[Tensor], exp: Optional[Tensor],
               weights: LossWeights, confidences: Sequence[float] = ()) -> LossReport:
    """Weighted sum; a ``None`` component contributes nothing."""
    parts = {"cls": cls, "hor": hor, "exp": exp}
    for name, t in parts.items():
        if t is not None and not np.all(np.isfinite(as_tensor(t).data)):
            raise FloatingPointError(f"loss component {name!r} is not finite")
    total = mul(as_tensor(cls), weights.alpha)
    if hor is not None:
        total = add(total, mul(as_tensor(hor), weights.beta))
    if exp is not None:
        total = add(total, mul(as_tensor(exp), weights.gamma))
    val = lambda t: 0.0 if t is None else float(as_tensor(t).data)
    return LossReport(val(cls), val(hor), val(exp), float(total.data), list(confidences), total)
