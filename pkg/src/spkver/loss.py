"""Combined-margin softmax (additive angular + additive cosine margin) and margin schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigError
from .gradcore import Tensor


class CMSoftmaxHead:
    """Class-weight matrix W [num_classes, D] with scale ``s`` and margins ``m1`` (angle), ``m2`` (cosine)."""

    def __init__(self, weight, s: float = 32.0, m1: float = 0.0, m2: float = 0.0):
        self.W = weight if isinstance(weight, Tensor) else Tensor(np.asarray(weight), requires_grad=True)
        self.W.requires_grad = True
        self.s, self.m1, self.m2 = float(s), float(m1), float(m2)
        self.validate()

    @classmethod
    def init(cls, num_classes: int, dim: int, seed: int = 0, dtype=np.float64, **kw):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((num_classes, dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        return cls(Tensor(w.astype(dtype), requires_grad=True), **kw)

    def validate(self):
        if self.s <= 0:
            raise ConfigError(f"scale must be positive, got {self.s}")
        if not 0.0 <= self.m1 < math.pi / 2:
            raise ConfigError(f"m1 must lie in [0, pi/2), got {self.m1}")
        if not 0.0 <= self.m2 < 1.0:
            raise ConfigError(f"m2 must lie in [0, 1), got {self.m2}")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def set_margins(self, m1: float, m2: float):
        self.m1, self.m2 = float(m1), float(m2)
        self.validate()


def cosine_logits(f: Tensor, head: CMSoftmaxHead) -> Tensor:
    """cos(theta_j) for every sample/class pair, [N, num_classes]."""
    return gc.linear(gc.l2_normalize(f), gc.l2_normalize(head.W))


def margin_target(cos: np.ndarray, m1: float, m2: float, eps: float = 1e-12):
    """Target-class logit before scaling and its derivative w.r.t. cos(theta).

    cos(theta + m1) - m2 where theta + m1 <= pi, otherwise the linear
    continuation cos(theta) - m1 * sin(m1) - m2 which keeps the logit
    monotone in theta.
    """
    cos = np.clip(cos, -1.0, 1.0)
    sin = np.sqrt(np.maximum(1.0 - cos**2, eps))
    inside = np.arccos(cos) <= math.pi - m1
    shifted = cos * math.cos(m1) - sin * math.sin(m1)
    value = np.where(inside, shifted, cos - m1 * math.sin(m1)) - m2
    deriv = np.where(inside, math.cos(m1) + math.sin(m1) * cos / sin, 1.0)
    return value, deriv


def margin_logits(cos: Tensor, labels: np.ndarray, s: float, m1: float, m2: float) -> Tensor:
    rows = np.arange(cos.shape[0])
    tgt, dtgt = margin_target(cos.data[rows, labels], m1, m2)
    logits = s * cos.data
    logits[rows, labels] = s * tgt

    def backward(g):
        gcos = s * g
        gcos[rows, labels] = s * g[rows, labels] * dtgt
        return (gcos,)

    return gc.make_op(logits, (cos,), backward, "margin_logits")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the labelled class."""
    z = logits.data
    N = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(N)
    loss = np.mean(log_norm - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / N),)

    return gc.make_op(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")


def _check_labels(labels, num_classes) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def cm_softmax_loss(f: Tensor, labels, head: CMSoftmaxHead) -> Tensor:
    """Scalar mean loss; gradients reach ``f`` and ``head.W`` through the normalisations."""
    y = _check_labels(labels, head.num_classes)
    if f.data.ndim != 2 or f.shape[0] != len(y) or len(y) == 0:
        raise ValueError(f"embeddings {f.shape} do not match {len(y)} labels")
    cos = cosine_logits(f, head)
    return cross_entropy(margin_logits(cos, y, head.s, head.m1, head.m2), y)


@dataclass(frozen=True)
class MarginSchedule:
    kind: str = "linear"
    start_value: float = 0.0
    end_value: float = 0.0
    duration_iters: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "exponential", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.duration_iters < 1:
            raise ConfigError("duration_iters must be >= 1")
        if self.kind == "exponential" and self.start_value <= 0:
            raise ConfigError("exponential schedules need start_value > 0")

    @classmethod
    def constant(cls, value: float):
        return cls("constant", value, value, 1)


def margin_at(sched: MarginSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if sched.kind == "constant":
        return sched.start_value
    frac = min(iteration, sched.duration_iters) / sched.duration_iters
    if frac == 1.0:
        return sched.end_value
    if sched.kind == "linear":
        return sched.start_value + (sched.end_value - sched.start_value) * frac
    return sched.start_value * (sched.end_value / sched.start_value) ** frac
