"""Weighted-sum fusion, MLP classifier and label-smoothed cross-entropy."""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    log_softmax,
    matmul,
    mul,
    relu,
    scale,
    sum_all,
)
from .tse import glorot

LOG_FLOOR = 1e-12


@dataclass
class FusionParams:
    wv: Tensor  # (1, 5)
    wq: Tensor  # (1, n)

    def named(self, prefix="fusion"):
        return {f"{prefix}.wv": self.wv, f"{prefix}.wq": self.wq}


@dataclass
class ClassifierParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def n_answers(self):
        return self.w2.shape[1]

    def named(self, prefix="cls"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


@dataclass
class AnswerDistribution:
    logits: np.ndarray
    probs: np.ndarray


def init_fusion(n, dtype=np.float64):
    return FusionParams(
        Tensor(np.full((1, 5), 1.0 / 5, dtype=dtype), requires_grad=True),
        Tensor(np.full((1, n), 1.0 / n, dtype=dtype), requires_grad=True),
    )


def init_classifier(rng, d, n_answers, dtype=np.float64):
    if n_answers < 2:
        raise ValueError("classifier needs at least two answers")
    return ClassifierParams(
        Tensor(glorot(rng, d, d, dtype), requires_grad=True),
        Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        Tensor(glorot(rng, d, n_answers, dtype), requires_grad=True),
        Tensor(np.zeros(n_answers, dtype=dtype), requires_grad=True),
    )


def fuse(vout, qout, params, qmask=None):
    """Z = wv . V + wq . Q over row positions; pad rows of Q contribute 0.

    ``vout`` is (..., 5, d), ``qout`` is (..., n, d); Z is (..., 1, d).
    """
    if qmask is not None:
        keep = np.asarray(qmask, dtype=qout.data.dtype)[..., :, None]
        qout = mul(qout, Tensor(keep))
    return add(matmul(params.wv, vout), matmul(params.wq, qout))


def classifier_logits(z, params):
    hidden = relu(add(matmul(z, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(z, params):
    logits = classifier_logits(z, params).data
    logits = logits.reshape(logits.shape[:-2] + logits.shape[-1:])
    return AnswerDistribution(logits, softmax(logits))


def predict(probs):
    """Index of the largest probability; ties go to the lowest index."""
    if isinstance(probs, AnswerDistribution):
        probs = probs.probs
    return np.argmax(np.asarray(probs), axis=-1)


class LogGuard:
    """Counts probabilities clamped at LOG_FLOOR before taking logs."""

    def __init__(self):
        self.clamped = 0


log_guard = LogGuard()


def smoothing_targets(target, eps, k):
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing eps must be in [0, 1), got {eps}")
    target = np.asarray(target)
    if np.any(target < 0) or np.any(target >= k):
        raise ValueError(f"target index outside [0, {k})")
    q = np.full(target.shape + (k,), eps / k)
    np.put_along_axis(q, target[..., None], (1.0 - eps) + eps / k, axis=-1)
    return q


def smoothed_ce(probs, target, eps, k=None, guard=log_guard):
    """-sum_k q'(k) log p(k), with q' = (1-eps) onehot(target) + eps/K.

    Works on a single distribution or a batch (mean over the batch).
    """
    if isinstance(probs, AnswerDistribution):
        probs = probs.probs
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1] if k is None else k
    low = probs <= LOG_FLOOR
    if low.any():
        guard.clamped += int(low.sum())
    logp = np.log(np.maximum(probs, LOG_FLOOR))
    q = smoothing_targets(target, eps, k)
    return float(np.mean(-(q * logp).sum(axis=-1)))


def cross_entropy(probs, dist):
    """H(dist, probs) = -sum dist log probs."""
    return float(-(np.asarray(dist) * np.log(np.maximum(probs, LOG_FLOOR))).sum())


def smoothed_ce_decomposed(probs, target, eps):
    """(1-eps) H(q, p) + eps H(u, p): the second printed form."""
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    onehot = np.zeros(k)
    onehot[target] = 1.0
    return (1.0 - eps) * cross_entropy(probs, onehot) + eps * cross_entropy(probs, np.full(k, 1.0 / k))


def smoothed_ce_from_logits(logits, targets, eps):
    """Mean label-smoothed CE over a batch of logits (B, K), on the tape."""
    k = logits.shape[-1]
    q = smoothing_targets(targets, eps, k).astype(logits.data.dtype)
    lp = log_softmax(logits)
    return scale(sum_all(mul(lp, Tensor(q))), -1.0 / logits.shape[0])
