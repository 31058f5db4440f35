"""Transformer-with-sentence-embedding question encoder.

Word embeddings attend to each other single-head; a sentence vector adds a
second term to the attention logits. Two logit forms are available:

``verbatim``
    word term + (S Uq)(S Uk)^T / sqrt(2d). The added term is one scalar per
    question, so the row softmax removes it and the output equals plain
    word self-attention.
``sentence-key``
    word term + (S Uq)(q_j Uk)^T / sqrt(2d). The sentence query meets each
    word's key, so the term varies across key positions and survives the
    softmax. This is the default.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    embedding,
    matmul,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

MODES = ("verbatim", "sentence-key")


@dataclass
class TSEParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    uq: Tensor
    uk: Tensor

    def named(self, prefix="tse"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("wq", "wk", "wv", "uq", "uk")}


def glorot(rng, fan_in, fan_out, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_tse(rng, d, dtype=np.float64):
    return TSEParams(*(Tensor(glorot(rng, d, d, dtype), requires_grad=True) for _ in range(5)))


def embed_words(ids, table):
    """Row i of the result is ``table[ids[i]]``; works on (n,) or (B, n) ids."""
    return embedding(table, ids)


def _swap_last(x):
    axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return transpose(x, axes)


def _as_rows(s):
    # (..., d) sentence vector -> (..., 1, d) row matrix
    return reshape(s, s.shape[:-1] + (1, s.shape[-1]))


def word_logits(qhat, params):
    d = qhat.shape[-1]
    q = matmul(qhat, params.wq)
    k = matmul(qhat, params.wk)
    return scale(matmul(q, _swap_last(k)), 1.0 / math.sqrt(2 * d))


def sentence_term(qhat, s, params, mode):
    """The sentence contribution to the logits, broadcastable to (..., n, n).

    verbatim returns shape (..., 1, 1); sentence-key returns (..., 1, n).
    """
    d = qhat.shape[-1]
    sq = matmul(_as_rows(s), params.uq)
    if mode == "verbatim":
        sk = matmul(_as_rows(s), params.uk)
    elif mode == "sentence-key":
        sk = matmul(qhat, params.uk)
    else:
        raise ValueError(f"unknown TSE mode {mode!r}; expected one of {MODES}")
    return scale(matmul(sq, _swap_last(sk)), 1.0 / math.sqrt(2 * d))


def tse_logits(qhat, s, params, mode="sentence-key"):
    """Full n x n logit matrix alpha (word term plus sentence term)."""
    return add(word_logits(qhat, params), sentence_term(qhat, s, params, mode))


def tse_attention(qhat, s, params, mode="sentence-key", mask=None):
    """Return (Q, attention weights)."""
    keymask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        keymask = mask[..., None, :]
    word = word_logits(qhat, params)
    if s is None:
        a = softmax_rows(word, keymask)
    elif mode == "verbatim":
        # a per-question scalar: fed as a row shift, which softmax ignores
        a = softmax_rows(word, keymask, shift=sentence_term(qhat, s, params, mode))
    else:
        a = softmax_rows(add(word, sentence_term(qhat, s, params, mode)), keymask)
    return matmul(a, matmul(qhat, params.wv)), a


def tse_forward(qhat, s, params, mode="sentence-key", mask=None):
    """Double-embedding question features Q (same shape as ``qhat``).

    Passing ``s=None`` gives word-only attention.
    """
    return tse_attention(qhat, s, params, mode, mask)[0]
