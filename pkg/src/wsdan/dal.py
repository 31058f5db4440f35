"""Multi-head attention and the cascaded dual-attention (DAL) stack.

Each DAL layer carries two streams, image features V (5 x d) and question
features Q (n x d). Both first run self-attention; then, depending on the
stack mode, each stream attends to the other stream's self-attended
features (guided attention). Every sublayer is wrapped as
``Norm(x + sublayer(x))`` and each stream ends with a ReLU feed-forward
block of inner width 4d.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    dropout,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)
from .tse import glorot

STACK_MODES = ("both", "image-guided-only", "question-guided-only")
SITES = ("v-self", "q-self", "v-guided", "q-guided")
LN_EPS = 1e-6


@dataclass
class MAParams:
    """Projections for one multi-head attention site.

    Head j uses columns ``j*d_h:(j+1)*d_h`` of wq, wk, wv, so the three
    d x d matrices hold the h per-head d x d_h projections side by side.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("wq", "wk", "wv", "wo")}


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    def named(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


@dataclass
class StreamParams:
    sa: MAParams
    ga: MAParams
    ffn: FFNParams
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams

    def named(self, prefix):
        out = {}
        out.update(self.sa.named(f"{prefix}.sa"))
        out.update(self.ga.named(f"{prefix}.ga"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        for k in ("norm1", "norm2", "norm3"):
            out.update(getattr(self, k).named(f"{prefix}.{k}"))
        return out


@dataclass
class DALParams:
    v: StreamParams
    q: StreamParams

    def named(self, prefix):
        return {**self.v.named(f"{prefix}.v"), **self.q.named(f"{prefix}.q")}


@dataclass
class StackConfig:
    layers: int = 2
    mode: str = "both"
    dropout: float = 0.0
    ffn: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("stack needs at least one DAL layer")
        if self.mode not in STACK_MODES:
            raise ValueError(f"unknown stack mode {self.mode!r}; expected one of {STACK_MODES}")


@dataclass
class DualFeatures:
    V: Tensor
    Q: Tensor
    qmask: np.ndarray = None

    def __post_init__(self):
        if self.V.shape[-1] != self.Q.shape[-1]:
            raise ShapeError(f"stream widths differ: V {self.V.shape}, Q {self.Q.shape}")
        if self.V.shape[-2] != 5:
            raise ShapeError(f"image stream must have 5 rows, got {self.V.shape}")


@dataclass
class AttentionMaps:
    """Softmax matrices keyed by (layer, site); each array is (..., h, m, p)."""

    maps: dict = field(default_factory=dict)

    def __len__(self):
        return sum(a.shape[-3] for a in self.maps.values())


def init_ma(rng, d, heads, dtype=np.float64):
    if d % heads:
        raise ValueError(f"d={d} is not divisible by h={heads}")
    return MAParams(*(Tensor(glorot(rng, d, d, dtype), requires_grad=True) for _ in range(4)), heads=heads)


def init_stream(rng, d, heads, dtype=np.float64):
    def norm():
        return NormParams(
            Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        )

    ffn = FFNParams(
        Tensor(glorot(rng, d, 4 * d, dtype), requires_grad=True),
        Tensor(np.zeros(4 * d, dtype=dtype), requires_grad=True),
        Tensor(glorot(rng, 4 * d, d, dtype), requires_grad=True),
        Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )
    return StreamParams(init_ma(rng, d, heads, dtype), init_ma(rng, d, heads, dtype), ffn, norm(), norm(), norm())


def init_dal(rng, d, heads, dtype=np.float64):
    return DALParams(init_stream(rng, d, heads, dtype), init_stream(rng, d, heads, dtype))


def _split_heads(x, heads):
    *lead, m, d = x.shape
    x = reshape(x, (*lead, m, heads, d // heads))
    k = len(lead)
    return transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x):
    *lead, h, m, dh = x.shape
    k = len(lead)
    x = transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(x, (*lead, m, h * dh))


def multi_head_attention(qin, kin, vin, params, keymask=None, with_weights=False):
    """MA(Qin, Kin, Vin) = [head_1; ...; head_h] Wo.

    ``keymask`` (True = attend) has shape (..., p). Inputs may carry any
    number of leading batch axes.
    """
    if kin.shape[-2] != vin.shape[-2]:
        raise ShapeError(f"keys {kin.shape} and values {vin.shape} have different row counts")
    d = params.wq.shape[0]
    for x in (qin, kin, vin):
        if x.shape[-1] != d:
            raise ShapeError(f"input width {x.shape[-1]} does not match projection width {d}")
    heads = params.heads
    q = _split_heads(matmul(qin, params.wq), heads)
    k = _split_heads(matmul(kin, params.wk), heads)
    v = _split_heads(matmul(vin, params.wv), heads)
    nd = k.data.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(d // heads))
    mask = None
    if keymask is not None:
        keymask = np.asarray(keymask, dtype=bool)
        mask = keymask[..., None, None, :]
    weights = softmax_rows(scores, mask)
    out = matmul(_merge_heads(matmul(weights, v)), params.wo)
    return (out, weights) if with_weights else out


def self_attention(x, params, mask=None, with_weights=False):
    return multi_head_attention(x, x, x, params, mask, with_weights)


def guided_attention(x, y, params, ymask=None, with_weights=False):
    return multi_head_attention(x, y, y, params, ymask, with_weights)


def _sublayer(x, delta, norm, rate, rng):
    return layer_norm(add(x, dropout(delta, rate, rng)), norm.gain, norm.bias, LN_EPS)


def _ffn(x, p):
    return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2)


def dal_forward(feats, params, config, rng=None, maps=None, layer=0):
    """One DAL layer; returns new DualFeatures with unchanged shapes.

    ``rng`` drives dropout; ``maps`` (an AttentionMaps) collects weights.
    """
    V, Q, qmask = feats.V, feats.Q, feats.qmask
    rate = config.dropout
    pv, pq = params.v, params.q

    sa_v, w = self_attention(V, pv.sa, None, with_weights=True)
    if maps is not None:
        maps.maps[(layer, "v-self")] = w.data
    sa_q, w = self_attention(Q, pq.sa, qmask, with_weights=True)
    if maps is not None:
        maps.maps[(layer, "q-self")] = w.data
    V = _sublayer(V, sa_v, pv.norm1, rate, rng)
    Q = _sublayer(Q, sa_q, pq.norm1, rate, rng)

    v_guided = config.mode in ("both", "question-guided-only")
    q_guided = config.mode in ("both", "image-guided-only")
    Vg, Qg = V, Q
    if v_guided:
        ga, w = guided_attention(V, Q, pv.ga, qmask, with_weights=True)
        if maps is not None:
            maps.maps[(layer, "v-guided")] = w.data
        Vg = _sublayer(V, ga, pv.norm2, rate, rng)
    if q_guided:
        ga, w = guided_attention(Q, V, pq.ga, None, with_weights=True)
        if maps is not None:
            maps.maps[(layer, "q-guided")] = w.data
        Qg = _sublayer(Q, ga, pq.norm2, rate, rng)

    if config.ffn:
        Vg = _sublayer(Vg, _ffn(Vg, pv.ffn), pv.norm3, rate, rng)
        Qg = _sublayer(Qg, _ffn(Qg, pq.ffn), pq.norm3, rate, rng)
    return DualFeatures(Vg, Qg, qmask)


def stack_forward(feats, layers, config, rng=None):
    """Fold ``dal_forward`` over the layer parameters.

    Returns (output features, AttentionMaps).
    """
    if len(layers) != config.layers:
        raise ValueError(f"config expects {config.layers} layers, got {len(layers)} parameter sets")
    maps = AttentionMaps()
    for i, params in enumerate(layers):
        feats = dal_forward(feats, params, config, rng, maps, layer=i)
    return feats, maps
