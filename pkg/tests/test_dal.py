import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsdan.autodiff import ShapeError, Tape, Tensor, mul, sum_all
from wsdan.dal import (
    LN_EPS,
    SITES,
    STACK_MODES,
    DualFeatures,
    MAParams,
    StackConfig,
    dal_forward,
    guided_attention,
    init_dal,
    init_ma,
    multi_head_attention,
    self_attention,
    stack_forward,
)


def loop_attention(qin, kin, vin, wq, wk, wv, mask=None):
    m, p = qin.shape[0], kin.shape[0]
    q, k, v = qin @ wq, kin @ wk, vin @ wv
    dk = q.shape[1]
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        scores = []
        for j in range(p):
            if mask is not None and not mask[j]:
                scores.append(None)
                continue
            scores.append(sum(q[i, t] * k[j, t] for t in range(dk)) / math.sqrt(dk))
        top = max(s for s in scores if s is not None)
        weights = [0.0 if s is None else math.exp(s - top) for s in scores]
        total = sum(weights)
        for j in range(p):
            out[i] += weights[j] / total * v[j]
    return out


def identity_params(d, heads=1):
    return MAParams(*(Tensor(np.eye(d)) for _ in range(4)), heads=heads)


def test_identity_single_head_is_plain_attention(rng):
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    out = multi_head_attention(Tensor(x), Tensor(y), Tensor(y), identity_params(4)).data
    s = x @ y.T / 2.0
    e = np.exp(s - s.max(axis=1, keepdims=True))
    np.testing.assert_allclose(out, (e / e.sum(axis=1, keepdims=True)) @ y, atol=1e-14)


def test_single_key_ignores_queries(rng):
    p = init_ma(rng, 6, 2)
    y = Tensor(rng.standard_normal((1, 6)))
    out = multi_head_attention(Tensor(rng.standard_normal((4, 6))), y, y, p).data
    expected = y.data @ p.wv.data @ p.wo.data
    np.testing.assert_allclose(out, np.repeat(expected, 4, axis=0), atol=1e-14)


def test_random_instance_against_loop_oracle(rng):
    p = init_ma(rng, 4, 1)
    p.wo = Tensor(np.eye(4))
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    got = multi_head_attention(Tensor(x), Tensor(y), Tensor(y), p).data
    np.testing.assert_allclose(got, loop_attention(x, y, y, p.wq.data, p.wk.data, p.wv.data), atol=1e-10)


def test_multi_head_against_loop_oracle(rng):
    d, h = 6, 3
    p = init_ma(rng, d, h)
    x, y = rng.standard_normal((4, d)), rng.standard_normal((5, d))
    mask = np.array([True, False, True, True, False])
    heads = []
    for j in range(h):
        cols = slice(j * d // h, (j + 1) * d // h)
        heads.append(loop_attention(x, y, y, p.wq.data[:, cols], p.wk.data[:, cols], p.wv.data[:, cols], mask))
    expected = np.concatenate(heads, axis=1) @ p.wo.data
    got = multi_head_attention(Tensor(x), Tensor(y), Tensor(y), p, keymask=mask).data
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_shape_errors(rng):
    p = init_ma(rng, 4, 2)
    with pytest.raises(ShapeError):
        multi_head_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), p)
    with pytest.raises(ShapeError):
        multi_head_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), Tensor(np.ones((3, 3))), p)


def test_heads_must_divide(rng):
    with pytest.raises(ValueError):
        init_ma(rng, 6, 4)


def test_self_attention_single_row(rng):
    p = init_ma(rng, 4, 2)
    x = Tensor(rng.standard_normal((1, 4)))
    np.testing.assert_allclose(self_attention(x, p).data, x.data @ p.wv.data @ p.wo.data, atol=1e-14)


def test_self_attention_is_definitional(rng):
    p = init_ma(rng, 4, 2)
    x = Tensor(rng.standard_normal((5, 4)))
    mask = np.array([True, True, False, True, True])
    assert np.array_equal(self_attention(x, p, mask).data, multi_head_attention(x, x, x, p, mask).data)


def test_guided_single_unmasked_key(rng):
    p = init_ma(rng, 4, 2)
    out = guided_attention(Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 4))), p,
                           np.array([False, True, False])).data
    assert np.ptp(out, axis=0).max() < 1e-14


def test_guided_shape(rng):
    p = init_ma(rng, 8, 2)
    out = guided_attention(Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((7, 8))), p)
    assert out.shape == (5, 8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 6), p=st.integers(1, 7), heads=st.sampled_from([1, 2, 4]))
def test_permutation_properties(seed, m, p, heads):
    rng = np.random.default_rng(seed)
    d = 8
    params = init_ma(rng, d, heads)
    x, y = rng.standard_normal((m, d)), rng.standard_normal((p, d))
    mask = rng.random(p) > 0.3
    mask[rng.integers(p)] = True
    base, w = multi_head_attention(Tensor(x), Tensor(y), Tensor(y), params, mask, with_weights=True)
    sums = w.data.sum(axis=-1)
    assert np.all(np.abs(sums - 1.0) < 1e-9)
    kp = rng.permutation(p)
    kv = multi_head_attention(Tensor(x), Tensor(y[kp]), Tensor(y[kp]), params, mask[kp]).data
    assert np.max(np.abs(kv - base.data)) < 1e-10
    qp = rng.permutation(m)
    qq = multi_head_attention(Tensor(x[qp]), Tensor(y), Tensor(y), params, mask).data
    assert np.max(np.abs(qq - base.data[qp])) < 1e-10


def _features(rng, d=8, n=4, real=3):
    mask = np.zeros(n, dtype=bool)
    mask[:real] = True
    return DualFeatures(Tensor(rng.standard_normal((5, d))), Tensor(rng.standard_normal((n, d))), mask)


def _zero_layer(d, heads=2):
    p = init_dal(np.random.default_rng(0), d, heads)
    for name, t in p.named("x").items():
        t.data = np.ones_like(t.data) if name.endswith("gain") else np.zeros_like(t.data)
    return p


def _hand_norm(row, eps=LN_EPS):
    mean = sum(row) / len(row)
    var = sum((v - mean) ** 2 for v in row) / len(row)
    return [(v - mean) / math.sqrt(var + eps) for v in row]


def test_zero_weight_trace():
    # every sublayer contributes 0, so each stream is renormalized once per sublayer
    d = 4
    V = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, -1.0], [2.0, 2.0, 2.0, 3.0],
                  [-1.0, 5.0, 0.5, 0.0], [1.0, -1.0, 1.0, -1.0]])
    Q = np.array([[3.0, 1.0, 0.0, 0.0], [1.0, 1.0, 2.0, 2.0]])
    feats = DualFeatures(Tensor(V), Tensor(Q), np.array([True, True]))
    out = dal_forward(feats, _zero_layer(d), StackConfig(layers=1))
    for src, got in ((V, out.V.data), (Q, out.Q.data)):
        for r in range(src.shape[0]):
            expected = _hand_norm(_hand_norm(_hand_norm(list(src[r]))))
            np.testing.assert_allclose(got[r], expected, atol=1e-12)
    # without FFN sublayers one normalization fewer
    out = dal_forward(feats, _zero_layer(d), StackConfig(layers=1, ffn=False))
    np.testing.assert_allclose(out.V.data[0], _hand_norm(_hand_norm([1.0, 2.0, 3.0, 4.0])), atol=1e-12)


@pytest.mark.parametrize("mode", STACK_MODES)
def test_shapes_preserved(rng, mode):
    feats = _features(rng)
    layers = [init_dal(rng, 8, 2) for _ in range(3)]
    out, _ = stack_forward(feats, layers, StackConfig(layers=3, mode=mode))
    assert out.V.shape == (5, 8)
    assert out.Q.shape == (4, 8)


def test_single_guided_modes_skip_one_site(rng):
    feats = _features(rng)
    layers = [init_dal(rng, 8, 2)]
    _, maps = stack_forward(feats, layers, StackConfig(layers=1, mode="question-guided-only"))
    assert set(site for _, site in maps.maps) == {"v-self", "q-self", "v-guided"}
    _, maps = stack_forward(feats, layers, StackConfig(layers=1, mode="image-guided-only"))
    assert set(site for _, site in maps.maps) == {"v-self", "q-self", "q-guided"}


def test_single_guided_stream_without_guided_sublayer(rng):
    feats = _features(rng)
    p = init_dal(rng, 8, 2)
    qg = dal_forward(feats, p, StackConfig(layers=1, mode="question-guided-only"))
    # Q stream ignores V entirely in this mode
    other = DualFeatures(Tensor(feats.V.data + 1.0), feats.Q, feats.qmask)
    assert np.array_equal(dal_forward(other, p, StackConfig(layers=1, mode="question-guided-only")).Q.data, qg.Q.data)


def test_both_mode_single_token_question(rng):
    d = 8
    feats = DualFeatures(Tensor(rng.standard_normal((5, d))), Tensor(rng.standard_normal((3, d))),
                         np.array([True, False, False]))
    maps_out = stack_forward(feats, [init_dal(rng, d, 2)], StackConfig(layers=1))[1]
    w = maps_out.maps[(0, "v-guided")]
    np.testing.assert_array_equal(w[..., 0], np.ones_like(w[..., 0]))
    assert np.all(w[..., 1:] == 0.0)


def test_map_count_and_row_sums(rng):
    feats = _features(rng)
    out, maps = stack_forward(feats, [init_dal(rng, 8, 2) for _ in range(2)], StackConfig(layers=2))
    assert len(maps) == 2 * 4 * 2
    assert {site for _, site in maps.maps} == set(SITES)
    for (layer, site), w in maps.maps.items():
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) < 1e-9)
        if site in ("q-self", "v-guided"):
            assert np.all(w[..., ~feats.qmask] == 0.0)


def test_stack_is_fold_of_layers(rng):
    feats = _features(rng)
    layers = [init_dal(rng, 8, 2) for _ in range(2)]
    cfg = StackConfig(layers=2)
    out, _ = stack_forward(feats, layers, cfg)
    step = dal_forward(dal_forward(feats, layers[0], cfg), layers[1], cfg)
    assert np.array_equal(out.V.data, step.V.data)
    assert np.array_equal(out.Q.data, step.Q.data)
    one, _ = stack_forward(feats, layers[:1], StackConfig(layers=1))
    assert np.array_equal(one.V.data, dal_forward(feats, layers[0], cfg).V.data)


def test_deterministic_without_dropout(rng):
    feats = _features(rng)
    layers = [init_dal(rng, 8, 2) for _ in range(2)]
    a, _ = stack_forward(feats, layers, StackConfig(layers=2, dropout=0.3))
    b, _ = stack_forward(feats, layers, StackConfig(layers=2, dropout=0.3))
    assert np.array_equal(a.V.data, b.V.data)


def test_guided_weights_receive_gradient(rng):
    feats = _features(rng)
    layers = [init_dal(rng, 8, 2) for _ in range(2)]
    w = Tensor(rng.standard_normal((5, 8)))
    with Tape() as tape:
        out, _ = stack_forward(feats, layers, StackConfig(layers=2))
        loss = sum_all(mul(out.V, w))
    tape.backward(loss)
    assert np.abs(layers[0].v.ga.wq.grad).max() > 1e-8
    assert np.abs(layers[0].v.ga.wv.grad).max() > 1e-8


def test_dual_features_contract(rng):
    with pytest.raises(ShapeError):
        DualFeatures(Tensor(np.ones((4, 8))), Tensor(np.ones((3, 8))))
    with pytest.raises(ShapeError):
        DualFeatures(Tensor(np.ones((5, 8))), Tensor(np.ones((3, 6))))


def test_stack_config_contract():
    with pytest.raises(ValueError):
        StackConfig(layers=0)
    with pytest.raises(ValueError):
        StackConfig(mode="sideways")
