import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from heartlora import tensor as T
from heartlora.lora import (
    INIT_STD,
    dequantize,
    effective_weight,
    fake_quant,
    init_adapters,
    merge_for_storage,
    quantize_array,
    restore_from_storage,
    trainable_count,
)
from heartlora.model import ModelConfig, model_forward
from heartlora.pattern import HeadPattern
from oracles import randomize_adapters, toy_backbone, toy_batch, toy_config


def test_init_shapes_and_zero_b():
    cfg = ModelConfig()
    pairs = init_adapters(cfg, rank=8, seed=1)
    assert [(p.layer, p.target) for p in pairs[:2]] == [(0, "q"), (0, "v")]
    assert len(pairs) == 2 * cfg.num_layers
    for p in pairs:
        assert p.A.shape == (64, 8) and p.B.shape == (8, 64)
        assert not p.B.data.any()
    a = np.concatenate([p.A.data.ravel() for p in pairs])
    assert abs(a.std() - INIT_STD) < 0.002
    assert trainable_count(pairs) == 2 * cfg.num_layers * 2 * 64 * 8


def test_rank_limits():
    with pytest.raises(ValueError):
        init_adapters(ModelConfig(), rank=33)
    with pytest.raises(ValueError):
        init_adapters(ModelConfig(), rank=0)
    with pytest.raises(ValueError):
        init_adapters(ModelConfig(), targets=())


def test_effective_weight_gradients_reach_only_adapter(rng):
    with T.precision("float64"):
        h0 = T.Tensor(rng.normal(size=(6, 6)))
        (pair,) = init_adapters(toy_config(embed_dim=6, num_heads=2, num_layers=1), targets=("q",), rank=2)
        pair.B.data[...] = rng.normal(size=pair.B.shape)
        x = T.Tensor(rng.normal(size=(3, 6)))
        T.backward(T.sum(T.matmul(x, effective_weight(h0, pair))))
    assert h0.grad is None
    g_total = x.data.sum(0)[:, None] * np.ones((1, 6))
    np.testing.assert_allclose(pair.A.grad, g_total @ pair.B.data.T)
    np.testing.assert_allclose(pair.B.grad, pair.A.data.T @ g_total)


def test_zero_scale_is_identity():
    w = toy_backbone()
    x, _ = toy_batch(w.config)
    with T.precision("float64"):
        pairs = init_adapters(w.config, rank=2, scale=0.0)
    randomize_adapters(pairs)
    np.testing.assert_array_equal(model_forward(x, w, pairs).data, model_forward(x, w).data)


def test_fake_quant_passes_gradient_straight_through(rng):
    with T.precision("float64"):
        a = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        out = fake_quant(a)
        T.backward(T.sum(T.scale(out, 3.0)))
    np.testing.assert_array_equal(a.grad, np.full((4, 3), 3.0))
    assert np.unique(out.data).size <= 255


def test_quantize_endpoints_exact():
    q = quantize_array(np.array([-1.0, 0.0, 1.0]))
    np.testing.assert_array_equal(q.q_values, [-127, 0, 127])
    np.testing.assert_array_equal(dequantize(q, np.float64), [-1.0, 0.0, 1.0])


def test_quantize_all_zero():
    q = quantize_array(np.zeros((2, 3)))
    assert not q.q_values.any()
    assert not dequantize(q).any()


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=2, max_side=16),
                  elements=st.floats(-1e3, 1e3, width=32)))
def test_quantize_round_trip_error_bounded(x):
    q = quantize_array(x)
    err = np.abs(dequantize(q, np.float64) - x.astype(np.float64))
    assert np.all(err <= q.scale / 2 * (1 + 1e-12))
    assert q.q_values.dtype == np.int8 and q.q_values.min() >= -127


def test_storage_drops_head_slices_and_restores_zeros():
    cfg = toy_config()
    with T.precision("float64"):
        pairs = init_adapters(cfg, targets=("q", "v", "o"), rank=2)
    randomize_adapters(pairs)
    pat = HeadPattern([[1, 0, 1, 0], [1, 1, 1, 1]])
    stored = merge_for_storage(pairs, pat, cfg.num_heads)
    hd = cfg.head_dim
    for s, p in zip(stored, pairs):
        kept = 2 if s.layer == 0 else 4
        if s.target == "o":
            assert s.A.shape == (kept * hd, 2) and s.B.shape == p.B.shape
        else:
            assert s.B.shape == (2, kept * hd) and s.A.shape == p.A.shape
    back = restore_from_storage(stored)
    for b, p in zip(back, pairs):
        if p.layer == 1:
            np.testing.assert_array_equal(b.A.data, p.A.data)
            np.testing.assert_array_equal(b.B.data, p.B.data)
    q0 = next(b for b in back if b.key == (0, "q"))
    assert not q0.B.data[:, hd:2 * hd].any()


def test_masked_forward_unchanged_by_storage_round_trip():
    w = toy_backbone()
    x, _ = toy_batch(w.config)
    with T.precision("float64"):
        pairs = init_adapters(w.config, targets=("q", "v", "o"), rank=2)
    randomize_adapters(pairs)
    pat = HeadPattern([[1, 0, 1, 1], [0, 1, 1, 1]])
    back = restore_from_storage(merge_for_storage(pairs, pat, 4))
    # a masked head's q/v columns and o rows only feed that head's (zeroed) output
    np.testing.assert_allclose(model_forward(x, w, back, pat).data, model_forward(x, w, pairs, pat).data,
                               atol=1e-12)
