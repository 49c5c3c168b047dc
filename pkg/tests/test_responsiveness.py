import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartlora import tensor as T
from heartlora.lora import init_adapters
from heartlora.model import model_forward
from heartlora.pattern import HeadPattern
from heartlora.responsiveness import (
    CRITERIA,
    ResponsivenessReport,
    ScoringError,
    accumulate,
    front_k_pattern,
    head_slices,
    ratio_to_counts,
    score_adapters,
    score_head,
    select_deactivation_set,
    smallest_k,
    taylor_fidelity_check,
)
from oracles import brute_force_deactivation, randomize_adapters, toy_backbone, toy_batch


def _scored_pairs(targets=("q", "v"), seed=0):
    w = toy_backbone(seed=seed)
    x, y = toy_batch(w.config)
    with T.precision("float64"):
        pairs = init_adapters(w.config, targets=targets, rank=2, seed=seed)
    randomize_adapters(pairs, seed=seed)
    T.backward(T.cross_entropy_logits(model_forward(x, w, pairs), y))
    return w, pairs


def test_head_slices_are_contiguous_column_blocks():
    w = np.arange(2 * 8, dtype=float).reshape(2, 8)
    blocks = head_slices(w, w, 4)
    assert len(blocks) == 4
    np.testing.assert_array_equal(blocks[1][0], w[:, 2:4])
    np.testing.assert_array_equal(np.concatenate([b[0] for b in blocks], axis=1), w)


def test_score_before_backward_is_an_error():
    with pytest.raises(ScoringError, match="before any backward"):
        head_slices(np.ones((2, 4)), None, 2)


def test_score_head_definitions(rng):
    w, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    raw = float(np.sum(w * g))
    assert score_head(w, g, "taylor_raw") == pytest.approx(raw)
    assert score_head(w, g, "taylor_negated") == pytest.approx(-raw)
    assert score_head(w, g, "taylor_abs") == pytest.approx(abs(raw))
    assert score_head(w, g, "weight_l2") == pytest.approx(np.linalg.norm(w))
    assert score_head(w, g, "grad_l2") == pytest.approx(np.linalg.norm(g))
    with pytest.raises(ValueError):
        score_head(w, g, "fisher")


def test_score_adapters_sums_targets():
    w, pairs = _scored_pairs()
    cfg = w.config
    both = score_adapters(pairs, cfg.num_layers, cfg.num_heads, "taylor_raw")
    q = score_adapters(pairs, cfg.num_layers, cfg.num_heads, "taylor_raw", reduction="q_only")
    v = score_adapters(pairs, cfg.num_layers, cfg.num_heads, "taylor_raw", reduction="v_only")
    np.testing.assert_allclose(both, q + v)
    assert both.shape == (2, 4)


def test_output_projection_scored_on_a_rows():
    w, pairs = _scored_pairs(targets=("o",))
    p = pairs[0]
    hd = w.config.head_dim
    scores = score_adapters(pairs, 2, 4, "taylor_raw")
    expect = float(np.sum(p.A.data[hd:2 * hd] * p.A.grad[hd:2 * hd]))
    assert scores[0, 1] == pytest.approx(expect)


def test_scores_ignore_backbone_values():
    w, pairs = _scored_pairs()
    before = score_adapters(pairs, 2, 4, "taylor_raw")
    for _, t in w.named_tensors():
        t.data[...] = 0.0
    np.testing.assert_array_equal(score_adapters(pairs, 2, 4, "taylor_raw"), before)


def test_accumulate_modes():
    rows = np.arange(12, dtype=float).reshape(3, 4)
    g = accumulate(rows, "global")
    assert g.num_rows == 1
    np.testing.assert_array_equal(g.scores[0], rows.sum(0))
    per = accumulate(rows, "per_layer")
    np.testing.assert_array_equal(per.matrix, rows)
    with pytest.raises(ValueError):
        accumulate(rows, "blockwise")


def test_report_rejects_non_finite():
    with pytest.raises(ScoringError):
        ResponsivenessReport([[1.0, np.nan]], "taylor_raw", "per_layer")


def test_global_selection_shares_one_pattern():
    rep = accumulate(np.array([[3.0, 1.0, 2.0, 0.0], [0.0, 5.0, 0.0, 5.0]]), "global")
    pat = select_deactivation_set(rep, ne=2, num_layers=2)
    # column sums: 3, 6, 2, 5 -> heads 0 and 2
    assert pat.deactivated(0) == [0, 2] and pat.deactivated(1) == [0, 2]


def test_per_layer_selection_is_independent():
    rep = accumulate(np.array([[3.0, 1.0, 2.0, 0.0], [0.0, 5.0, 1.0, 5.0]]), "per_layer")
    pat = select_deactivation_set(rep, ne=1)
    assert pat.deactivated(0) == [3] and pat.deactivated(1) == [0]


def test_grouped_selection_floors_ratio():
    rows = [np.arange(4.0), np.arange(8.0)[::-1], np.arange(4.0)[::-1]]
    rep = accumulate(rows, "grouped")
    pat = select_deactivation_set(rep, ratio=0.3)
    assert pat.zeros_per_layer() == [1, 2, 1]
    # 4-head group sums to a constant row, ties go to the lowest index
    assert pat.deactivated(0) == [0] == pat.deactivated(2)
    assert pat.deactivated(1) == [6, 7]
    assert ratio_to_counts([4, 8, 16, 32], 0.25) == [1, 2, 4, 8]


def test_selection_bounds():
    rep = accumulate(np.zeros((2, 4)), "global")
    with pytest.raises(ValueError):
        select_deactivation_set(rep, ne=5)
    with pytest.raises(ValueError):
        select_deactivation_set(rep, ne=-1)
    with pytest.raises(ValueError):
        select_deactivation_set(accumulate([np.zeros(4)], "grouped"), ratio=None)
    assert select_deactivation_set(rep, ne=4, num_layers=2).zeros_per_layer() == [4, 4]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
def test_smallest_k_matches_sort_oracle(values, data):
    k = data.draw(st.integers(0, len(values)))
    scores = np.array(values, dtype=float)
    assert set(smallest_k(scores, k).tolist()) == brute_force_deactivation(values, k)


def test_front_k_pattern():
    pat = front_k_pattern(3, 8, 3)
    assert all(pat.deactivated(l) == [0, 1, 2] for l in range(3))
    with pytest.raises(ValueError):
        front_k_pattern(3, 8, 9)


@pytest.mark.parametrize("criterion", CRITERIA)
def test_every_criterion_yields_finite_report(criterion):
    w, pairs = _scored_pairs()
    rep = accumulate(score_adapters(pairs, 2, 4, criterion), "global", criterion)
    assert np.all(np.isfinite(rep.matrix))
    assert select_deactivation_set(rep, ne=1, num_layers=2).zeros_per_layer() == [1, 1]


def test_taylor_fidelity_first_order_agreement():
    w, pairs = _scored_pairs()
    x, y = toy_batch(w.config)
    for p in pairs:
        p.B.data *= 1e-3
    r, dl = taylor_fidelity_check(w, pairs, x, y, layer=0, head=2)
    assert abs(r - dl) < 1e-3 * abs(r) + 1e-12


def test_pattern_helpers():
    pat = HeadPattern([[1, 0, 1], [1, 1]])
    assert pat.head_counts == [3, 2] and pat.zeros_per_layer() == [1, 0]
    assert HeadPattern.from_dict(pat.to_dict()) == pat
    assert pat.digest() != HeadPattern([[1, 1, 1], [1, 1]]).digest()
    with pytest.raises(ValueError):
        HeadPattern([[2, 1]])
    with pytest.raises(ValueError):
        pat.as_array()
    mask = HeadPattern([[1, 0], [0, 1]]).as_activation_mask(batch=2, tokens=3, head_dim=4)
    assert mask.shape == (2, 2, 2, 3, 4)
    assert mask[:, 0, 1].sum() == 0 and mask[:, 0, 0].min() == 1


def test_abs_and_negated_apply_to_target_sum():
    w, pairs = _scored_pairs(targets=("q", "k", "v", "o"))
    raw = score_adapters(pairs, 2, 4, "taylor_raw")
    assert np.array_equal(score_adapters(pairs, 2, 4, "taylor_abs"), np.abs(raw))
    assert np.array_equal(score_adapters(pairs, 2, 4, "taylor_negated"), -raw)


def test_taylor_raw_matches_scalar_loop():
    w, pairs = _scored_pairs()
    scores = score_adapters(pairs, 2, 4, "taylor_raw")
    hd = w.config.head_dim
    for layer in range(2):
        for head in range(4):
            total = 0.0
            for p in pairs:
                if p.layer != layer:
                    continue
                for r in range(p.rank):
                    for c in range(head * hd, (head + 1) * hd):
                        total += float(p.B.grad[r, c]) * float(p.B.data[r, c])
            assert scores[layer, head] == pytest.approx(total, rel=1e-12, abs=1e-18)


def test_hand_arithmetic_and_zero_gradient():
    ones = np.ones((2, 2))
    assert score_head(ones, ones, "taylor_raw") == 4 and score_head(ones, ones, "taylor_abs") == 4
    assert score_head(ones, ones, "weight_l2") == 2 and score_head(ones, ones, "grad_l2") == 2
    assert score_head(ones, np.zeros((2, 2)), "taylor_raw") == 0
    assert score_head(ones, np.zeros((2, 2)), "weight_l2") == 2
    pat = select_deactivation_set(accumulate([[5.0, 1.0, 3.0, 2.0]], "per_layer"), ne=2)
    assert pat.layer(0).tolist() == [1, 0, 1, 0]
    assert select_deactivation_set(accumulate([[5.0, 1.0]], "per_layer"), ne=0).is_all_ones()


def test_single_layer_global_equals_per_layer():
    row = np.array([[0.3, -1.0, 2.0]])
    np.testing.assert_array_equal(accumulate(row, "global").matrix, accumulate(row, "per_layer").matrix)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=2, max_size=10))
def test_selection_is_monotone_in_ne(values):
    rep = accumulate([np.array(values, dtype=float)], "per_layer")
    prev: set = set()
    for ne in range(len(values) + 1):
        cur = set(select_deactivation_set(rep, ne=ne).deactivated(0))
        assert prev <= cur and len(cur) == ne
        prev = cur


def test_fidelity_zero_delta_is_zero():
    w, pairs = _scored_pairs()
    x, y = toy_batch(w.config)
    for p in pairs:
        p.B.data[...] = 0.0
    assert taylor_fidelity_check(w, pairs, x, y, layer=1, head=0) == (0.0, 0.0)
