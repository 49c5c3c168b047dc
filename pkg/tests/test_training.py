import math

import numpy as np
import pytest

from heartlora import tensor as T
from heartlora.pattern import HeadPattern
from heartlora.training import (
    AdamWState,
    DivergenceError,
    Session,
    TrainPlan,
    adamw_step,
    compare,
    cosine_lr,
    evaluate,
    run_adaptation,
    sweep_ne,
)

FAST = dict(epochs=3, warmup_epochs=1, batch_size=40, eval_batch_size=40)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 10, 1.0) == 1.0
    assert cosine_lr(5, 10, 1.0) == pytest.approx(0.5)
    assert cosine_lr(10, 10, 1.0) == pytest.approx(0.0)


def test_adamw_matches_reference_formula(rng):
    p = rng.normal(size=5)
    g1, g2 = rng.normal(size=5), rng.normal(size=5)
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    ref, m, v = p.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate((g1, g2), start=1):
        ref = ref * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    state = AdamWState([np.zeros(5)], [np.zeros(5)], 0)
    for g in (g1, g2):
        adamw_step([p], [g], state, lr, wd)
    np.testing.assert_allclose(p, ref, rtol=1e-12)
    assert state.t == 2


def test_adamw_rejects_non_finite_gradient():
    state = AdamWState([np.zeros(2)], [np.zeros(2)], 0)
    with pytest.raises(DivergenceError):
        adamw_step([np.zeros(2)], [np.array([np.nan, 0.0])], state, 0.1, 0.0)


def test_plan_validation():
    with pytest.raises(ValueError):
        TrainPlan(epochs=3, warmup_epochs=3)
    with pytest.raises(ValueError):
        TrainPlan(criterion="fisher")
    with pytest.raises(ValueError):
        TrainPlan(mode="grouped")
    with pytest.raises(ValueError):
        TrainPlan.from_dict({"epochs": 3, "depth": 2})
    plan = TrainPlan(seed=4)
    assert TrainPlan.from_dict(plan.to_dict()) == plan
    assert TrainPlan.long_preset().epochs == 100 and TrainPlan.long_preset().warmup_epochs == 10


def test_schedule_contract(small_backbone, small_task):
    _, splits = small_task
    res = run_adaptation(TrainPlan(ne=2, **FAST), small_backbone, splits)
    ones = HeadPattern.all_ones(2, 4).digest()
    phases = [(e["phase"], e["pattern"]) for e in res.record.epochs]
    assert phases[0] == ("warmup", ones)
    masked = {d for ph, d in phases[1:]}
    assert [ph for ph, _ in phases[1:]] == ["masked", "masked"]
    assert masked == {res.pattern.digest()} and res.pattern.zeros_per_layer() == [2, 2]
    assert res.optimizer_state.t == 3 * 2  # state carried across the boundary
    assert res.criterion_used in ("taylor_raw", "taylor_negated", "taylor_abs")


def test_run_is_deterministic(small_backbone, small_task):
    _, splits = small_task
    plan = TrainPlan(ne=1, criterion="taylor_raw", **FAST)
    a = run_adaptation(plan, small_backbone, splits)
    b = run_adaptation(plan, small_backbone, splits)
    assert a.record.deterministic_view() == b.record.deterministic_view()
    for p, q in zip(a.adapters, b.adapters):
        assert np.array_equal(p.B.data, q.B.data)


def test_backbone_untouched_by_adaptation(small_backbone, small_task):
    before = small_backbone.checksum()
    run_adaptation(TrainPlan(ne=1, **FAST), small_backbone, small_task[1])
    assert small_backbone.checksum() == before


def test_fallback_restores_all_ones(small_backbone, small_task, monkeypatch):
    original = Session.warmup

    def warmup_with_unbeatable_boundary(self):
        original(self)
        self.boundary_val_accuracy = 2.0

    monkeypatch.setattr(Session, "warmup", warmup_with_unbeatable_boundary)
    res = run_adaptation(TrainPlan(ne=2, auto_fallback=True, **FAST), small_backbone, small_task[1])
    assert res.record.fallback
    assert res.pattern.is_all_ones()
    assert res.record.epochs[-1]["pattern"] == HeadPattern.all_ones(2, 4).digest()


def test_divergence_reports_last_good_state(small_backbone, small_task):
    _, splits = small_task
    bad = dict(splits)
    x, y = splits["train"].normalized(), splits["train"].int_labels()
    x[0, 0, 0, 0] = np.nan
    bad["train"] = (x, y)
    T.set_debug(False)
    with pytest.raises(DivergenceError) as e:
        run_adaptation(TrainPlan(**FAST), small_backbone, bad)
    assert e.value.last_good is not None and e.value.last_good["epoch"] == 0


def test_sweep_shares_boundary(small_backbone, small_task):
    rows, results = sweep_ne(TrainPlan(**FAST), small_backbone, small_task[1], [0, 1, 4])
    assert [r["ne"] for r in rows] == [0, 1, 4]
    assert len({r["warmup_loss"] for r in rows}) == 1
    byte_counts = [r["stored_adapter_bytes"] for r in rows]
    assert byte_counts[0] > byte_counts[1] > byte_counts[2]
    assert rows[2]["value_output_flops"] == 0


def test_compare_rows(small_backbone, small_task):
    rows, quant_rows, _ = compare(TrainPlan(ne=1, **FAST), small_backbone, small_task[1])
    assert [r["method"] for r in rows] == ["heart", "front_k", "lora(ne=0)"]
    assert len({r["warmup_loss"] for r in rows}) == 1 and quant_rows == []


def test_evaluate_rejects_empty_split(small_backbone):
    with pytest.raises(ValueError):
        evaluate(small_backbone, None, None, (np.zeros((0, 3, 16, 16), np.float32), np.zeros(0)))


def test_record_counts(small_backbone, small_task):
    res = run_adaptation(TrainPlan(ne=1, **FAST), small_backbone, small_task[1])
    pc = res.record.param_counts
    assert pc["adapters"] == 2 * 2 * 2 * 32 * 8
    assert pc["trainable"] == pc["adapters"] + 32 * 4 + 4
    assert math.isfinite(res.record.test_accuracy)
