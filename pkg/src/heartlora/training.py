"""Adaptation schedule: warm-up, one-shot head scoring, masked continuation.

The warm-up trains adapters and the classifier with every head active and,
during its final epoch, sums adapter gradients into a separate buffer. At the
boundary those sums and the current adapter weights produce a responsiveness
report, the report produces a fixed head pattern, and training continues with
that pattern until the last epoch. Optimizer state carries across the
boundary.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import RawDataset, SyntheticTaskSpec, generate, pretrain_spec
from .lora import AdapterPair, init_adapters, merge_for_storage, trainable_count
from .model import BackboneWeights, ModelConfig, count_flops, init_backbone, model_forward, reset_classifier
from .pattern import HeadPattern
from .responsiveness import (
    CRITERIA,
    MODES,
    REDUCTIONS,
    TAYLOR_VARIANTS,
    ResponsivenessReport,
    accumulate,
    front_k_pattern,
    score_adapters,
    select_deactivation_set,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BASELINE_MODES = ("heart", "front_k", "none")
AUTO_CRITERION = "taylor_auto"


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good: Optional[dict] = None):
        super().__init__(message)
        self.last_good = last_good


# --- optimizer ------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class AdamWState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence) -> "AdamWState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)

    def copy(self) -> "AdamWState":
        return AdamWState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adamw_step(params: Sequence, grads: Sequence, state: AdamWState, lr: float, weight_decay: float,
               beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One AdamW update in place on ``params`` (arrays) with decoupled weight decay."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("optimizer state does not match parameters")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient reached the optimizer")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != m.shape:
            raise ValueError(f"state shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        dt = p.dtype.type
        p *= dt(1.0 - lr * weight_decay)
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        p -= dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))


class AdamW:
    def __init__(self, params: Sequence, weight_decay: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.state = AdamWState.zeros_like(self.params)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self, lr: float) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr, self.weight_decay)


# --- plans and records ----------------------------------------------------


LONG_EPOCHS, LONG_WARMUP = 100, 10


@dataclass
class TrainPlan:
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    ne: int = 1
    ratio: Optional[float] = None
    criterion: str = AUTO_CRITERION
    mode: str = "global"
    targets: tuple = ("q", "v")
    scale: float = 1.0
    rank: int = 8
    quantize: bool = True
    seed: int = 0
    baseline_mode: str = "heart"
    score_reduction: str = "sum"
    auto_fallback: bool = False
    check_starvation: bool = True
    eval_batch_size: int = 250

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.warmup_epochs < 1:
            raise ValueError("at least one warm-up epoch is required")
        if self.lr_schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.criterion not in CRITERIA + (AUTO_CRITERION,):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown accumulation mode {self.mode!r}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ValueError(f"unknown baseline mode {self.baseline_mode!r}")
        if self.score_reduction not in REDUCTIONS:
            raise ValueError(f"unknown score reduction {self.score_reduction!r}")
        if self.ne < 0:
            raise ValueError("ne must be non-negative")
        if self.mode == "grouped" and self.ratio is None:
            raise ValueError("grouped mode needs a ratio")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")

    @classmethod
    def long_preset(cls, **kw) -> "TrainPlan":
        """100 epochs with a 10-epoch warm-up."""
        return cls(epochs=LONG_EPOCHS, warmup_epochs=LONG_WARMUP, **kw)

    def replace(self, **kw) -> "TrainPlan":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    pattern: Optional[dict] = None
    boundary_epoch: Optional[int] = None
    warmup_loss: Optional[float] = None
    boundary_val_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    fallback: bool = False
    param_counts: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def deterministic_view(self) -> dict:
        """Everything except wall-clock time."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdaptationResult:
    record: RunRecord
    weights: BackboneWeights
    adapters: list
    pattern: HeadPattern
    report: Optional[ResponsivenessReport]
    score_grads: dict
    optimizer_state: AdamWState
    plan: TrainPlan
    criterion_used: Optional[str] = None


# --- evaluation -----------------------------------------------------------


def _split_arrays(split) -> tuple:
    if isinstance(split, RawDataset):
        return split.normalized(), split.int_labels()
    images, labels = split
    return np.asarray(images), np.asarray(labels, dtype=np.int64)


def predict(weights, adapters, pattern, images, batch_size: int = 250, quantize: bool = False) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, images.shape[0], batch_size):
            out.append(model_forward(images[s:s + batch_size], weights, adapters, pattern, quantize).data)
    if not out:
        return np.zeros((0, weights.config.num_classes), dtype=np.float32)
    return np.concatenate(out)


def evaluate(weights, adapters, pattern, split, batch_size: int = 250, quantize: bool = False) -> float:
    """Top-1 accuracy on a split (RawDataset or (images, labels))."""
    images, labels = _split_arrays(split)
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = predict(weights, adapters, pattern, images, batch_size, quantize)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_loss(weights, adapters, pattern, split, batch_size: int = 250, quantize: bool = False) -> float:
    images, labels = _split_arrays(split)
    logits = predict(weights, adapters, pattern, images, batch_size, quantize)
    with T.no_grad():
        return float(T.cross_entropy_logits(T.Tensor(logits, dtype=logits.dtype), labels).item())


# --- pretraining ----------------------------------------------------------


def pretrain_backbone(
    config: ModelConfig,
    task: SyntheticTaskSpec,
    epochs: int = 6,
    learning_rate: float = 2e-3,
    weight_decay: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
    splits: Optional[dict] = None,
) -> tuple:
    """Train every backbone tensor on a pre-task, then freeze. Returns (weights, metrics)."""
    splits = splits or generate(task)
    cfg = dataclasses.replace(config, num_classes=task.num_classes)
    weights = init_backbone(cfg, seed=seed, requires_grad=True)
    reset_classifier(weights, task.num_classes, seed=seed)
    weights.unfreeze()
    params = [t for _, t in weights.named_tensors()]
    opt = AdamW(params, weight_decay)
    x, y = _split_arrays(splits["train"])
    steps_per_epoch = math.ceil(x.shape[0] / batch_size)
    total = epochs * steps_per_epoch
    step = 0
    losses = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 0x9E7, epoch]).permutation(x.shape[0])
        acc = 0.0
        for s in range(0, x.shape[0], batch_size):
            idx = order[s:s + batch_size]
            opt.zero_grad()
            loss = T.cross_entropy_logits(model_forward(x[idx], weights), y[idx])
            T.backward(loss)
            opt.step(cosine_lr(step, total, learning_rate))
            step += 1
            acc += loss.item() * idx.size
        losses.append(acc / x.shape[0])
        logger.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
    weights.freeze(train_classifier=False)
    metrics = {"train_loss": losses, "val_accuracy": evaluate(weights, None, None, splits["val"])}
    return weights, metrics


def prepare_backbone(pretrained: BackboneWeights, num_classes: int, seed: int) -> BackboneWeights:
    """Private copy of a pretrained backbone with a fresh trainable classifier."""
    w = pretrained.copy()
    reset_classifier(w, num_classes, seed=seed)
    w.freeze(train_classifier=True)
    return w


# --- the adaptation session -----------------------------------------------


class Session:
    """Mutable training state for one adaptation run."""

    def __init__(self, plan: TrainPlan, backbone: BackboneWeights, splits: dict, num_classes: Optional[int] = None):
        self.plan = plan
        self.train_x, self.train_y = _split_arrays(splits["train"])
        num_classes = num_classes or int(self.train_y.max()) + 1
        self.weights = prepare_backbone(backbone, num_classes, plan.seed)
        self.config = self.weights.config
        with T.precision(np.dtype(self.weights.patch_w.data.dtype).name):
            self.adapters = init_adapters(self.config, plan.targets, plan.rank, plan.scale, plan.seed)
        self.optimizer = AdamW(self._trainables(), plan.weight_decay)
        self.val = splits["val"]
        self.test = splits.get("test")
        self.steps_per_epoch = math.ceil(self.train_x.shape[0] / plan.batch_size)
        self.total_steps = plan.epochs * self.steps_per_epoch
        self.step = 0
        self.epoch = 0
        self.records: list = []
        self.score_grads: dict = {}
        self.pattern: Optional[HeadPattern] = None
        self.report: Optional[ResponsivenessReport] = None
        self.criterion_used: Optional[str] = None
        self.boundary_val_accuracy: Optional[float] = None
        self.fallback = False

    def _trainables(self) -> list:
        params = []
        for p in self.adapters:
            params += p.parameters()
        return params + self.weights.classifier()

    # snapshots make the warm-up boundary reusable across continuations
    def snapshot(self) -> dict:
        return {
            "adapters": [p.copy() for p in self.adapters],
            "classifier": [t.data.copy() for t in self.weights.classifier()],
            "optimizer": self.optimizer.state.copy(),
            "step": self.step,
            "epoch": self.epoch,
            "records": [dict(r) for r in self.records],
            "score_grads": {k: v.copy() for k, v in self.score_grads.items()},
            "boundary_val_accuracy": self.boundary_val_accuracy,
        }

    def restore(self, snap: dict) -> None:
        self.adapters = [p.copy() for p in snap["adapters"]]
        for t, arr in zip(self.weights.classifier(), snap["classifier"]):
            t.data = arr.copy()
            t.grad = None
        self.optimizer = AdamW(self._trainables(), self.plan.weight_decay)
        self.optimizer.state = snap["optimizer"].copy()
        self.step = snap["step"]
        self.epoch = snap["epoch"]
        self.records = [dict(r) for r in snap["records"]]
        self.score_grads = {k: v.copy() for k, v in snap["score_grads"].items()}
        self.boundary_val_accuracy = snap["boundary_val_accuracy"]
        self.pattern = None
        self.report = None
        self.criterion_used = None
        self.fallback = False

    def _effective(self, pattern: Optional[HeadPattern]) -> HeadPattern:
        if pattern is None:
            return HeadPattern.all_ones(self.config.num_layers, self.config.num_heads)
        return pattern

    def _masked_columns(self, pattern: HeadPattern) -> dict:
        hd = self.config.head_dim
        out = {}
        for layer in range(self.config.num_layers):
            dead = pattern.deactivated(layer)
            if dead:
                out[layer] = np.concatenate([np.arange(h * hd, (h + 1) * hd) for h in dead])
        return out

    def train_epoch(self, pattern: Optional[HeadPattern], phase: str, collect_scores: bool = False) -> dict:
        plan = self.plan
        n = self.train_x.shape[0]
        order = np.random.default_rng([plan.seed, 0xE90C, self.epoch]).permutation(n)
        masked = self._masked_columns(pattern) if (pattern is not None and plan.check_starvation) else {}
        total = 0.0
        lr = 0.0
        for s in range(0, n, plan.batch_size):
            idx = order[s:s + plan.batch_size]
            self.optimizer.zero_grad()
            logits = model_forward(self.train_x[idx], self.weights, self.adapters, pattern, plan.quantize)
            loss = T.cross_entropy_logits(logits, self.train_y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {self.epoch}", None)
            T.backward(loss)
            if collect_scores:
                for p in self.adapters:
                    g = p.head_grad()
                    if p.key in self.score_grads:
                        self.score_grads[p.key] += g
                    else:
                        self.score_grads[p.key] = g.astype(np.float64)
            for p in self.adapters:
                cols = masked.get(p.layer)
                if cols is not None and np.any(p.head_grad()[:, cols] != 0):
                    raise T.ContractError(f"deactivated head received gradient in layer {p.layer} ({p.target})")
            lr = cosine_lr(self.step, self.total_steps, plan.learning_rate)
            self.optimizer.step(lr)
            self.step += 1
            total += value * idx.size
        val_acc = evaluate(self.weights, self.adapters, pattern, self.val, plan.eval_batch_size, plan.quantize)
        rec = {
            "epoch": self.epoch,
            "phase": phase,
            "train_loss": total / n,
            "val_accuracy": val_acc,
            "lr": lr,
            "pattern": self._effective(pattern).digest(),
        }
        self.records.append(rec)
        self.epoch += 1
        logger.info("epoch %d [%s] loss %.4f val %.3f", rec["epoch"], phase, rec["train_loss"], val_acc)
        return rec

    def _run_epochs(self, count: int, pattern, phase: str, collect_last: bool = False) -> None:
        for i in range(count):
            last_good = self.snapshot()
            try:
                self.train_epoch(pattern, phase, collect_scores=collect_last and i == count - 1)
            except DivergenceError as e:
                raise DivergenceError(str(e), last_good) from None

    def warmup(self) -> None:
        pattern = None if self.plan.baseline_mode == "none" else HeadPattern.all_ones(self.config.num_layers, self.config.num_heads)
        self._run_epochs(self.plan.warmup_epochs, pattern, "warmup", collect_last=True)
        self.boundary_val_accuracy = self.records[-1]["val_accuracy"]

    def compute_report(self, criterion: str, mode: Optional[str] = None) -> ResponsivenessReport:
        if not self.score_grads:
            raise RuntimeError("no scoring gradients: run the warm-up first")
        mode = mode or self.plan.mode
        scores = score_adapters(
            self.adapters,
            self.config.num_layers,
            self.config.num_heads,
            criterion,
            grads=self.score_grads,
            reduction=self.plan.score_reduction,
            quantize=self.plan.quantize,
        )
        return accumulate(scores, mode, criterion, [self.config.num_heads] * self.config.num_layers, step=self.step)

    def _select(self, report: ResponsivenessReport, ne: int) -> HeadPattern:
        return select_deactivation_set(report, ne=ne, ratio=self.plan.ratio, num_layers=self.config.num_layers)

    def choose_pattern(self, ne: Optional[int] = None) -> Optional[HeadPattern]:
        """Pattern fixed at the warm-up boundary for the configured baseline mode."""
        plan = self.plan
        ne = plan.ne if ne is None else ne
        cfg = self.config
        if plan.baseline_mode == "none":
            return None
        if plan.baseline_mode == "front_k":
            return front_k_pattern(cfg.num_layers, cfg.num_heads, ne)
        if plan.criterion != AUTO_CRITERION:
            self.report = self.compute_report(plan.criterion)
            self.criterion_used = plan.criterion
            return self._select(self.report, ne)
        best = None
        for kind in TAYLOR_VARIANTS.values():
            report = self.compute_report(kind)
            pattern = self._select(report, ne)
            loss = evaluate_loss(self.weights, self.adapters, pattern, self.val, plan.eval_batch_size, plan.quantize)
            if best is None or loss < best[0]:
                best = (loss, kind, report, pattern)
        _, self.criterion_used, self.report, pattern = best
        return pattern

    def continue_with(self, pattern: Optional[HeadPattern]) -> None:
        self.pattern = pattern
        remaining = self.plan.epochs - self.epoch
        self._run_epochs(remaining, pattern, "masked")

    def result(self, started: float) -> AdaptationResult:
        cfg = self.config
        pattern = self.pattern
        effective = self._effective(pattern)
        stored = merge_for_storage(self.adapters, effective, cfg.num_heads)
        warm = [r for r in self.records if r["phase"] == "warmup"]
        record = RunRecord(
            epochs=[dict(r) for r in self.records],
            pattern=effective.to_dict(),
            boundary_epoch=self.plan.warmup_epochs,
            warmup_loss=warm[-1]["train_loss"] if warm else None,
            boundary_val_accuracy=self.boundary_val_accuracy,
            test_accuracy=None
            if self.test is None
            else evaluate(self.weights, self.adapters, pattern, self.test, self.plan.eval_batch_size, self.plan.quantize),
            fallback=self.fallback,
            param_counts={
                "adapters": trainable_count(self.adapters),
                "classifier": int(sum(t.data.size for t in self.weights.classifier())),
                "stored_adapter_bytes": int(sum(s.nbytes() for s in stored)),
            },
            flops=count_flops(cfg, pattern),
            wall_time=time.perf_counter() - started,
        )
        record.param_counts["trainable"] = record.param_counts["adapters"] + record.param_counts["classifier"]
        return AdaptationResult(
            record=record,
            weights=self.weights,
            adapters=self.adapters,
            pattern=effective,
            report=self.report,
            score_grads=self.score_grads,
            optimizer_state=self.optimizer.state,
            plan=self.plan,
            criterion_used=self.criterion_used,
        )


def _continue(session: Session, ne: Optional[int], started: float) -> AdaptationResult:
    plan = session.plan
    boundary = session.snapshot() if plan.auto_fallback else None
    pattern = session.choose_pattern(ne)
    session.continue_with(pattern)
    if plan.auto_fallback and pattern is not None and not pattern.is_all_ones():
        final_val = session.records[-1]["val_accuracy"]
        if final_val < session.boundary_val_accuracy:
            logger.info("masked run underperformed warm-up (%.3f < %.3f); falling back to ne=0", final_val, session.boundary_val_accuracy)
            session.restore(boundary)
            session.continue_with(HeadPattern.all_ones(session.config.num_layers, session.config.num_heads))
            session.fallback = True
    return session.result(started)


def run_adaptation(plan: TrainPlan, backbone: BackboneWeights, splits: dict) -> AdaptationResult:
    """Warm-up, score, fix pattern, continue. Deterministic for a fixed plan."""
    started = time.perf_counter()
    session = Session(plan, backbone, splits)
    session.warmup()
    return _continue(session, None, started)


def warmup_only(plan: TrainPlan, backbone: BackboneWeights, splits: dict) -> Session:
    session = Session(plan, backbone, splits)
    session.warmup()
    return session


def sweep_ne(plan: TrainPlan, backbone: BackboneWeights, splits: dict, ne_values: Sequence[int]) -> tuple:
    """One continuation per ``ne`` from a single shared warm-up boundary.

    Returns ``(rows, results)`` where each row is a dict with ``ne``,
    ``val_accuracy``, ``test_accuracy`` and ``warmup_loss``.
    """
    started = time.perf_counter()
    session = warmup_only(plan, backbone, splits)
    boundary = session.snapshot()
    rows, results = [], []
    for ne in ne_values:
        t0 = time.perf_counter()
        session.restore(boundary)
        res = _continue(session, ne, t0)
        results.append(res)
        rows.append(_row(f"ne={ne}", ne, res))
    logger.info("sweep finished in %.1fs", time.perf_counter() - started)
    return rows, results


def _row(label: str, ne: int, res: AdaptationResult) -> dict:
    rec = res.record
    return {
        "method": label,
        "ne": ne,
        "quantize": res.plan.quantize,
        "criterion": res.criterion_used or "-",
        "warmup_loss": rec.warmup_loss,
        "val_accuracy": rec.epochs[-1]["val_accuracy"],
        "test_accuracy": rec.test_accuracy,
        "stored_adapter_bytes": rec.param_counts["stored_adapter_bytes"],
        "value_output_flops": rec.flops["value_output"],
        "fallback": rec.fallback,
    }


def compare(plan: TrainPlan, backbone: BackboneWeights, splits: dict, with_fp32: bool = False) -> tuple:
    """Heart-LoRA vs front-k vs ne=0 from one shared warm-up boundary.

    With ``with_fp32`` a second table contrasts quantized and FP32 adapters
    (each with its own warm-up, since the warm-up itself differs).
    """
    rows, results = [], []
    session = warmup_only(plan.replace(baseline_mode="heart"), backbone, splits)
    boundary = session.snapshot()
    for label, mode, ne in (("heart", "heart", plan.ne), ("front_k", "front_k", plan.ne), ("lora(ne=0)", "heart", 0)):
        t0 = time.perf_counter()
        session.plan = plan.replace(baseline_mode=mode)
        session.restore(boundary)
        res = _continue(session, ne, t0)
        results.append(res)
        rows.append(_row(label, ne, res))
    quant_rows = []
    if with_fp32:
        for q in (True, False):
            res = run_adaptation(plan.replace(quantize=q, baseline_mode="heart"), backbone, splits)
            quant_rows.append(_row("heart-int8" if q else "heart-fp32", plan.ne, res))
    return rows, quant_rows, results


def default_splits(seed: int = 0, **overrides) -> dict:
    return generate(SyntheticTaskSpec(seed=seed, **overrides))


def pretrain_for(task: SyntheticTaskSpec, config: Optional[ModelConfig] = None, **kw) -> tuple:
    """Pretrain a backbone on the motif family disjoint from ``task``."""
    config = config or ModelConfig(image_size=task.image_size, channels=task.channels)
    return pretrain_backbone(config, pretrain_spec(task), **kw)
