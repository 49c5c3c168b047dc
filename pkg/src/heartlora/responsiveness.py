"""Head responsiveness scores and responsiveness-driven head deactivation.

A head's responsiveness is the loss change when it is switched off. To first
order this is ``sum(grad * weight)`` over the head's slice of an adapter
factor. Scores read only adapter weights and gradients, never the backbone.

Accumulation modes:

* ``global``    - sum over layers, one pattern shared by every layer
* ``per_layer`` - each layer ranks and deactivates its own heads
* ``grouped``   - layers with equal head count share a group sum; each
                  layer of a group loses ``floor(ratio * heads)`` heads
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .pattern import HeadPattern

CRITERIA = ("taylor_raw", "taylor_negated", "taylor_abs", "weight_l2", "grad_l2")
TAYLOR_VARIANTS = {"raw": "taylor_raw", "neg": "taylor_negated", "abs": "taylor_abs"}
MODES = ("global", "per_layer", "grouped")
REDUCTIONS = ("sum", "q_only", "v_only")


class ScoringError(RuntimeError):
    pass


def head_slices(weight: np.ndarray, grad: Optional[np.ndarray], num_heads: int) -> list:
    """Split (d x C) weight/grad into ``num_heads`` contiguous column blocks.

    Block ``i`` covers columns ``[i*C/N, (i+1)*C/N)``.
    """
    if grad is None:
        raise ScoringError("score requested before any backward pass")
    weight = np.asarray(weight)
    grad = np.asarray(grad)
    if weight.shape != grad.shape:
        raise ScoringError(f"weight {weight.shape} and grad {grad.shape} differ")
    c = weight.shape[-1]
    if c % num_heads:
        raise T.DimensionError(f"width {c} not divisible by {num_heads} heads")
    step = c // num_heads
    return [(weight[:, i * step:(i + 1) * step], grad[:, i * step:(i + 1) * step]) for i in range(num_heads)]


def score_head(weight_slice: np.ndarray, grad_slice: np.ndarray, criterion: str) -> float:
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    w = np.asarray(weight_slice, dtype=np.float64)
    g = np.asarray(grad_slice, dtype=np.float64)
    if criterion == "weight_l2":
        return float(np.sqrt(np.sum(w * w)))
    if criterion == "grad_l2":
        return float(np.sqrt(np.sum(g * g)))
    raw = float(np.sum(g * w))
    if criterion == "taylor_raw":
        return raw
    if criterion == "taylor_negated":
        return -raw
    return abs(raw)


def _reduce_targets(targets: Sequence[str], reduction: str) -> set:
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown target reduction {reduction!r}")
    if reduction == "sum":
        return set(targets)
    want = reduction[0]
    if want not in targets:
        raise ScoringError(f"reduction {reduction!r} but no {want!r} adapter is present")
    return {want}


def score_adapters(
    pairs,
    num_layers: int,
    num_heads: int,
    criterion: str,
    grads: Optional[dict] = None,
    reduction: str = "sum",
    quantize: bool = False,
) -> np.ndarray:
    """Per-layer head scores, shape (num_layers, num_heads).

    ``grads`` optionally maps ``(layer, target)`` to a head-oriented (d x C)
    gradient buffer; otherwise each pair's current ``.grad`` is used. Scores
    of several adapted targets in one layer are summed (``reduction="sum"``)
    or restricted to one target. For the Taylor variants the raw first-order
    terms are summed first and the sign/abs is applied to the sum.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    keep = _reduce_targets({p.target for p in pairs}, reduction)
    # Taylor variants transform the target-summed first-order term, so abs/neg see the whole head
    taylor = criterion.startswith("taylor_")
    per_target = "taylor_raw" if taylor else criterion
    out = np.zeros((num_layers, num_heads), dtype=np.float64)
    for p in pairs:
        if p.target not in keep:
            continue
        g = grads.get(p.key) if grads is not None else p.head_grad()
        for i, (ws, gs) in enumerate(head_slices(p.head_weight(quantize), g, num_heads)):
            out[p.layer, i] += score_head(ws, gs, per_target)
    if criterion == "taylor_negated":
        out = -out
    elif criterion == "taylor_abs":
        out = np.abs(out)
    if not np.all(np.isfinite(out)):
        raise ScoringError("non-finite responsiveness score")
    return out


@dataclass
class ResponsivenessReport:
    """Scores as one row per governed scope (a single row after global accumulation)."""

    scores: list
    criterion: str
    mode: str
    step: int = 0
    head_counts: Optional[list] = None
    groups: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = [np.asarray(r, dtype=np.float64).reshape(-1) for r in self.scores]
        for r in self.scores:
            if not np.all(np.isfinite(r)):
                raise ScoringError("responsiveness report contains non-finite scores")
        if self.mode not in MODES:
            raise ValueError(f"unknown accumulation mode {self.mode!r}")
        if self.mode == "global" and len(self.scores) != 1:
            raise ValueError("global report must have exactly one row")

    @property
    def matrix(self) -> np.ndarray:
        return np.stack(self.scores)

    @property
    def num_rows(self) -> int:
        return len(self.scores)

    def scaled(self, factor: float) -> "ResponsivenessReport":
        return ResponsivenessReport(
            [r * factor for r in self.scores], self.criterion, self.mode, self.step, self.head_counts, self.groups
        )


def accumulate(
    per_layer_scores,
    mode: str,
    criterion: str = "taylor_raw",
    head_counts: Optional[Sequence[int]] = None,
    step: int = 0,
) -> ResponsivenessReport:
    rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in per_layer_scores]
    if mode == "global":
        widths = {r.size for r in rows}
        if len(widths) != 1:
            raise ValueError("global accumulation needs equal head counts in every layer")
        return ResponsivenessReport([np.sum(np.stack(rows), axis=0)], criterion, mode, step, [r.size for r in rows])
    if mode == "per_layer":
        return ResponsivenessReport(rows, criterion, mode, step, [r.size for r in rows])
    if mode == "grouped":
        counts = list(head_counts) if head_counts is not None else [r.size for r in rows]
        if len(counts) != len(rows) or any(c != r.size for c, r in zip(counts, rows)):
            raise ValueError("grouped accumulation needs a head count for every layer matching its scores")
        order = sorted(set(counts))
        groups = [order.index(c) for c in counts]
        return ResponsivenessReport(rows, criterion, mode, step, counts, groups)
    raise ValueError(f"unknown accumulation mode {mode!r}")


def smallest_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest scores; ties go to the lower index."""
    order = np.argsort(np.asarray(scores), kind="stable")
    return np.sort(order[:k])


def _zero_row(n: int, idx) -> np.ndarray:
    row = np.ones(n, dtype=np.uint8)
    row[np.asarray(idx, dtype=np.int64)] = 0
    return row


def select_deactivation_set(
    report: ResponsivenessReport,
    ne: Optional[int] = None,
    ratio: Optional[float] = None,
    num_layers: Optional[int] = None,
) -> HeadPattern:
    """Zero the ``ne`` least-responsive heads per governed scope.

    Grouped reports take ``ratio`` instead and zero ``floor(ratio * heads)``
    heads in every layer of each equal-head-count group, ranked by the
    group's summed scores.
    """
    if report.mode == "grouped":
        if ratio is None or not 0.0 <= ratio <= 1.0:
            raise ValueError("grouped selection needs ratio in [0, 1]")
        counts = report.head_counts
        rows = [None] * len(report.scores)
        for g in sorted(set(report.groups)):
            members = [i for i, gg in enumerate(report.groups) if gg == g]
            n = counts[members[0]]
            k = int(np.floor(ratio * n + 1e-9))
            total = np.sum(np.stack([report.scores[i] for i in members]), axis=0)
            idx = smallest_k(total, k)
            for i in members:
                rows[i] = _zero_row(n, idx)
        return HeadPattern(rows)

    if ne is None:
        raise ValueError("ne is required for global/per_layer selection")
    n_heads = report.scores[0].size
    if ne < 0 or ne > n_heads:
        raise ValueError(f"ne={ne} outside [0, {n_heads}]")
    if report.mode == "global":
        if num_layers is None:
            num_layers = len(report.head_counts) if report.head_counts else 1
        row = _zero_row(n_heads, smallest_k(report.scores[0], ne))
        return HeadPattern([row] * num_layers)
    return HeadPattern([_zero_row(r.size, smallest_k(r, ne)) for r in report.scores])


def front_k_pattern(num_layers: int, num_heads: int, ne: int) -> HeadPattern:
    """Arbitrary baseline: deactivate heads ``0..ne-1`` in every layer."""
    if not 0 <= ne <= num_heads:
        raise ValueError(f"ne={ne} outside [0, {num_heads}]")
    return HeadPattern([_zero_row(num_heads, np.arange(ne))] * num_layers)


def ratio_to_counts(head_counts: Sequence[int], ratio: float) -> list:
    return [int(np.floor(ratio * n + 1e-9)) for n in head_counts]


# --- first-order fidelity ---------------------------------------------------


def _head_columns(num_heads: int, width: int, head: int) -> slice:
    step = width // num_heads
    return slice(head * step, (head + 1) * step)


def _zero_head(pairs, layer: int, head: int, num_heads: int) -> list:
    out = []
    for p in pairs:
        q = p.copy()
        if p.layer == layer:
            cols = _head_columns(num_heads, p.A.shape[0], head)
            if p.target == "o":
                q.A.data[cols, :] = 0.0
            else:
                q.B.data[:, cols] = 0.0
        out.append(q)
    return out


def taylor_fidelity_check(weights, pairs, images, labels, layer: int, head: int, patterns=None, quantize=False):
    """Return ``(r_i, delta_L)`` for one head.

    ``r_i`` is the first-order score summed over every adapted target of the
    layer; ``delta_L = L(h_i) - L(h_i = 0)`` comes from zeroing that head's
    adapter slices and re-running the forward pass.
    """
    from .model import model_forward

    num_heads = weights.config.num_heads
    work = [p.copy() for p in pairs]
    for p in work:
        p.A.requires_grad = p.B.requires_grad = True
        p.A.grad = p.B.grad = None
    loss = T.cross_entropy_logits(model_forward(images, weights, work, patterns, quantize), labels)
    T.backward(loss)
    r = 0.0
    for p in work:
        if p.layer != layer:
            continue
        ws, gs = head_slices(p.head_weight(quantize), p.head_grad(), num_heads)[head]
        r += score_head(ws, gs, "taylor_raw")
    with T.no_grad():
        zeroed = _zero_head(pairs, layer, head, num_heads)
        loss0 = T.cross_entropy_logits(model_forward(images, weights, zeroed, patterns, quantize), labels)
    return r, float(loss.item()) - float(loss0.item())
