"""Low-rank adapters on attention projections, plus int8 adapter quantization.

An adapter on projection ``H0`` (C x C) contributes ``H = H0 + s * A @ B`` with
``A`` (C x d) and ``B`` (d x C). ``B`` starts at zero, so a freshly initialized
adapter leaves the frozen forward untouched.

Quantization is symmetric per-tensor int8: ``scale = max|x| / 127`` and
``q = clip(round(x / scale), -127, 127)``. During training the forward uses
the dequantized factors and gradients pass straight through to the fp32
masters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .pattern import HeadPattern
from .tensor import Tensor

TARGETS = ("q", "k", "v", "o")
DEFAULT_TARGETS = ("q", "v")
DEFAULT_RANK = 8
SCALE_SEARCH_SPACE = (0.01, 0.1, 1.0, 10.0, 100.0)
INIT_STD = 0.02


@dataclass
class AdapterPair:
    A: Tensor
    B: Tensor
    scale: float
    rank: int
    target: str
    layer: int

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown adapter target {self.target!r}")
        c, d = self.A.shape
        if self.B.shape != (d, c) or d != self.rank:
            raise T.DimensionError(f"adapter factors {self.A.shape} / {self.B.shape} do not match rank {self.rank}")

    @property
    def key(self) -> tuple:
        return (self.layer, self.target)

    def parameters(self) -> list:
        return [self.A, self.B]

    @property
    def head_axis_factor(self) -> str:
        """Which factor carries head structure in its columns (after orientation).

        q/k/v outputs are split column-wise into heads, so B's columns map to
        heads. The output projection consumes heads on its input side, so for
        target ``o`` the head structure lives in the rows of A.
        """
        return "A" if self.target == "o" else "B"

    def head_weight(self, quantize: bool = False) -> np.ndarray:
        """Head-structured factor oriented as (d x C)."""
        if self.target == "o":
            w = dequantize(quantize_array(self.A.data)) if quantize else self.A.data
            return w.T
        return dequantize(quantize_array(self.B.data)) if quantize else self.B.data

    def head_grad(self) -> Optional[np.ndarray]:
        g = self.A.grad if self.target == "o" else self.B.grad
        if g is None:
            return None
        return g.T if self.target == "o" else g

    def copy(self) -> "AdapterPair":
        return AdapterPair(
            A=Tensor(self.A.data.copy(), requires_grad=self.A.requires_grad, dtype=self.A.data.dtype),
            B=Tensor(self.B.data.copy(), requires_grad=self.B.requires_grad, dtype=self.B.data.dtype),
            scale=self.scale,
            rank=self.rank,
            target=self.target,
            layer=self.layer,
        )


def init_adapters(
    config,
    targets: Iterable[str] = DEFAULT_TARGETS,
    rank: int = DEFAULT_RANK,
    scale: float = 1.0,
    seed: int = 0,
) -> list:
    """One adapter pair per (layer, target). A ~ N(0, 0.02^2), B = 0."""
    if rank < 1:
        raise ValueError("adapter rank must be >= 1")
    c = config.embed_dim
    if rank > c // 2:
        raise ValueError(f"adapter rank {rank} exceeds embed_dim/2 = {c // 2}")
    targets = [t for t in TARGETS if t in set(targets)]
    if not targets:
        raise ValueError("at least one adapter target is required")
    rng = np.random.default_rng([seed, 0x10A])
    dtype = T.default_dtype()
    pairs = []
    for layer in range(config.num_layers):
        for target in targets:
            a = rng.normal(0.0, INIT_STD, size=(c, rank)).astype(dtype)
            b = np.zeros((rank, c), dtype=dtype)
            pairs.append(
                AdapterPair(
                    A=Tensor(a, requires_grad=True, name=f"adapter/{layer}/{target}/A"),
                    B=Tensor(b, requires_grad=True, name=f"adapter/{layer}/{target}/B"),
                    scale=float(scale),
                    rank=rank,
                    target=target,
                    layer=layer,
                )
            )
    return pairs


def by_layer(pairs: Optional[Sequence[AdapterPair]]) -> dict:
    out: dict = {}
    for p in pairs or ():
        slot = out.setdefault(p.layer, {})
        if p.target in slot:
            raise ValueError(f"duplicate adapter for layer {p.layer} target {p.target}")
        slot[p.target] = p
    return out


def fake_quant(t: Tensor) -> Tensor:
    """int8 quantize-dequantize in forward; identity gradient."""
    return T.straight_through(t, lambda x: dequantize(quantize_array(x)), "fake_quant")


def effective_weight(h0: Tensor, pair: Optional[AdapterPair], quantize: bool = False) -> Tensor:
    """``H0 + s * A @ B``; gradients reach only A and B (H0 is frozen)."""
    if pair is None:
        return h0
    if h0.shape != (pair.A.shape[0], pair.B.shape[1]):
        raise T.DimensionError(f"base weight {h0.shape} vs adapter {pair.A.shape} @ {pair.B.shape}")
    a, b = pair.A, pair.B
    if quantize:
        a, b = fake_quant(a), fake_quant(b)
    return T.add(h0, T.scale(T.matmul(a, b), pair.scale))


def trainable_count(pairs: Sequence[AdapterPair]) -> int:
    return int(sum(p.A.data.size + p.B.data.size for p in pairs))


# --- quantization ---------------------------------------------------------


@dataclass
class QuantizedAdapter:
    q_values: np.ndarray
    scale: float
    shape: tuple

    def nbytes(self) -> int:
        return int(self.q_values.nbytes) + 4


def quantize_array(x: np.ndarray) -> QuantizedAdapter:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    x64 = x.astype(np.float64)
    peak = float(np.max(np.abs(x64))) if x.size else 0.0
    s = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(x64 / s), -127, 127).astype(np.int8)
    return QuantizedAdapter(q_values=q, scale=s, shape=tuple(x.shape))


def dequantize(q: QuantizedAdapter, dtype=None) -> np.ndarray:
    dtype = dtype or T.default_dtype()
    return (q.q_values.astype(np.float64) * q.scale).astype(dtype).reshape(q.shape)


def quantize(pair: AdapterPair) -> tuple:
    """Quantize both factors of a pair: returns (A_q, B_q)."""
    return quantize_array(pair.A.data), quantize_array(pair.B.data)


# --- pruned storage -------------------------------------------------------


@dataclass
class StoredAdapter:
    """Adapter with the head-structured slices of deactivated heads dropped."""

    layer: int
    target: str
    scale: float
    rank: int
    A: np.ndarray
    B: np.ndarray
    kept_heads: tuple
    num_heads: int
    width: int
    meta: dict = field(default_factory=dict)

    def nbytes(self) -> int:
        return int(self.A.nbytes + self.B.nbytes)

    @property
    def pruned_factor(self) -> str:
        return "A" if self.target == "o" else "B"


def _head_columns(heads: Sequence[int], head_dim: int) -> np.ndarray:
    if not heads:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(h * head_dim, (h + 1) * head_dim) for h in heads])


def merge_for_storage(pairs: Sequence[AdapterPair], pattern: HeadPattern, num_heads: int) -> list:
    """Drop deactivated heads' B columns (A rows for target ``o``) from storage."""
    out = []
    for p in pairs:
        if p.layer >= pattern.num_layers or pattern.layer(p.layer).size != num_heads:
            raise ValueError(f"pattern does not cover layer {p.layer} with {num_heads} heads")
        c = p.A.shape[0]
        if c % num_heads:
            raise T.DimensionError(f"width {c} not divisible by {num_heads} heads")
        hd = c // num_heads
        kept = tuple(int(i) for i in np.flatnonzero(pattern.layer(p.layer)))
        cols = _head_columns(kept, hd)
        if p.target == "o":
            a, b = p.A.data[cols, :].copy(), p.B.data.copy()
        else:
            a, b = p.A.data.copy(), p.B.data[:, cols].copy()
        out.append(StoredAdapter(p.layer, p.target, p.scale, p.rank, a, b, kept, num_heads, c))
    return out


def restore_from_storage(stored: Sequence[StoredAdapter], requires_grad: bool = False) -> list:
    """Rebuild full-width pairs; dropped head slices come back as zeros."""
    pairs = []
    for s in stored:
        hd = s.width // s.num_heads
        cols = _head_columns(s.kept_heads, hd)
        if s.target == "o":
            a = np.zeros((s.width, s.rank), dtype=s.A.dtype)
            a[cols, :] = s.A
            b = s.B.copy()
        else:
            a = s.A.copy()
            b = np.zeros((s.rank, s.width), dtype=s.B.dtype)
            b[:, cols] = s.B
        pairs.append(
            AdapterPair(
                A=Tensor(a, requires_grad=requires_grad, dtype=a.dtype),
                B=Tensor(b, requires_grad=requires_grad, dtype=b.dtype),
                scale=s.scale,
                rank=s.rank,
                target=s.target,
                layer=s.layer,
            )
        )
    return pairs
