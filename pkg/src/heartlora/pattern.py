"""Per-layer binary head-activation patterns."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class HeadPattern:
    """One 0/1 vector per layer; ``rows[l][i] == 0`` deactivates head ``i`` of layer ``l``.

    Rows may have different lengths (layers with different head counts).
    """

    rows: tuple

    def __init__(self, rows: Sequence):
        fixed = []
        for r in rows:
            arr = np.asarray(r, dtype=np.uint8).reshape(-1)
            if arr.size and arr.max() > 1:
                raise ValueError("head pattern entries must be 0 or 1")
            arr.setflags(write=False)
            fixed.append(arr)
        object.__setattr__(self, "rows", tuple(fixed))

    @classmethod
    def all_ones(cls, num_layers: int, num_heads) -> "HeadPattern":
        counts = [num_heads] * num_layers if np.isscalar(num_heads) else list(num_heads)
        return cls([np.ones(n, dtype=np.uint8) for n in counts])

    @property
    def num_layers(self) -> int:
        return len(self.rows)

    @property
    def head_counts(self) -> list:
        return [int(r.size) for r in self.rows]

    def layer(self, index: int) -> np.ndarray:
        return self.rows[index]

    def zeros_per_layer(self) -> list:
        return [int(r.size - r.sum()) for r in self.rows]

    def deactivated(self, layer: int) -> list:
        return [int(i) for i in np.flatnonzero(self.rows[layer] == 0)]

    def is_all_ones(self) -> bool:
        return all(bool(r.all()) for r in self.rows)

    def as_array(self) -> np.ndarray:
        if len(set(self.head_counts)) > 1:
            raise ValueError("ragged pattern cannot be viewed as a matrix")
        return np.stack(self.rows) if self.rows else np.zeros((0, 0), dtype=np.uint8)

    def as_activation_mask(self, batch: int, tokens: int, head_dim: int) -> np.ndarray:
        """Broadcast to a 5-axis mask ordered (batch, layer, head, token, head-width)."""
        m = self.as_array().astype(np.float32)
        return np.broadcast_to(
            m[None, :, :, None, None], (batch, m.shape[0], m.shape[1], tokens, head_dim)
        ).copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.rows:
            h.update(len(r).to_bytes(4, "little"))
            h.update(r.tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {str(i): [int(v) for v in r] for i, r in enumerate(self.rows)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadPattern":
        return cls([d[k] for k in sorted(d, key=int)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeadPattern):
            return NotImplemented
        return len(self.rows) == len(other.rows) and all(
            np.array_equal(a, b) for a, b in zip(self.rows, other.rows)
        )

    def __hash__(self) -> int:
        return hash(self.digest())
