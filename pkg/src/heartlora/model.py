"""Tiny Vision Transformer with maskable attention heads.

Blocks are pre-norm: ``x + MHSA(LN(x))`` then ``x + MLP(LN(x))``. Attention
logits are scaled by ``sqrt(head_dim)``. A head pattern multiplies each head's
value output (before the output projection) by 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .lora import by_layer, effective_weight
from .pattern import HeadPattern
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_heads: int = 8
    num_layers: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    qkv_bias: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "num_heads", "num_layers", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def vit_base(cls, num_classes: int = 10) -> "ModelConfig":
        return cls(image_size=224, patch_size=16, embed_dim=768, num_heads=12, num_layers=12, num_classes=num_classes)


PROJECTIONS = ("q", "k", "v", "o")


@dataclass
class LayerWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    b_q: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    b_o: Optional[Tensor] = None

    def proj(self, target: str) -> Tensor:
        return getattr(self, f"w_{target}")

    def bias(self, target: str) -> Optional[Tensor]:
        return getattr(self, f"b_{target}")

    def named(self, prefix: str) -> list:
        out = []
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                out.append((f"{prefix}{f.name}", t))
        return out


@dataclass
class BackboneWeights:
    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos: Tensor
    layers: list
    lnf_g: Tensor
    lnf_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> list:
        """(name, tensor) in a fixed order; classifier entries are prefixed ``head.``."""
        out = [
            ("patch_w", self.patch_w),
            ("patch_b", self.patch_b),
            ("cls_token", self.cls_token),
            ("pos", self.pos),
        ]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layers.{i}."))
        out += [("lnf_g", self.lnf_g), ("lnf_b", self.lnf_b), ("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def classifier(self) -> list:
        return [self.head_w, self.head_b]

    def frozen_tensors(self) -> list:
        return [t for name, t in self.named_tensors() if not name.startswith("head.")]

    def freeze(self, train_classifier: bool = True) -> None:
        for name, t in self.named_tensors():
            t.requires_grad = train_classifier and name.startswith("head.")
            t.grad = None

    def unfreeze(self) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = True

    def checksum(self, include_classifier: bool = False) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_tensors():
            if name.startswith("head.") and not include_classifier:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "BackboneWeights":
        return load_named(self.config, {n: t.data.copy() for n, t in self.named_tensors()}, requires_grad={n: t.requires_grad for n, t in self.named_tensors()})

    def astype(self, dtype) -> "BackboneWeights":
        return load_named(self.config, {n: t.data.astype(dtype) for n, t in self.named_tensors()}, requires_grad={n: t.requires_grad for n, t in self.named_tensors()})


def _randn(rng, shape, std, dtype):
    return (rng.normal(0.0, std, size=shape)).astype(dtype)


def init_backbone(config: ModelConfig, seed: int = 0, requires_grad: bool = True) -> BackboneWeights:
    """Truncation-free Gaussian init (std 0.02 for projections, 1/sqrt(fan_in) for MLP)."""
    rng = np.random.default_rng([seed, 0xB0])
    dt = T.default_dtype()
    c, m = config.embed_dim, config.mlp_dim

    def P(arr, name):
        return Tensor(arr, requires_grad=requires_grad, name=name, dtype=dt)

    layers = []
    for i in range(config.num_layers):
        kw = dict(
            ln1_g=P(np.ones(c), f"layers.{i}.ln1_g"),
            ln1_b=P(np.zeros(c), f"layers.{i}.ln1_b"),
            w_q=P(_randn(rng, (c, c), 1 / math.sqrt(c), dt), f"layers.{i}.w_q"),
            w_k=P(_randn(rng, (c, c), 1 / math.sqrt(c), dt), f"layers.{i}.w_k"),
            w_v=P(_randn(rng, (c, c), 1 / math.sqrt(c), dt), f"layers.{i}.w_v"),
            w_o=P(_randn(rng, (c, c), 1 / math.sqrt(c), dt), f"layers.{i}.w_o"),
            ln2_g=P(np.ones(c), f"layers.{i}.ln2_g"),
            ln2_b=P(np.zeros(c), f"layers.{i}.ln2_b"),
            fc1_w=P(_randn(rng, (c, m), 1 / math.sqrt(c), dt), f"layers.{i}.fc1_w"),
            fc1_b=P(np.zeros(m), f"layers.{i}.fc1_b"),
            fc2_w=P(_randn(rng, (m, c), 1 / math.sqrt(m), dt), f"layers.{i}.fc2_w"),
            fc2_b=P(np.zeros(c), f"layers.{i}.fc2_b"),
        )
        if config.qkv_bias:
            for t in PROJECTIONS:
                kw[f"b_{t}"] = P(np.zeros(c), f"layers.{i}.b_{t}")
        layers.append(LayerWeights(**kw))
    return BackboneWeights(
        config=config,
        patch_w=P(_randn(rng, (config.patch_dim, c), 1 / math.sqrt(config.patch_dim), dt), "patch_w"),
        patch_b=P(np.zeros(c), "patch_b"),
        cls_token=P(_randn(rng, (1, c), 0.02, dt), "cls_token"),
        pos=P(_randn(rng, (config.num_tokens, c), 0.02, dt), "pos"),
        layers=layers,
        lnf_g=P(np.ones(c), "lnf_g"),
        lnf_b=P(np.zeros(c), "lnf_b"),
        head_w=P(np.zeros((c, config.num_classes)), "head.w"),
        head_b=P(np.zeros(config.num_classes), "head.b"),
    )


def reset_classifier(weights: BackboneWeights, num_classes: int, seed: int = 0) -> BackboneWeights:
    """Attach a fresh classifier head (small Gaussian weights, zero bias)."""
    import dataclasses

    rng = np.random.default_rng([seed, 0xC1])
    dt = weights.patch_w.data.dtype
    c = weights.config.embed_dim
    cfg = dataclasses.replace(weights.config, num_classes=num_classes)
    weights.config = cfg
    weights.head_w = Tensor(_randn(rng, (c, num_classes), 0.02, dt), requires_grad=True, name="head.w", dtype=dt)
    weights.head_b = Tensor(np.zeros(num_classes), requires_grad=True, name="head.b", dtype=dt)
    return weights


def load_named(config: ModelConfig, arrays: dict, requires_grad=False) -> BackboneWeights:
    """Build weights from a ``{name: array}`` table as produced by ``named_tensors``."""

    def P(name):
        if name not in arrays:
            raise KeyError(f"missing backbone tensor {name!r}")
        rg = requires_grad.get(name, False) if isinstance(requires_grad, dict) else requires_grad
        arr = arrays[name]
        return Tensor(arr, requires_grad=rg, name=name, dtype=arr.dtype)

    layers = []
    for i in range(config.num_layers):
        kw = {}
        for f in fields(LayerWeights):
            name = f"layers.{i}.{f.name}"
            if name in arrays:
                kw[f.name] = P(name)
        layers.append(LayerWeights(**kw))
    return BackboneWeights(
        config=config,
        patch_w=P("patch_w"),
        patch_b=P("patch_b"),
        cls_token=P("cls_token"),
        pos=P("pos"),
        layers=layers,
        lnf_g=P("lnf_g"),
        lnf_b=P("lnf_b"),
        head_w=P("head.w"),
        head_b=P("head.b"),
    )


# --- forward --------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(b, ch, H, W) -> (b, num_patches, ch*patch*patch), patches in row-major order."""
    b, ch, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, ch, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, ch * patch * patch))


def _pattern_row(pattern, layer: int, num_heads: int) -> Optional[np.ndarray]:
    if pattern is None:
        return None
    row = pattern.layer(layer) if isinstance(pattern, HeadPattern) else np.asarray(pattern)
    if row.shape != (num_heads,):
        raise ConfigError(f"head pattern for layer {layer} has {row.size} entries, expected {num_heads}")
    return row


def mhsa_forward(
    x: Tensor,
    layer: LayerWeights,
    adapters: Optional[dict],
    pattern_row,
    num_heads: int,
    quantize: bool = False,
    attn_out: Optional[list] = None,
) -> Tensor:
    """Masked multi-head self-attention for ``x`` of shape (b, t, C) or (t, C).

    ``adapters`` maps target name -> AdapterPair for this layer. ``pattern_row``
    is None (no masking) or a length-``num_heads`` 0/1 vector.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, t, c = x.shape
    if c % num_heads:
        raise ConfigError(f"width {c} not divisible by {num_heads} heads")
    hd = c // num_heads
    if pattern_row is not None:
        pattern_row = np.asarray(pattern_row)
        if pattern_row.shape != (num_heads,):
            raise ConfigError(f"head pattern has {pattern_row.size} entries, expected {num_heads}")
    adapters = adapters or {}

    def project(target: str, inp: Tensor) -> Tensor:
        w = effective_weight(layer.proj(target), adapters.get(target), quantize)
        y = T.matmul(inp, w)
        bias = layer.bias(target)
        return T.broadcast_add_bias(y, bias) if bias is not None else y

    q = T.permute(T.reshape(project("q", x), (b, t, num_heads, hd)), (0, 2, 1, 3))
    k = T.permute(T.reshape(project("k", x), (b, t, num_heads, hd)), (0, 2, 3, 1))
    v = T.permute(T.reshape(project("v", x), (b, t, num_heads, hd)), (0, 2, 1, 3))
    # 1/sqrt(head_dim) applied to q: same logits, smaller tensor than the score matrix
    scores = T.matmul(T.scale(q, 1.0 / math.sqrt(hd)), k)
    attn = T.softmax_rows(scores)
    if attn_out is not None:
        attn_out.append(attn.data)
    heads = T.matmul(attn, v)
    if pattern_row is not None:
        mask = Tensor(pattern_row.astype(heads.data.dtype).reshape(1, num_heads, 1, 1), dtype=heads.data.dtype)
        heads = T.mul(heads, mask)
    merged = T.reshape(T.permute(heads, (0, 2, 1, 3)), (b, t, c))
    out = project("o", merged)
    if squeeze:
        out = T.reshape(out, (t, c))
    return out


def mlp_forward(x: Tensor, layer: LayerWeights) -> Tensor:
    h = T.gelu(T.broadcast_add_bias(T.matmul(x, layer.fc1_w), layer.fc1_b))
    return T.broadcast_add_bias(T.matmul(h, layer.fc2_w), layer.fc2_b)


def embed(images, weights: BackboneWeights) -> Tensor:
    cfg = weights.config
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    if imgs.ndim != 4 or imgs.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise T.DimensionError(
            f"images {imgs.shape} do not match (b, {cfg.channels}, {cfg.image_size}, {cfg.image_size})"
        )
    b = imgs.shape[0]
    dt = weights.patch_w.data.dtype
    patches = Tensor(patchify(imgs.astype(dt, copy=False), cfg.patch_size), dtype=dt)
    tok = T.broadcast_add_bias(T.matmul(patches, weights.patch_w), weights.patch_b)
    cls = T.reshape(weights.cls_token, (1, 1, cfg.embed_dim))
    ones = Tensor(np.ones((b, 1, 1), dtype=dt), dtype=dt)
    cls_b = T.mul(ones, cls)
    tokens = T.concat([cls_b, tok], axis=1)
    return T.embedding_add(tokens, weights.pos)


def model_forward(
    images,
    weights: BackboneWeights,
    adapters=None,
    patterns: Optional[HeadPattern] = None,
    quantize: bool = False,
    attn_out: Optional[list] = None,
) -> Tensor:
    """Logits (b, num_classes) read out from the CLS token.

    ``patterns=None`` takes the unmasked code path; ``attn_out``, if a list,
    receives each layer's attention probabilities (b, heads, t, t).
    """
    cfg = weights.config
    if patterns is not None and patterns.num_layers != cfg.num_layers:
        raise ConfigError(f"pattern covers {patterns.num_layers} layers, model has {cfg.num_layers}")
    per_layer = by_layer(adapters)
    x = embed(images, weights)
    for i, layer in enumerate(weights.layers):
        h = T.layer_norm(x, layer.ln1_g, layer.ln1_b, cfg.ln_eps)
        row = _pattern_row(patterns, i, cfg.num_heads)
        x = T.add(x, mhsa_forward(h, layer, per_layer.get(i), row, cfg.num_heads, quantize, attn_out))
        h = T.layer_norm(x, layer.ln2_g, layer.ln2_b, cfg.ln_eps)
        x = T.add(x, mlp_forward(h, layer))
    cls = T.take(x, 0, axis=1)
    cls = T.layer_norm(cls, weights.lnf_g, weights.lnf_b, cfg.ln_eps)
    return T.broadcast_add_bias(T.matmul(cls, weights.head_w), weights.head_b)


# --- cost accounting ------------------------------------------------------


def count_flops(config: ModelConfig, patterns: Optional[HeadPattern] = None, batch: int = 1) -> dict:
    """Analytic forward FLOPs (2 per multiply-add), split by path.

    ``value_output`` covers the V projection, attention-weighted sum and the
    output projection. ``query_key`` covers Q/K projections and the score
    matrix. Both count only active heads, since a deactivated head's work can
    be skipped entirely.
    """
    t, c, hd = config.num_tokens, config.embed_dim, config.head_dim
    active = []
    for i in range(config.num_layers):
        row = _pattern_row(patterns, i, config.num_heads)
        active.append(config.num_heads if row is None else int(np.sum(row)))
    qk = vo = 0
    for a in active:
        qk += a * (2 * 2 * t * c * hd + 2 * t * t * hd)
        vo += a * (2 * t * c * hd + 2 * t * t * hd + 2 * t * hd * c)
    mlp = config.num_layers * 2 * 2 * t * c * config.mlp_dim
    emb = 2 * config.num_patches * config.patch_dim * c
    head = 2 * c * config.num_classes
    out = {"query_key": qk, "value_output": vo, "mlp": mlp, "embed": emb, "classifier": head}
    out = {k: v * batch for k, v in out.items()}
    out["total"] = sum(out.values())
    out["active_heads"] = active
    return out
