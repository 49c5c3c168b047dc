"""Checkpoints and exports.

HLRA checkpoint layout (little-endian)::

    magic "HLRA" | version u16 | entry count u32 |
    entries... | crc32 u32

    entry: name_len u16 | name utf-8 | dtype u8 (0=f32, 1=i8, 2=u8) |
           ndim u8 | dims u64[ndim] | payload

The CRC (IEEE polynomial, ``zlib.crc32``) covers every entry byte, i.e.
everything between the 10-byte header and the trailing checksum.

Structured metadata (model config, plan, step counters) travels as u8
entries holding UTF-8 JSON under the ``meta/`` prefix.
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct
import warnings
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .lora import AdapterPair, StoredAdapter
from .model import BackboneWeights, ModelConfig, load_named
from .pattern import HeadPattern
from .responsiveness import ResponsivenessReport
from .tensor import Tensor

MAGIC = b"HLRA"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("int8"): 1, np.dtype("uint8"): 2}


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# --- raw tensor tables ----------------------------------------------------


def encode_table(entries) -> bytes:
    """Serialize ``(name, array)`` pairs; order is preserved."""
    entries = list(entries.items()) if isinstance(entries, dict) else list(entries)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate entry names: {dup}")
    body = bytearray()
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            raise CheckpointError(f"{name}: float64 tensors are not storable (cast to float32)")
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, len(entries))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _parse_header(buf: bytes) -> int:
    if len(buf) < _HEADER.size + 4:
        raise CheckpointError("file too short for an HLRA checkpoint")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = buf[_HEADER.size:-4]
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    return count


def _iter_entries(buf: bytes, count: int):
    off = _HEADER.size
    end = len(buf) - 4
    seen = set()
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
        except struct.error as e:
            raise CheckpointError(f"truncated entry header at offset {off}") from e
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        if name in seen:
            raise CheckpointError(f"duplicate entry name {name!r}")
        seen.add(name)
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off + nbytes > end:
            raise CheckpointError(f"{name}: payload runs past end of file")
        yield name, dt, tuple(int(d) for d in dims), off
        off += nbytes
    if off != end:
        raise CheckpointError(f"{end - off} unexpected bytes after the last entry")


def decode_table(buf: bytes, expect_model: Optional[dict] = None) -> dict:
    """Parse a table. With ``expect_model``, the stored model config is checked
    before any tensor payload is materialized."""
    count = _parse_header(buf)
    index = list(_iter_entries(buf, count))
    if expect_model is not None:
        stored = _meta_from_index(buf, index, "meta/model_config")
        if stored is None or stored != expect_model:
            raise ConfigMismatchError(f"checkpoint model config {stored} does not match expected {expect_model}")
    out = {}
    for name, dt, dims, off in index:
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out


def _meta_from_index(buf, index, key):
    for name, dt, dims, off in index:
        if name == key:
            n = int(np.prod(dims, dtype=np.int64))
            return json.loads(bytes(buf[off:off + n]).decode("utf-8"))
    return None


def json_entry(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def read_json_entry(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def save_table(path, entries) -> None:
    Path(path).write_bytes(encode_table(entries))


def load_table(path, expect_model: Optional[dict] = None) -> dict:
    return decode_table(Path(path).read_bytes(), expect_model)


# --- checkpoints ----------------------------------------------------------


def checkpoint_entries(weights: BackboneWeights, adapters=(), optimizer_state=None, pattern: Optional[HeadPattern] = None,
                       plan=None, extra: Optional[dict] = None, score_grads: Optional[dict] = None) -> list:
    entries = [("meta/model_config", json_entry(weights.config.to_dict()))]
    if plan is not None:
        entries.append(("meta/plan", json_entry(plan.to_dict() if hasattr(plan, "to_dict") else plan)))
    meta = dict(extra or {})
    meta["adapters"] = [{"layer": p.layer, "target": p.target, "scale": p.scale, "rank": p.rank} for p in adapters]
    if optimizer_state is not None:
        meta["optimizer_step"] = int(optimizer_state.t)
    entries.append(("meta/run", json_entry(meta)))
    for name, t in weights.named_tensors():
        entries.append((f"backbone/{name}", np.asarray(t.data, dtype=np.float32)))
    for p in adapters:
        entries.append((f"adapter/{p.layer}/{p.target}/A", np.asarray(p.A.data, dtype=np.float32)))
        entries.append((f"adapter/{p.layer}/{p.target}/B", np.asarray(p.B.data, dtype=np.float32)))
    if optimizer_state is not None:
        for i, (m, v) in enumerate(zip(optimizer_state.m, optimizer_state.v)):
            entries.append((f"optim/{i}/m", np.asarray(m, dtype=np.float32)))
            entries.append((f"optim/{i}/v", np.asarray(v, dtype=np.float32)))
    if score_grads:
        for (layer, target), g in score_grads.items():
            entries.append((f"scoregrad/{layer}/{target}", np.asarray(g, dtype=np.float32)))
    if pattern is not None:
        rows = pattern.rows
        for i, r in enumerate(rows):
            entries.append((f"pattern/{i}", np.asarray(r, dtype=np.uint8)))
    return entries


def save_checkpoint(path, weights: BackboneWeights, adapters=(), optimizer_state=None, pattern=None, plan=None,
                    extra: Optional[dict] = None, score_grads: Optional[dict] = None) -> None:
    save_table(path, checkpoint_entries(weights, adapters, optimizer_state, pattern, plan, extra, score_grads))


class Checkpoint:
    """Decoded checkpoint with typed accessors."""

    def __init__(self, table: dict):
        self.table = table
        self.model_config = ModelConfig.from_dict(read_json_entry(table["meta/model_config"]))
        self.plan = read_json_entry(table["meta/plan"]) if "meta/plan" in table else None
        self.meta = read_json_entry(table["meta/run"]) if "meta/run" in table else {}

    def weights(self, train_classifier: bool = False) -> BackboneWeights:
        arrays = {k[len("backbone/"):]: v for k, v in self.table.items() if k.startswith("backbone/")}
        w = load_named(self.model_config, arrays)
        w.freeze(train_classifier=train_classifier)
        return w

    def adapters(self, requires_grad: bool = False) -> list:
        out = []
        for spec in self.meta.get("adapters", []):
            base = f"adapter/{spec['layer']}/{spec['target']}"
            a, b = self.table[f"{base}/A"], self.table[f"{base}/B"]
            out.append(
                AdapterPair(
                    A=Tensor(a, requires_grad=requires_grad, dtype=a.dtype),
                    B=Tensor(b, requires_grad=requires_grad, dtype=b.dtype),
                    scale=float(spec["scale"]),
                    rank=int(spec["rank"]),
                    target=spec["target"],
                    layer=int(spec["layer"]),
                )
            )
        return out

    def pattern(self) -> Optional[HeadPattern]:
        keys = sorted((k for k in self.table if k.startswith("pattern/")), key=lambda k: int(k.split("/")[1]))
        if not keys:
            return None
        return HeadPattern([self.table[k] for k in keys])

    def score_grads(self) -> dict:
        out = {}
        for k, v in self.table.items():
            if k.startswith("scoregrad/"):
                _, layer, target = k.split("/")
                out[(int(layer), target)] = v.astype(np.float64)
        return out

    def optimizer_state(self):
        from .training import AdamWState

        n = len([k for k in self.table if k.startswith("optim/") and k.endswith("/m")])
        if n == 0:
            return None
        return AdamWState(
            [self.table[f"optim/{i}/m"].copy() for i in range(n)],
            [self.table[f"optim/{i}/v"].copy() for i in range(n)],
            int(self.meta.get("optimizer_step", 0)),
        )


def load_checkpoint(path, expect_model: Optional[ModelConfig] = None) -> Checkpoint:
    return Checkpoint(load_table(path, expect_model.to_dict() if expect_model is not None else None))


def save_stored_adapters(path, stored, model_config: ModelConfig) -> None:
    """Persist pruned adapters (deactivated heads' slices omitted)."""
    entries = [("meta/model_config", json_entry(model_config.to_dict()))]
    meta = []
    for s in stored:
        base = f"stored/{s.layer}/{s.target}"
        meta.append({"layer": s.layer, "target": s.target, "scale": s.scale, "rank": s.rank,
                     "kept_heads": list(s.kept_heads), "num_heads": s.num_heads, "width": s.width})
        entries.append((f"{base}/A", np.asarray(s.A, dtype=np.float32)))
        entries.append((f"{base}/B", np.asarray(s.B, dtype=np.float32)))
    entries.insert(1, ("meta/stored", json_entry(meta)))
    save_table(path, entries)


def load_stored_adapters(path) -> list:
    table = load_table(path)
    out = []
    for m in read_json_entry(table["meta/stored"]):
        base = f"stored/{m['layer']}/{m['target']}"
        out.append(StoredAdapter(m["layer"], m["target"], m["scale"], m["rank"], table[f"{base}/A"],
                                 table[f"{base}/B"], tuple(m["kept_heads"]), m["num_heads"], m["width"]))
    return out


# --- exports --------------------------------------------------------------


def export_responsiveness_csv(report: ResponsivenessReport, path) -> None:
    """``layer,head,score,criterion,mode`` rows, layer-major, 9 significant digits."""
    buf = _io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "head", "score", "criterion", "mode"])
    for layer, row in enumerate(report.scores):
        for head, score in enumerate(row):
            w.writerow([layer, head, f"{float(score):.9g}", report.criterion, report.mode])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_responsiveness_csv(path) -> ResponsivenessReport:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError("empty responsiveness CSV")
    layers: dict = {}
    for r in rows:
        layers.setdefault(int(r["layer"]), {})[int(r["head"])] = float(r["score"])
    scores = [[layers[l][h] for h in sorted(layers[l])] for l in sorted(layers)]
    return ResponsivenessReport(scores, rows[0]["criterion"], rows[0]["mode"])


def export_pattern(pattern: HeadPattern, path) -> None:
    Path(path).write_text(json.dumps(pattern.to_dict(), indent=1) + "\n", encoding="utf-8")


def read_pattern(path) -> HeadPattern:
    return HeadPattern.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cls_attention_maps(weights, adapters, pattern, image, quantize: bool = False) -> tuple:
    """Per layer, CLS-to-patch attention averaged over active heads, as (grid, grid) arrays.

    Returns ``(maps, warnings)`` where ``warnings`` lists layers whose heads
    were all deactivated (their map is all zeros).
    """
    from . import tensor as T
    from .model import model_forward

    cfg = weights.config
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != 1:
        raise ValueError("attention export takes a single sample")
    attn: list = []
    with T.no_grad():
        model_forward(img, weights, adapters, pattern, quantize, attn_out=attn)
    g = cfg.image_size // cfg.patch_size
    maps, flagged = [], []
    for layer, a in enumerate(attn):
        cls_row = a[0, :, 0, 1:].astype(np.float64)  # (heads, patches)
        active = np.ones(cfg.num_heads, dtype=bool) if pattern is None else pattern.layer(layer).astype(bool)
        if not active.any():
            maps.append(np.zeros((g, g)))
            flagged.append(layer)
            continue
        maps.append(cls_row[active].mean(axis=0).reshape(g, g))
    return maps, flagged


def _pgm_bytes(grid: np.ndarray) -> bytes:
    h, w = grid.shape
    peak = float(grid.max()) if grid.size else 0.0
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak * 255.0
    pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def export_attention_maps(weights, adapters, pattern, sample, path, quantize: bool = False) -> dict:
    """Write ``layer{i}.csv`` and ``layer{i}.pgm`` per layer plus ``meta.json`` into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    maps, flagged = cls_attention_maps(weights, adapters, pattern, sample, quantize)
    for i, grid in enumerate(maps):
        lines = [",".join(f"{v:.9g}" for v in row) for row in grid]
        (out / f"layer{i}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / f"layer{i}.pgm").write_bytes(_pgm_bytes(grid))
    meta = {"layers": len(maps), "all_heads_masked": flagged, "warning": bool(flagged)}
    if flagged:
        warnings.warn(f"all heads deactivated in layers {flagged}; exported zero maps", RuntimeWarning)
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return {"maps": maps, **meta}


def attention_similarity(maps_a, maps_b) -> list:
    """Cosine similarity per layer between two sets of attention maps."""
    out = []
    for a, b in zip(maps_a, maps_b):
        a, b = np.ravel(a), np.ravel(b)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        out.append(float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0)
    return out


def write_run_record(record, directory) -> None:
    """``epochs.jsonl`` (one line per epoch) and ``summary.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "epochs.jsonl", "w", encoding="utf-8") as f:
        for e in record.epochs:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    summary = record.to_dict()
    summary.pop("epochs")
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
