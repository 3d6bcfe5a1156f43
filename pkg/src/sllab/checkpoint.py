"""Versioned binary containers for models, adapters, baselines, run state.

Model container: magic "SLLAB1", a kind byte (full model vs adapters-only),
config fields as fixed-width little-endian integers, parameter tensors in
declaration order as little-endian float64, then the adapter section.
Loading rejects wrong magic, truncation, and trailing bytes, and never
returns partial state.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import CheckpointError
from .lora import AdaptedModel, LoraAdapter
from .metrics import BaselineEntry, BaselineSnapshot
from .model import Model, ModelConfig, init_model
from .stream import QARecord, ReplayBuffer
from .tensor import Tensor

MODEL_MAGIC = b"SLLAB1"
SNAPSHOT_MAGIC = b"SLLABB1"
RUNSTATE_MAGIC = b"SLLABX1"

KIND_MODEL = 1
KIND_ADAPTERS = 2

_TARGET_CODE = {"w_q": 0, "w_v": 1}
_TARGET_NAME = {v: k for k, v in _TARGET_CODE.items()}


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def bytes_raw(self, data: bytes):
        self.buf.write(data)

    def u8(self, v: int):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v: int):
        self.buf.write(struct.pack("<Q", v))

    def f64(self, v: float):
        self.buf.write(struct.pack("<d", v))

    def u128(self, v: int):
        self.buf.write(v.to_bytes(16, "little"))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf.write(raw)

    def blob(self, data: bytes):
        self.u64(len(data))
        self.buf.write(data)

    def array(self, a: np.ndarray):
        self.buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.label}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def u128(self) -> int:
        return int.from_bytes(self.take(16), "little")

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def blob(self) -> bytes:
        return self.take(self.u64())

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def expect_eof(self):
        if self.pos != len(self.data):
            raise CheckpointError(
                f"{self.label}: {len(self.data) - self.pos} trailing bytes"
            )


# ---------------------------------------------------------------------------
# Model / adapters container


def _write_config(w: _Writer, cfg: ModelConfig):
    w.u32(cfg.vocab_size)
    w.u32(cfg.d_model)
    w.u32(cfg.n_layers)
    w.u32(cfg.n_heads)
    w.u32(cfg.context_len)
    w.u32(cfg.d_ff)
    w.u64(cfg.seed)


def _read_config(r: _Reader) -> ModelConfig:
    vocab = r.u32()
    d_model = r.u32()
    n_layers = r.u32()
    n_heads = r.u32()
    context_len = r.u32()
    d_ff = r.u32()
    seed = r.u64()
    return ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                       context_len=context_len, d_ff=d_ff, seed=seed,
                       vocab_size=vocab)


def _write_adapters(w: _Writer, adapters: list[LoraAdapter]):
    w.u32(len(adapters))
    for ad in adapters:
        w.u32(ad.layer)
        w.u8(_TARGET_CODE[ad.target])
        w.u32(ad.rank)
        w.f64(ad.alpha)
        w.array(ad.a.data)
        w.array(ad.b.data)


def _read_adapters(r: _Reader, d_model: int) -> list[LoraAdapter]:
    count = r.u32()
    adapters = []
    for _ in range(count):
        layer = r.u32()
        code = r.u8()
        if code not in _TARGET_NAME:
            raise CheckpointError(f"{r.label}: unknown adapter target code {code}")
        rank = r.u32()
        alpha = r.f64()
        a = Tensor(r.array((rank, d_model)), requires_grad=True)
        b = Tensor(r.array((d_model, rank)), requires_grad=True)
        adapters.append(LoraAdapter(layer, _TARGET_NAME[code], rank, alpha, a, b))
    return adapters


def model_bytes(model: Model, adapters: list[LoraAdapter] | None = None) -> bytes:
    w = _Writer()
    w.bytes_raw(MODEL_MAGIC)
    w.u8(KIND_MODEL)
    _write_config(w, model.config)
    for _, t in model.parameters():
        w.array(t.data)
    _write_adapters(w, adapters or [])
    return w.getvalue()


def model_from_bytes(data: bytes, label: str = "checkpoint") -> tuple[Model, list[LoraAdapter]]:
    r = _Reader(data, label)
    if r.take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise CheckpointError(f"{label}: bad magic, not a model checkpoint")
    if r.u8() != KIND_MODEL:
        raise CheckpointError(f"{label}: not a full-model checkpoint")
    cfg = _read_config(r)
    model = init_model(cfg)
    for _, t in model.parameters():
        t.data = r.array(t.data.shape)
    adapters = _read_adapters(r, cfg.d_model)
    r.expect_eof()
    return model, adapters


def save_model(model: Model, path, adapters: list[LoraAdapter] | None = None):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model, adapters))


def load_model(path) -> tuple[Model, list[LoraAdapter]]:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), label=str(path))


def save_adapters(config: ModelConfig, adapters: list[LoraAdapter], path):
    """Adapter-only section in the same container, no base parameters."""
    w = _Writer()
    w.bytes_raw(MODEL_MAGIC)
    w.u8(KIND_ADAPTERS)
    _write_config(w, config)
    _write_adapters(w, adapters)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_adapters(path) -> tuple[ModelConfig, list[LoraAdapter]]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, str(path))
    if r.take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    if r.u8() != KIND_ADAPTERS:
        raise CheckpointError(f"{path}: not an adapter-only checkpoint")
    cfg = _read_config(r)
    adapters = _read_adapters(r, cfg.d_model)
    r.expect_eof()
    return cfg, adapters


# ---------------------------------------------------------------------------
# Baseline snapshot


def snapshot_bytes(snapshot: BaselineSnapshot) -> bytes:
    w = _Writer()
    w.bytes_raw(SNAPSHOT_MAGIC)
    items = list(snapshot.items())
    w.u32(len(items))
    for (domain, rec_id), entry in items:
        w.string(domain)
        w.u64(rec_id)
        w.u32(len(entry.answer))
        w.bytes_raw(entry.answer)
        if entry.embedding is None:
            w.u8(0)
        else:
            w.u8(1)
            w.u32(entry.embedding.size)
            w.array(entry.embedding)
    return w.getvalue()


def snapshot_from_bytes(data: bytes, label: str = "baseline") -> BaselineSnapshot:
    r = _Reader(data, label)
    if r.take(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
        raise CheckpointError(f"{label}: bad magic, not a baseline snapshot")
    entries: dict[tuple[str, int], BaselineEntry] = {}
    for _ in range(r.u32()):
        domain = r.string()
        rec_id = r.u64()
        answer = r.take(r.u32())
        emb = None
        if r.u8():
            emb = r.array((r.u32(),))
        entries[(domain, rec_id)] = BaselineEntry(answer, emb)
    r.expect_eof()
    return BaselineSnapshot(entries)


def save_snapshot(snapshot: BaselineSnapshot, path):
    with open(path, "wb") as fh:
        fh.write(snapshot_bytes(snapshot))


def load_snapshot(path) -> BaselineSnapshot:
    with open(path, "rb") as fh:
        return snapshot_from_bytes(fh.read(), label=str(path))


# ---------------------------------------------------------------------------
# Resumable run state


def _write_record(w: _Writer, rec: QARecord):
    w.string(rec.domain)
    w.string(rec.question)
    w.string(rec.answer)
    w.u64(rec.id)


def _read_record(r: _Reader) -> QARecord:
    return QARecord(r.string(), r.string(), r.string(), r.u64())


def _write_buffer(w: _Writer, buffer: ReplayBuffer):
    w.u32(buffer.capacity_per_domain)
    w.u32(len(buffer.seen))
    for domain, count in buffer.seen.items():
        w.string(domain)
        w.u64(count)
    w.u32(len(buffer.reservoirs))
    for domain, records in buffer.reservoirs.items():
        w.string(domain)
        w.u32(len(records))
        for rec in records:
            _write_record(w, rec)
    state = buffer.rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported rng {state['bit_generator']}")
    w.u8(int(state["has_uint32"]))
    w.u32(int(state["uinteger"]))
    w.u128(int(state["state"]["state"]))
    w.u128(int(state["state"]["inc"]))


def _read_buffer(r: _Reader) -> ReplayBuffer:
    capacity = r.u32()
    buffer = ReplayBuffer(capacity, np.random.default_rng(0))
    for _ in range(r.u32()):
        domain = r.string()
        buffer.seen[domain] = r.u64()
    for _ in range(r.u32()):
        domain = r.string()
        buffer.reservoirs[domain] = [_read_record(r) for _ in range(r.u32())]
    has_uint32 = r.u8()
    uinteger = r.u32()
    state = r.u128()
    inc = r.u128()
    buffer.rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    return buffer


def save_run_state(path, adapted: AdaptedModel, buffer: ReplayBuffer,
                   snapshot: BaselineSnapshot | None, next_chunk: int):
    w = _Writer()
    w.bytes_raw(RUNSTATE_MAGIC)
    w.u32(next_chunk)
    w.blob(model_bytes(adapted.base, adapted.adapters))
    _write_buffer(w, buffer)
    if snapshot is None:
        w.u8(0)
    else:
        w.u8(1)
        w.blob(snapshot_bytes(snapshot))
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_run_state(path) -> tuple[AdaptedModel, ReplayBuffer,
                                  BaselineSnapshot | None, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    label = str(path)
    r = _Reader(data, label)
    if r.take(len(RUNSTATE_MAGIC)) != RUNSTATE_MAGIC:
        raise CheckpointError(f"{label}: bad magic, not a run-state checkpoint")
    next_chunk = r.u32()
    model, adapters = model_from_bytes(r.blob(), label=f"{label}[model]")
    model.set_requires_grad(False)
    adapted = AdaptedModel(model, adapters)
    buffer = _read_buffer(r)
    snapshot = None
    if r.u8():
        snapshot = snapshot_from_bytes(r.blob(), label=f"{label}[baseline]")
    r.expect_eof()
    return adapted, buffer, snapshot, next_chunk
