"""ESCK checkpoint format and conversion to/from pipeline state.

Layout (little-endian)::

    magic "ESCK" | version u16
    count u32 | count x (name_len u16 | utf-8 name | rank u8 | dims u32[rank])
    payload: float32 values of every entry, manifest order
    checksum u64: blake2b-64 of the payload
    meta_len u32 | meta: UTF-8 JSON (sorted keys)

Tensor names are ``<group>/<dotted path>``; the JSON block carries the adapter
specs, stage config, optimizer and teacher scalars, rng stream states, the
trainability mask and the epoch counter.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from essa.errors import ConfigError, FormatError
from essa.model import ModelState
from essa.optim import OptimizerState
from essa.peft import spec_from_dict, spec_to_dict
from essa.pipeline import RngStreams, RunState, StageConfig
from essa.ssl import AugConfig, SSLConfig, TeacherState
from essa.tensor import Tensor
from essa.vit import ViTConfig

MAGIC = b"ESCK"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def to_bytes(ckpt: Checkpoint) -> bytes:
    head = [MAGIC, struct.pack("<HI", VERSION, len(ckpt.tensors))]
    chunks = []
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value)
        encoded = name.encode("utf-8")
        head.append(struct.pack("<H", len(encoded)) + encoded)
        head.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(head) + payload + struct.pack("<QI", checksum(payload), len(meta)) + meta


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"length: {what} at offset {self.pos} needs {size} bytes, only {len(self.buf) - self.pos} left"
            )
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"length: {what} at offset {self.pos} needs {size} bytes, only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + size]
        self.pos += size
        return out


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    (magic,) = r.take("<4s", "magic")
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r} at offset 0, found {magic!r}")
    (version,) = r.take("<H", "version")
    if version != VERSION:
        raise FormatError(f"version: expected {VERSION} at offset 4, found {version}")
    (count,) = r.take("<I", "entry count")
    manifest = []
    for i in range(count):
        (n,) = r.take("<H", f"name length of entry {i}")
        try:
            name = r.raw(n, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"name: entry {i} at offset {r.pos - n} is not valid UTF-8") from exc
        (rank,) = r.take("<B", f"rank of {name}")
        dims = r.take(f"<{rank}I", f"dims of {name}")
        manifest.append((name, tuple(dims)))
    start = r.pos
    tensors = {}
    for name, dims in manifest:
        size = int(np.prod(dims, dtype=np.int64)) * 4
        data = np.frombuffer(r.raw(size, f"payload of {name}"), dtype="<f4")
        tensors[name] = data.astype(np.float64).reshape(dims)
    payload = buf[start:r.pos]
    (stored,) = r.take("<Q", "checksum")
    if stored != checksum(payload):
        raise FormatError(f"checksum: payload checksum mismatch at offset {r.pos - 8}")
    (meta_len,) = r.take("<I", "metadata length")
    meta_bytes = r.raw(meta_len, "metadata")
    if r.pos != len(buf):
        raise FormatError(f"length: expected {r.pos} bytes, got {len(buf)}")
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata: unreadable JSON at offset {r.pos - meta_len}: {exc}") from exc
    return Checkpoint(tensors, meta)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# conversion


def _put(tensors: dict, group: str, tree: Mapping[str, Tensor] | None) -> None:
    for name, p in (tree or {}).items():
        tensors[f"{group}/{name}"] = p.data


def _get(tensors: Mapping[str, np.ndarray], group: str) -> dict[str, Tensor]:
    prefix = group + "/"
    return {name[len(prefix):]: Tensor(v.copy()) for name, v in tensors.items() if name.startswith(prefix)}


def _mask_to_json(mask: Mapping) -> dict:
    return {n: (bool(e) if isinstance(e, (bool, np.bool_)) else [int(i) for i in e]) for n, e in mask.items()}


def _mask_from_json(d: Mapping) -> dict:
    return {n: (e if isinstance(e, bool) else np.asarray(e, dtype=np.int64)) for n, e in d.items()}


def stage_config_to_dict(cfg: StageConfig) -> dict:
    d = asdict(cfg)
    d["aug"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["aug"].items()}
    return d


def stage_config_from_dict(d: Mapping) -> StageConfig:
    d = dict(d)
    d["ssl"] = SSLConfig(**d["ssl"])
    d["aug"] = AugConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["aug"].items()})
    return StageConfig(**d)


def model_meta(model: ModelState) -> dict:
    return {"vit": model.config.to_dict(), "adapters": [spec_to_dict(s) for s in model.adapters]}


def model_checkpoint(model: ModelState, head: Mapping[str, Tensor] | None = None, stage: str = "model") -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    _put(tensors, "model", model.parameters())
    _put(tensors, "head", head)
    return Checkpoint(tensors, {"stage": stage, **model_meta(model)})


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[ModelState, dict | None]:
    """(model, prediction head or None) from any checkpoint."""
    meta = ckpt.meta
    try:
        config = ViTConfig(**meta["vit"])
        adapters = [spec_from_dict(s) for s in meta.get("adapters", [])]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"metadata: missing or malformed model description ({exc})") from exc
    params = _get(ckpt.tensors, "model")
    injected = {n: p for n, p in params.items() if n.startswith("adapter.")}
    backbone = {n: p for n, p in params.items() if not n.startswith("adapter.")}
    head = _get(ckpt.tensors, "head") or None
    return ModelState(config, backbone, injected, adapters), head


def state_checkpoint(state: RunState) -> Checkpoint:
    ckpt = model_checkpoint(state.model, state.head, stage=state.stage)
    t = ckpt.tensors
    _put(t, "dino", state.dino_head)
    if state.teacher is not None:
        _put(t, "teacher.model", state.teacher.model.parameters())
        _put(t, "teacher.dino", state.teacher.head)
        t["teacher/center"] = state.teacher.center
    opt = state.optimizer
    for name in opt.exp_avg:
        t[f"opt.m/{name}"] = opt.exp_avg[name]
        t[f"opt.v/{name}"] = opt.exp_avg_sq[name]
    ckpt.meta.update({
        "spec": spec_to_dict(state.spec),
        "stage_config": stage_config_to_dict(state.config),
        "optimizer": opt.scalars(),
        "teacher": state.teacher.scalars() if state.teacher is not None else None,
        "rng": {"seed": state.rngs.seed, "streams": state.rngs.state()},
        "mask": _mask_to_json(state.mask),
        "epoch": state.epoch,
    })
    return ckpt


def is_resumable(ckpt: Checkpoint) -> bool:
    return "stage_config" in ckpt.meta


def state_from_checkpoint(ckpt: Checkpoint) -> RunState:
    if not is_resumable(ckpt):
        raise ConfigError("checkpoint holds a bare model, not a resumable stage")
    meta = ckpt.meta
    model, head = model_from_checkpoint(ckpt)
    t = ckpt.tensors
    config = stage_config_from_dict(meta["stage_config"])
    opt = OptimizerState.from_scalars(meta["optimizer"])
    opt.exp_avg = {n[len("opt.m/"):]: v.copy() for n, v in t.items() if n.startswith("opt.m/")}
    opt.exp_avg_sq = {n[len("opt.v/"):]: v.copy() for n, v in t.items() if n.startswith("opt.v/")}
    rngs = RngStreams(meta["rng"]["seed"])
    rngs.restore(meta["rng"]["streams"])
    dino = _get(t, "dino") or None
    teacher = None
    if meta.get("teacher") is not None:
        tparams = _get(t, "teacher.model")
        tmodel = ModelState(
            model.config,
            {n: p for n, p in tparams.items() if not n.startswith("adapter.")},
            {n: p for n, p in tparams.items() if n.startswith("adapter.")},
            list(model.adapters),
        )
        teacher = TeacherState(tmodel, _get(t, "teacher.dino"), t["teacher/center"].copy(), **meta["teacher"])
    return RunState(
        stage=meta["stage"],
        config=config,
        spec=spec_from_dict(meta["spec"]),
        model=model,
        mask=_mask_from_json(meta["mask"]),
        optimizer=opt,
        rngs=rngs,
        dino_head=dino,
        teacher=teacher,
        head=head,
        epoch=int(meta["epoch"]),
    )
