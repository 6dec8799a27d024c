"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  "CMUW"
    version u32
    count   u32      number of entries
    entry:  name_len u32, name utf-8,
            dtype u8 (0=real32, 1=real64, 2=raw utf-8 json),
            ndim u32, dims u32 x ndim, payload bytes

Model parameters and buffers are float entries; one json entry named
``__meta__`` carries the config, counters and rng seed. Optimizer moments,
when present, are float entries under the ``__opt__/`` prefix.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CMUW"
VERSION = 1
META_NAME = "__meta__"
OPT_PREFIX = "__opt__/"
_DTYPE_CODES = {0: np.float32, 1: np.float64}
_MAX_ELEMENTS = 1 << 31  # guards against corrupted dims fields


@dataclass
class Checkpoint:
    config: dict
    params: dict                      # name -> float array (includes buffers)
    epoch: int = 0
    seed: int = 0
    optimizer: dict = None            # {"step": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)


def _write_entry(f, name, dtype_code, dims, payload):
    name_b = name.encode("utf-8")
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<B", dtype_code))
    f.write(struct.pack("<I", len(dims)))
    for d in dims:
        f.write(struct.pack("<I", d))
    f.write(payload)


def _array_entry(f, name, arr):
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise FormatError(f"checkpoint entry {name}: unsupported dtype {arr.dtype}")
    data = np.ascontiguousarray(arr)
    if data.dtype.byteorder == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    _write_entry(f, name, code, data.shape, data.tobytes())


def save_checkpoint(path, ckpt):
    meta = {"config": ckpt.config, "epoch": int(ckpt.epoch), "seed": int(ckpt.seed),
            "extra": ckpt.extra}
    opt_entries = []
    if ckpt.optimizer is not None:
        meta["optimizer_step"] = int(ckpt.optimizer.get("step", 0))
        for kind in ("m", "v"):
            for name, arr in ckpt.optimizer.get(kind, {}).items():
                opt_entries.append((f"{OPT_PREFIX}{name}/{kind}", np.asarray(arr)))
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", 1 + len(ckpt.params) + len(opt_entries)))
    _write_entry(buf, META_NAME, 2, (len(meta_b),), meta_b)
    for name, arr in ckpt.params.items():
        _array_entry(buf, name, np.asarray(arr))
    for name, arr in opt_entries:
        _array_entry(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = r.u32("entry count")

    meta = None
    params = {}
    opt = {"m": {}, "v": {}}
    for _ in range(count):
        name_len = r.u32("entry name length")
        if name_len > 1 << 20:
            raise FormatError(f"{path}: implausible name length {name_len}")
        name = r.take(name_len, "entry name").decode("utf-8")
        code = r.take(1, f"entry {name}: dtype")[0]
        ndim = r.u32(f"entry {name}: ndim")
        if ndim > 32:
            raise FormatError(f"entry {name}: implausible ndim {ndim}")
        dims = tuple(r.u32(f"entry {name}: dims") for _ in range(ndim))
        numel = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if numel < 0 or numel > _MAX_ELEMENTS:
            raise FormatError(f"entry {name}: implausible element count {numel}")
        if code == 2:
            payload = r.take(numel, f"entry {name}: payload")
            if name == META_NAME:
                try:
                    meta = json.loads(payload.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as e:
                    raise FormatError(f"entry {name}: bad json ({e})") from None
            continue
        if code not in _DTYPE_CODES:
            raise FormatError(f"entry {name}: unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        payload = r.take(numel * dtype().itemsize, f"entry {name}: payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        if name.startswith(OPT_PREFIX):
            body = name[len(OPT_PREFIX):]
            pname, _, kind = body.rpartition("/")
            if kind not in ("m", "v") or not pname:
                raise FormatError(f"entry {name}: malformed optimizer entry")
            opt[kind][pname] = arr
        else:
            if name in params:
                raise FormatError(f"entry {name}: duplicate parameter")
            params[name] = arr
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after last entry")
    if meta is None:
        raise FormatError(f"{path}: missing {META_NAME} entry")

    optimizer = None
    if opt["m"] or opt["v"] or "optimizer_step" in meta:
        optimizer = {"step": int(meta.get("optimizer_step", 0)), "m": opt["m"], "v": opt["v"]}
    return Checkpoint(config=meta.get("config", {}), params=params,
                      epoch=int(meta.get("epoch", 0)), seed=int(meta.get("seed", 0)),
                      optimizer=optimizer, extra=meta.get("extra", {}))


def state_from_model(model):
    """Ordered name -> array snapshot of parameters and buffers."""
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.data.copy()
    for name, b in model.named_buffers():
        state[name] = b.data.copy()
    return state


def load_state_into_model(model, params):
    """Write a parameter dict back into a model, with strict name matching."""
    remaining = dict(params)
    for name, p in model.named_parameters():
        if name not in remaining:
            raise FormatError(f"checkpoint missing parameter {name}")
        arr = remaining.pop(name)
        if arr.shape != p.data.shape:
            raise FormatError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    for name, b in model.named_buffers():
        if name not in remaining:
            raise FormatError(f"checkpoint missing buffer {name}")
        b.data = remaining.pop(name).astype(b.data.dtype)
    if remaining:
        raise FormatError(f"checkpoint has unused entries: {sorted(remaining)[:4]}")
    return model
