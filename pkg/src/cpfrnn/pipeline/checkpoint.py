"""Binary checkpoint format.

Layout (all little-endian)::

    magic       8 bytes  b"CPFRNNCK"
    version     u32
    total size  u64      byte length of the whole file
    meta length u32, then UTF-8 ``key=value`` lines (config snapshot, n, rng state)
    count       u32
    count records of:
        name length u32, name bytes, rank u32, rank x u32 dims, float64 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..training import RunConfig, build_model
from .data import Scaler

MAGIC = b"CPFRNNCK"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    n: int
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    scaler: Scaler | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def build(self):
        """Rebuild the model and load every saved parameter into it."""
        model = build_model(self.config, self.n)
        params = model.params()
        missing = sorted(set(params) - set(self.tensors))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing}")
        for name, t in params.items():
            arr = self.tensors[name]
            if arr.shape != t.shape:
                raise CheckpointError(f"parameter {name}: saved shape {arr.shape}, model expects {t.shape}")
            t.data[...] = arr
        return model


def encode(ck: Checkpoint) -> bytes:
    meta = ck.config.to_text() + f"n={ck.n}\n"
    if ck.rng_state is not None:
        meta += "rng_state=" + json.dumps(ck.rng_state, sort_keys=True) + "\n"
    if ck.scaler is not None:
        meta += f"scaler={ck.scaler.mode}\n"
    for k in sorted(ck.extra):
        meta += f"extra.{k}={ck.extra[k]}\n"
    tensors = dict(ck.tensors)
    if ck.scaler is not None:
        tensors.update({"scaler." + k: v for k, v in ck.scaler.arrays().items()})
    body = bytearray()
    mb = meta.encode()
    body += struct.pack("<I", len(mb)) + mb
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # tobytes() writes C order
        nb = name.encode()
        body += struct.pack("<I", len(nb)) + nb
        body += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    total = _HEADER.size + len(body)
    return _HEADER.pack(MAGIC, VERSION, total) + bytes(body)


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"truncated checkpoint: expected at least {_HEADER.size} bytes, got {len(raw)}")
    magic, version, total = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (this build reads version {VERSION})")
    if len(raw) != total:
        raise CheckpointError(f"truncated checkpoint: expected {total} bytes, got {len(raw)}")
    pos = _HEADER.size

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    (mlen,) = take("<I")
    meta = raw[pos:pos + mlen].decode()
    pos += mlen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * size
        tensors[name] = arr

    cfg_lines, n, rng_state, scaler_mode, extra = [], None, None, None, {}
    for line in meta.splitlines():
        key, _, val = line.partition("=")
        if key == "n":
            n = int(val)
        elif key == "rng_state":
            rng_state = json.loads(val)
        elif key == "scaler":
            scaler_mode = val
        elif key.startswith("extra."):
            extra[key[6:]] = val
        else:
            cfg_lines.append(line)
    scaler = None
    if scaler_mode is not None:
        parts = {k[7:]: tensors.pop(k) for k in list(tensors) if k.startswith("scaler.")}
        scaler = Scaler.from_arrays(scaler_mode, parts)
    return Checkpoint(RunConfig.from_text("\n".join(cfg_lines)), n, tensors, rng_state, scaler, extra)


def from_model(model, config: RunConfig, n: int, scaler: Scaler | None = None,
               rng: np.random.Generator | None = None) -> Checkpoint:
    tensors = {name: np.array(t.data) for name, t in model.params().items()}
    state = rng.bit_generator.state if rng is not None else None
    return Checkpoint(config, n, tensors, state, scaler)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
