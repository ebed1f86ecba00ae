"""Binary checkpoint container.

Layout (all integers little-endian ``uint32``)::

    b"CPUN"  version  meta_len  meta(JSON, utf-8)  n_params
    repeated n_params times:
        name_len  name(utf-8)  rank  dims[rank]  values(float64 LE, C order)

``meta`` holds ``{"config": <CpUnetConfig fields>, "step": int}``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import NamedTuple

import numpy as np

from .errors import IntegrityError
from .network import CpUnet, CpUnetConfig, load_state_dict

MAGIC = b"CPUN"
VERSION = 1


class Checkpoint(NamedTuple):
    config: CpUnetConfig
    state: dict[str, np.ndarray]
    step: int


def config_to_dict(config: CpUnetConfig) -> dict:
    d = dataclasses.asdict(config)
    d["input_size"] = list(config.input_size)
    return d


def encode(model: CpUnet, step: int = 0) -> bytes:
    meta = json.dumps({"config": config_to_dict(model.config), "step": int(step)},
                      sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise IntegrityError(f"not a CPUN checkpoint (magic {buf[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise IntegrityError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(buf):
            raise IntegrityError(f"truncated checkpoint at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, meta_len = take("<II")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = json.loads(take_bytes(meta_len).decode())
    cfg = CpUnetConfig(**meta["config"])
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = take_bytes(name_len).decode()
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take_bytes(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in state:
            raise IntegrityError(f"duplicate parameter {name!r} in checkpoint")
        state[name] = values
    if pos != len(buf):
        raise IntegrityError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return Checkpoint(cfg, state, int(meta.get("step", 0)))


def save(path, model: CpUnet, step: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(model, step))


def save_state(path, model: CpUnet, state: dict[str, np.ndarray], step: int) -> None:
    """Write ``state`` under ``model``'s config without touching the live parameters."""
    current = {p.name: p.data.copy() for p in model.parameters()}
    load_state_dict(model, state)
    try:
        save(path, model, step)
    finally:
        load_state_dict(model, current)


def load(path) -> tuple[CpUnet, int]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    ckpt = decode(buf)
    model = CpUnet(ckpt.config)
    load_state_dict(model, ckpt.state)
    return model, ckpt.step
