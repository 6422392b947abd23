"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"RMCK" | u32 count | count * (u16 len + utf-8 name | u32 rank | u32 dims[rank] | f32 payload)

Model configuration is stored alongside the weights as rank-0 tensors named
``config.<field>``.
"""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneConfig
from .model import ReaMIL

CKPT_MAGIC = b"RMCK"


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (k,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + k].decode("utf-8")
            pos += k
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for tensor {name!r} at byte {pos}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return tensors


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def model_tensors(model: ReaMIL, phase: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for f in fields(BackboneConfig):
        out[f"config.{f.name}"] = np.float32(getattr(model.config, f.name))
    out["config.temperature"] = np.float32(model.temperature)
    out["config.phase"] = np.float32(1.0 if phase == "evidence" else 0.0)
    for name, p in model.params.items():
        out[name] = p.data
    return out


def model_from_tensors(tensors: dict[str, np.ndarray]) -> tuple[ReaMIL, str]:
    kwargs = {}
    for f in fields(BackboneConfig):
        key = f"config.{f.name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks {key}")
        v = float(tensors[key])
        kwargs[f.name] = bool(v) if f.type in (bool, "bool") else int(v)
    config = BackboneConfig(**kwargs)
    params = {
        k: Tensor(v.copy(), requires_grad=True, name=k)
        for k, v in tensors.items()
        if k.startswith(("backbone.", "head."))
    }
    model = ReaMIL(config, params, temperature=float(tensors.get("config.temperature", 1.0)))
    phase = "evidence" if float(tensors.get("config.phase", 0.0)) else "baseline"
    return model, phase


def save_model(path, model: ReaMIL, phase: str, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = model_tensors(model, phase)
    if extra:
        tensors.update(extra)
    write_tensors(path, tensors)


def load_model(path) -> tuple[ReaMIL, str]:
    return model_from_tensors(read_tensors(path))


def check_compatible(model: ReaMIL, reference: ReaMIL) -> None:
    """Raise listing every tensor whose presence or shape differs."""
    problems = []
    for name, p in reference.params.items():
        if name.startswith("head."):
            continue
        q = model.params.get(name)
        if q is None:
            problems.append(f"{name}: missing")
        elif q.shape != p.shape:
            problems.append(f"{name}: {q.shape} vs {p.shape}")
    for name in model.params:
        if name.startswith("backbone.") and name not in reference.params:
            problems.append(f"{name}: unexpected")
    if problems:
        raise CheckpointError("checkpoint does not match backbone config: " + "; ".join(problems))
