"""Binary checkpoint format.

Layout (little-endian)::

    b"SLAP"  u32 version  32-byte config digest
    u32 meta_len  meta JSON (model config, train config, step)
    32-byte sha256 of the tensor table
    tensor table: u32 count, then per tensor
        u16 name_len, name (UTF-8), u8 ndim, u32 dims[ndim], f32 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from slap.errors import CheckpointError, DigestError, IntegrityError
from slap.model import ModelConfig
from slap.state import TrainConfig, TrainState, init_state

MAGIC = b"SLAP"
VERSION = 1


def _state_tensors(state: TrainState) -> dict:
    out = {}
    for name, p in state.model.named_parameters():
        out[f"student.{name}"] = p.detach()
    for name, p in state.teacher.named_parameters():
        out[f"teacher.{name}"] = p.detach()
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, st in state.optimizer.state.items():
        n = names[id(p)]
        out[f"optim.exp_avg.{n}"] = st["exp_avg"]
        out[f"optim.exp_avg_sq.{n}"] = st["exp_avg_sq"]
        out[f"optim.step.{n}"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
    out["state.center"] = state.center
    return dict(sorted(out.items()))


def _encode_table(tensors: dict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps 0-d shape
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _decode_table(buf: bytes) -> dict:
    out = {}
    try:
        (count,) = struct.unpack_from("<I", buf, 0)
        off = 4
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            if name in out:
                raise CheckpointError(f"duplicate tensor {name!r}")
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as e:
        raise IntegrityError(f"tensor table is truncated or malformed: {e}") from e
    if off != len(buf):
        raise IntegrityError("trailing bytes after tensor table")
    return out


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "model": state.model_cfg.to_dict(),
        "train": state.train_cfg.to_dict(),
        "step": state.step,
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    table = _encode_table(_state_tensors(state))
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<I", VERSION),
            state.model_cfg.digest(),
            struct.pack("<I", len(meta_raw)),
            meta_raw,
            hashlib.sha256(table).digest(),
            table,
        ]
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_header(path) -> tuple:
    buf = Path(path).read_bytes()
    if len(buf) < 44 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    digest = buf[8:40]
    (meta_len,) = struct.unpack_from("<I", buf, 40)
    try:
        meta = json.loads(buf[44 : 44 + meta_len])
    except ValueError as e:
        raise IntegrityError(f"{path}: unreadable metadata") from e
    return buf, digest, meta, 44 + meta_len


def load_checkpoint(path, model_cfg: ModelConfig | None = None) -> TrainState:
    buf, digest, meta, off = read_header(path)
    stored_cfg = ModelConfig.from_dict(meta["model"])
    if stored_cfg.digest() != digest:
        raise IntegrityError(f"{path}: metadata does not match its config digest")
    if model_cfg is not None and model_cfg.digest() != digest:
        raise DigestError(f"{path}: checkpoint was written for a different architecture config")
    want = buf[off : off + 32]
    table = buf[off + 32 :]
    if len(want) != 32 or hashlib.sha256(table).digest() != want:
        raise IntegrityError(f"{path}: tensor table checksum mismatch")
    tensors = _decode_table(table)

    state = init_state(stored_cfg, TrainConfig(**meta["train"]))
    state.step = int(meta["step"])
    params = dict(state.model.named_parameters())
    t_params = dict(state.teacher.named_parameters())
    optim_slots = {}
    with torch.no_grad():
        for name, t in tensors.items():
            group, _, rest = name.partition(".")
            if group == "student" and rest in params:
                _assign(params[rest], t, name)
            elif group == "teacher" and rest in t_params:
                _assign(t_params[rest], t, name)
            elif group == "optim":
                slot, _, pname = rest.partition(".")
                if pname not in params or slot not in ("exp_avg", "exp_avg_sq", "step"):
                    raise CheckpointError(f"unknown tensor {name!r}")
                optim_slots.setdefault(pname, {})[slot] = t
            elif name == "state.center":
                _assign(state.center, t, name)
            else:
                raise CheckpointError(f"unknown tensor {name!r}")
    missing = [f"student.{n}" for n in params if f"student.{n}" not in tensors]
    missing += [f"teacher.{n}" for n in t_params if f"teacher.{n}" not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:3]}")
    for pname, slots in optim_slots.items():
        if set(slots) != {"exp_avg", "exp_avg_sq", "step"}:
            raise CheckpointError(f"incomplete optimizer state for {pname}")
        p = params[pname]
        state.optimizer.state[p] = {
            "step": slots["step"].clone(),
            "exp_avg": slots["exp_avg"].clone().reshape(p.shape),
            "exp_avg_sq": slots["exp_avg_sq"].clone().reshape(p.shape),
        }
    return state


def _assign(dst: torch.Tensor, src: torch.Tensor, name: str):
    if tuple(dst.shape) != tuple(src.shape):
        raise CheckpointError(f"{name}: shape {tuple(src.shape)} does not fit {tuple(dst.shape)}")
    dst.copy_(src)
