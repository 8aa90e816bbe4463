"""Binary checkpoint format.

Little-endian layout::

    magic "CHCK" | version u32
    d_t n_heads enc_layers dec_layers mlp_dim T_b N  (u32 each) | dropout f64 | mask_fill str
    variant str | policy str | rng_seed u64 | epoch u32 | n_tensors u32
    n_tensors x (name str | rank u8 | dims u32 x rank | f32 data, row-major)

``str`` is a u16 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch

from .network import ClearModel, ModelConfig

MAGIC = b"CHCK"
VERSION = 1
_DIMS = ("d_t", "n_heads", "enc_layers", "dec_layers", "mlp_dim", "T_b", "N")


class CheckpointError(ValueError):
    pass


def _pstr(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, model: ClearModel, variant="clear", policy="paper_literal", rng_seed: int = 0,
                    epoch: int = 0) -> None:
    """Write atomically (temp file, then rename)."""
    cfg = model.cfg
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<7I", *(getattr(cfg, k) for k in _DIMS))
    buf += struct.pack("<d", cfg.dropout)
    buf += _pstr(cfg.mask_fill)
    buf += _pstr(str(getattr(variant, "value", variant)))
    buf += _pstr(str(getattr(policy, "value", policy)))
    buf += struct.pack("<QI", int(rng_seed), int(epoch))
    state = model.state_dict()
    buf += struct.pack("<I", len(state))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        buf += _pstr(name)
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(model, meta)``; every tensor shape is validated against the stored config."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    def take_str():
        (n,) = take("<H")
        nonlocal off
        s = data[off:off + n].decode("utf-8")
        off += n
        return s

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    dims = dict(zip(_DIMS, take("<7I")))
    (dropout,) = take("<d")
    mask_fill = take_str()
    cfg = ModelConfig(**dims, dropout=dropout, mask_fill=mask_fill)
    variant = take_str()
    policy = take_str()
    rng_seed, epoch = take("<QI")
    (n_tensors,) = take("<I")

    model = ClearModel(cfg)
    expected = model.state_dict()
    loaded = {}
    for _ in range(n_tensors):
        name = take_str()
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, "<f4", count, off).reshape(shape)
        off += 4 * count
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        if tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {tuple(shape)}, config implies {tuple(expected[name].shape)}")
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    model.load_state_dict(loaded)
    meta = {"variant": variant, "policy": policy, "rng_seed": rng_seed, "epoch": epoch, "config": cfg}
    return model, meta
