"""Binary checkpoint container.

Layout, all integers little-endian:

    magic      8 bytes  b"CQVAECKP"
    version    uint32
    hlen       uint32   length of the JSON header
    header     hlen bytes of UTF-8 JSON: kind, config, epoch, step, rng state, history
    count      uint32   number of tensors
    then per tensor:
        nlen   uint16, name (UTF-8)
        ndim   uint8, dims (uint32 each)
        data   prod(dims) little-endian float32 values, row-major

Tensor names are prefixed ``param.``, ``buffer.`` or ``optim.``.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CQVAECKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write(path, header, tensors):
    head = json.dumps(_jsonable(header), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(blob[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return header, tensors


def save_model(path, model, trainer=None, extra=None):
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    header = {"kind": model.kind, "config": model.config.to_dict()}
    if trainer is not None:
        tensors.update({f"optim.{k}": v for k, v in trainer.opt.state().items()})
        header.update(epoch=trainer.epoch, step=trainer.step, rng=trainer.rng_state(), history=trainer.history)
    if extra:
        header.update(extra)
    write(path, header, tensors)


def load_model(path, with_trainer=False):
    """Rebuild the model (and optionally its trainer state) from a checkpoint."""
    from .config import TrainConfig
    from .models import CQAE, CQAETrainer, CQVAE, CQVAETrainer

    header, tensors = read(path)
    config = TrainConfig.from_dict(header["config"])
    kind = header.get("kind")
    if kind == "cqvae":
        model, trainer_cls = CQVAE(config), CQVAETrainer
    elif kind == "cqae":
        model, trainer_cls = CQAE(config), CQAETrainer
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
    model.load_buffers({k[7:]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("buffer.")})
    if not with_trainer:
        return model, header
    trainer = trainer_cls(model, config)
    optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")}
    if optim:
        trainer.opt.load_state(optim)
    trainer.epoch = header.get("epoch", 0)
    trainer.step = header.get("step", 0)
    trainer.history = header.get("history", [])
    if "rng" in header:
        trainer.load_rng_state(header["rng"])
    return model, header, trainer
