"""Binary checkpoint format.

Layout:

  bytes 0..3    magic ``IRRC``
  bytes 4..7    format version, u32 little-endian (currently 1)
  bytes 8..15   header length in bytes, u64 little-endian
  then          the header: canonical JSON (sorted keys, no spaces), UTF-8
  then          zero padding so the payload starts on a 64-byte boundary
  then          the payload: each tensor's data as little-endian IEEE-754
                single precision, at the offset its table entry names

The header carries the config echo, epoch/step counters, the RNG seed, and
a tensor table sorted by name: model parameters, batch-norm running
statistics, and one ``velocity/<name>`` entry per parameter. Offsets are
relative to the payload start and each is itself 64-byte aligned.

Because the header is canonical and the table order is fixed, save ->
load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .data import atomic_write_bytes
from .errors import DataError

MAGIC = b"IRRC"
VERSION = 1
_ALIGN = 64


def _aligned(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


@dataclass
class Checkpoint:
    """A loaded (or about-to-be-saved) checkpoint."""

    config: Dict
    epoch: int
    global_step: int
    seed: int
    tensors: Dict[str, np.ndarray]  # float32 arrays, includes velocity/<name>

    def parameter_names(self) -> Tuple[str, ...]:
        return tuple(
            n for n in self.tensors
            if not n.startswith("velocity/") and not n.endswith((".running_mean", ".running_var"))
        )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.tensors)
    seen = set()
    for n in names:
        if n in seen:
            raise DataError(f"duplicate tensor name {n!r} in checkpoint")
        seen.add(n)

    table = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(ckpt.tensors[name], dtype="<f4"))
        nbytes = arr.nbytes
        table.append(
            {"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}
        )
        blobs.append(arr.tobytes())
        offset = _aligned(offset + nbytes)

    header = {
        "config": ckpt.config,
        "epoch": int(ckpt.epoch),
        "global_step": int(ckpt.global_step),
        "rng_state": {"seed": int(ckpt.seed), "epoch": int(ckpt.epoch), "global_step": int(ckpt.global_step)},
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    prefix_len = len(MAGIC) + 4 + 8 + len(header_bytes)
    pad = _aligned(prefix_len) - prefix_len

    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header_bytes)), header_bytes, b"\x00" * pad]
    for entry, blob in zip(table, blobs):
        parts.append(blob)
        parts.append(b"\x00" * (_aligned(entry["offset"] + entry["nbytes"]) - entry["offset"] - entry["nbytes"]))
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} does not exist")
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_start = 16
    header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    payload_start = _aligned(header_start + header_len)

    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = payload_start + entry["offset"]
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()

    rng_state = header.get("rng_state", {})
    return Checkpoint(
        config=header["config"],
        epoch=int(header["epoch"]),
        global_step=int(header["global_step"]),
        seed=int(rng_state.get("seed", 0)),
        tensors=tensors,
    )


def checkpoint_from_model(model, velocities: Optional[Dict[str, np.ndarray]],
                          config_echo: Dict, epoch: int, global_step: int, seed: int) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {}
    params = model.parameters()
    for name, t in params.items():
        tensors[name] = t.data
    for name, arr in model.buffers().items():
        tensors[name] = arr
    vel = velocities or {}
    for name in params:
        tensors["velocity/" + name] = vel.get(name, np.zeros_like(params[name].data))
    return Checkpoint(config=config_echo, epoch=epoch, global_step=global_step, seed=seed, tensors=tensors)


def restore_model(ckpt: Checkpoint, dtype=np.float32):
    """Rebuild the model named by the checkpoint's config echo and load
    its parameters, running statistics, and optimizer velocities."""
    from .model import ModelConfig, build_model

    model_section = ckpt.config.get("model")
    if not model_section:
        raise DataError("checkpoint config echo has no 'model' section to rebuild from")
    kwargs = dict(model_section)
    for key in ("input_shape", "stem_widths", "block_widths"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    config = ModelConfig(**kwargs)
    model = build_model(config, seed=ckpt.seed, dtype=dtype)

    params = model.parameters()
    expected = set(params) | set(model.buffers()) | {"velocity/" + n for n in params}
    present = set(ckpt.tensors)
    if expected != present:
        missing = sorted(expected - present)[:4]
        extra = sorted(present - expected)[:4]
        raise DataError(
            f"checkpoint tensor table does not match the model: missing {missing} extra {extra}"
        )

    for name, t in params.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != t.shape:
            raise DataError(f"tensor {name!r}: checkpoint shape {arr.shape} != model {t.shape}")
        t.data = arr.astype(dtype).copy()
    model.set_buffers({n: ckpt.tensors[n] for n in model.buffers()})
    velocities = {
        n: ckpt.tensors["velocity/" + n].astype(dtype).copy() for n in params
    }
    return model, velocities
