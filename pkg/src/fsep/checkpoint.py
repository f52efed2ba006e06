"""FSEP checkpoint files.

Layout::

    b"FSEP" | u32 LE version | u32 LE header length | UTF-8 JSON header | tensor payloads

The header carries the embedder spec, the training config, loop bookkeeping
and a tensor manifest (name, shape, dtype, byte offset relative to the start
of the payload). Payloads are raw little-endian IEEE-754 arrays written in
manifest order. The JSON is emitted with sorted keys so equal checkpoints
serialize to equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .embed import EmbedderSpec
from .episodes import STREAM_INIT, STREAM_SAMPLING, STREAM_VALIDATION
from .errors import CorruptFile, VersionMismatch

MAGIC = b"FSEP"
VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    spec: EmbedderSpec
    config: Any  # TrainConfig
    params: dict[str, np.ndarray]
    opt_state: Any = None  # AdamState or None
    iteration: int = 0
    best_val_loss: float | None = None
    best_iter: int | None = None
    best_params: dict[str, np.ndarray] | None = None
    rng_states: dict[str, dict] = field(default_factory=dict)
    trainer_state: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.config.seed)


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def _tensor_groups(ck: Checkpoint) -> list[tuple[str, dict[str, np.ndarray]]]:
    groups = [("params", ck.params)]
    if ck.opt_state is not None:
        groups += [("adam_m", ck.opt_state.m), ("adam_v", ck.opt_state.v)]
    if ck.best_params is not None:
        groups.append(("best", ck.best_params))
    return groups


def to_bytes(ck: Checkpoint) -> bytes:
    manifest, payload, offset = [], [], 0
    for group, tensors in _tensor_groups(ck):
        for name in tensors:
            arr = _le(np.asarray(tensors[name]))
            raw = arr.tobytes()
            manifest.append(
                {"name": f"{group}/{name}", "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset}
            )
            payload.append(raw)
            offset += len(raw)
    opt = None
    if ck.opt_state is not None:
        s = ck.opt_state
        opt = {"t": s.t, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
    header = {
        "spec": ck.spec.to_dict(),
        "config": ck.config.to_dict(),
        "iteration": ck.iteration,
        "seed": ck.seed,
        "stream_offsets": {"sampling": STREAM_SAMPLING, "init": STREAM_INIT, "validation": STREAM_VALIDATION},
        "best_val_loss": ck.best_val_loss,
        "best_iter": ck.best_iter,
        "optimizer": opt,
        "rng_states": ck.rng_states,
        "trainer_state": ck.trainer_state,
        "tensors": manifest,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + b"".join(payload)


def from_bytes(blob: bytes) -> Checkpoint:
    from .train import AdamState, TrainConfig

    if len(blob) < _PREAMBLE.size:
        raise CorruptFile("file too short for an FSEP preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptFile(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREAMBLE.size
    if len(blob) < start + hlen:
        raise CorruptFile("truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable header: {exc}") from None
    body = blob[start + hlen :]
    if len(body) != header.get("payload_bytes"):
        raise CorruptFile(f"payload is {len(body)} bytes, header declares {header.get('payload_bytes')}")

    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        off = entry["offset"]
        if off < 0 or off + n > len(body):
            raise CorruptFile(f"tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=off).reshape(entry["shape"])
        group, name = entry["name"].split("/", 1)
        groups.setdefault(group, {})[name] = arr.astype(dt.newbyteorder("="), copy=True)

    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = AdamState(groups.get("adam_m", {}), groups.get("adam_v", {}), o["t"], o["beta1"], o["beta2"], o["eps"])
    return Checkpoint(
        spec=EmbedderSpec.from_dict(header["spec"]),
        config=TrainConfig.from_dict(header["config"]),
        params=groups.get("params", {}),
        opt_state=opt,
        iteration=header["iteration"],
        best_val_loss=header["best_val_loss"],
        best_iter=header["best_iter"],
        best_params=groups.get("best"),
        rng_states=header["rng_states"],
        trainer_state=header["trainer_state"],
    )


def save_checkpoint(ck: Checkpoint, path: str) -> None:
    blob = to_bytes(ck)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
