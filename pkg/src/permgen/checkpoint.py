"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PGEN" | u32 version | u64 header length | header (UTF-8 JSON) | tensor blobs | sha256

The header lists every tensor's name, shape and byte offset into the blob
section; blobs are float32. The trailing SHA-256 covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Seq2Seq
from .tensor import Tensor

MAGIC = b"PGEN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: str
    step: int = 0
    optimizer_kind: str = "adam"
    optimizer_step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    run_config: dict | None = None
    config_hash: str | None = None
    version: int = VERSION

    def model(self) -> Seq2Seq:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Seq2Seq(self.model_config, params)

    @classmethod
    def from_model(cls, model: Seq2Seq, vocab_hash: str, **kw) -> "Checkpoint":
        params = {k: v.data.astype(np.float32) for k, v in model.params.items()}
        return cls(model.cfg, params, vocab_hash, **kw)


def _header(ckpt: Checkpoint, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    entries, offset = [], 0
    for name, arr in tensors:
        nbytes = arr.size * 4
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": "PGEN",
        "model_config": ckpt.model_config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "step": ckpt.step,
        "optimizer": {"kind": ckpt.optimizer_kind, "step": ckpt.optimizer_step},
        "rng_state": ckpt.rng_state,
        "run_config": ckpt.run_config,
        "config_hash": ckpt.config_hash,
        "tensors": entries,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = sorted(ckpt.params.items()) + sorted(ckpt.optimizer_state.items())
    tensors = [(name, np.ascontiguousarray(arr, dtype="<f4")) for name, arr in tensors]
    header = _header(ckpt, tensors)
    body = _PREFIX.pack(MAGIC, ckpt.version, len(header)) + header + b"".join(a.tobytes() for _, a in tensors)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes, expected_vocab_hash: str | None = None) -> Checkpoint:
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointError(f"file too short for a checkpoint ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    body, digest = raw[:-32], raw[-32:]
    actual = hashlib.sha256(body).digest()
    if actual != digest:
        raise CheckpointError(f"checksum mismatch: stored {digest.hex()[:16]}..., computed {actual.hex()[:16]}...")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, this build reads {VERSION}")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(f"vocabulary hash mismatch: checkpoint has {header['vocab_hash']}, "
                              f"vocabulary file has {expected_vocab_hash}")
    blobs = body[_PREFIX.size + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blobs):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(blobs[start:start + n], dtype="<f4").reshape(entry["shape"]).copy()
    cfg = ModelConfig(**header["model_config"])
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    opt = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    try:
        Seq2Seq(cfg, {k: Tensor(v) for k, v in params.items()})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"parameters do not match the stored model config: {exc}") from None
    return Checkpoint(
        model_config=cfg,
        params=params,
        vocab_hash=header["vocab_hash"],
        step=header["step"],
        optimizer_kind=header["optimizer"]["kind"],
        optimizer_step=header["optimizer"]["step"],
        optimizer_state=opt,
        rng_state=header["rng_state"],
        run_config=header["run_config"],
        config_hash=header["config_hash"],
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_vocab_hash)


def is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == MAGIC
    except OSError:
        return False
