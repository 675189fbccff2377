"""Single-file checkpoint container.

Layout::

    b"CAIDDCKP"                    8-byte magic
    uint64 little-endian           manifest length in bytes
    manifest                       UTF-8 JSON, sorted keys
    array payload                  raw little-endian arrays, back to back
    sha256                         32-byte digest of everything above

The manifest records the format version, step, flat training config, the
config hash and an array table (name, dtype, shape, offset, nbytes).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, build_config, config_hash, to_flat
from .errors import ConfigError, IntegrityError, VersionError

MAGIC = b"CAIDDCKP"
FORMAT_VERSION = 1
DIGEST_BYTES = 32


@dataclass
class Checkpoint:
    step: int
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: bytes = b""
    format_version: int = FORMAT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.train_config)


def _le(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    return np.asarray(arr).astype(arr.dtype.newbyteorder("<"), order="C", copy=False)


def encode(ckpt: Checkpoint) -> bytes:
    arrays = [("param/" + k, v) for k, v in sorted(ckpt.params.items())]
    arrays += [("optim/" + k, v) for k, v in sorted(ckpt.optimizer_state.items())]
    arrays.append(("rng", np.frombuffer(ckpt.rng_state, dtype=np.uint8)))
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": ckpt.format_version,
        "step": ckpt.step,
        "config": to_flat(ckpt.train_config),
        "config_hash": ckpt.config_hash,
        "arrays": table,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(text)) + text + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + DIGEST_BYTES or not blob.startswith(MAGIC):
        raise IntegrityError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-DIGEST_BYTES], blob[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint digest mismatch: file is corrupt")
    (n,) = struct.unpack_from("<Q", body, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        manifest = json.loads(body[start : start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    try:
        cfg = build_config(manifest["config"])
    except ConfigError as exc:
        raise IntegrityError(f"stored config is invalid: {exc}") from None
    if config_hash(cfg) != manifest["config_hash"]:
        raise IntegrityError("stored config hash does not match the stored config")
    payload = body[start + n :]
    params, optim, rng = {}, {}, b""
    for entry in manifest["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise IntegrityError(f"array {entry['name']} is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"])).copy()
        kind, _, name = entry["name"].partition("/")
        if kind == "param":
            params[name] = arr
        elif kind == "optim":
            optim[name] = arr
        elif kind == "rng":
            rng = arr.tobytes()
    return Checkpoint(manifest["step"], cfg, params, optim, rng, version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
