"""Binary checkpoint persistence.

Layout (all integers little-endian):
  - magic bytes ``LNOS``
  - format version, unsigned 32-bit
  - config blob: unsigned 64-bit byte length, then UTF-8 ``key = value``
    lines (the model config fields followed by ``ckpt_*`` bookkeeping keys)
  - one record per array, in a fixed documented order: unsigned 64-bit name
    length, name bytes, unsigned 64-bit rank, that many unsigned 64-bit
    dims, then the values as 64-bit floats in C order.

Array order: the canonical flattened parameter order (enc_w, enc_b,
block0.*, ..., dec_w, dec_b), then the same names under ``adam_m.`` and
``adam_v.`` prefixes. load(save(x)) is bit-identical.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .training import AdamMoments, ModelConfig, TrainResult, config_from_items, config_to_text

MAGIC = b"LNOS"
FORMAT_VERSION = 1

_BOOK_KEYS = ("ckpt_epoch", "ckpt_adam_step", "ckpt_best_val", "ckpt_rng_state")


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a training run."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    moments: AdamMoments
    adam_step_count: int
    epoch: int
    best_val: float
    rng_state: str
    version: int = FORMAT_VERSION

    @classmethod
    def from_train_result(cls, result: TrainResult) -> "Checkpoint":
        return cls(
            config=result.config,
            params=result.params,
            moments=result.moments,
            adam_step_count=result.adam_step_count,
            epoch=result.epoch,
            best_val=result.best_val,
            rng_state=result.rng_state,
        )


def _config_blob(ckpt: Checkpoint) -> bytes:
    text = config_to_text(ckpt.config)
    text += f"ckpt_epoch = {ckpt.epoch}\n"
    text += f"ckpt_adam_step = {ckpt.adam_step_count}\n"
    text += f"ckpt_best_val = {_format_float(ckpt.best_val)}\n"
    text += f"ckpt_rng_state = {ckpt.rng_state}\n"
    return text.encode("utf-8")


def _format_float(v: float) -> str:
    return repr(float(v))


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    raw = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(data.astype("<f8", copy=False).tobytes(order="C"))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    blob = _config_blob(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in ckpt.params.items():
            _write_array(fh, name, arr)
        for name, arr in ckpt.moments.m.items():
            _write_array(fh, f"adam_m.{name}", arr)
        for name, arr in ckpt.moments.v.items():
            _write_array(fh, f"adam_v.{name}", arr)


def _read_exact(fh, count: int, path: str, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"{path}: truncated checkpoint while reading {what}")
    return data


def _read_arrays(fh, path: str) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(8)
        if not head:
            return arrays
        if len(head) != 8:
            raise ValueError(f"{path}: truncated checkpoint while reading an array header")
        (name_len,) = struct.unpack("<Q", head)
        name = _read_exact(fh, name_len, path, "an array name").decode("utf-8")
        (rank,) = struct.unpack("<Q", _read_exact(fh, 8, path, f"rank of {name}"))
        dims = struct.unpack(
            f"<{rank}Q", _read_exact(fh, 8 * rank, path, f"dims of {name}")
        )
        count = 1
        for d in dims:
            count *= d
        raw = _read_exact(fh, 8 * count, path, f"values of {name}")
        if name in arrays:
            raise ValueError(f"{path}: duplicate array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return arrays


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "the format version"))
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path}: checkpoint format version {version} is not supported; "
                f"this build reads version {FORMAT_VERSION}"
            )
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, path, "the config length"))
        blob = _read_exact(fh, blob_len, path, "the config blob").decode("utf-8")
        arrays = _read_arrays(fh, path)

    items: dict[str, str] = {}
    for line in blob.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed config line {line!r} in checkpoint")
        key, value = (part.strip() for part in line.split("=", 1))
        items[key] = value
    book = {k: items.pop(k) for k in _BOOK_KEYS if k in items}
    missing = [k for k in _BOOK_KEYS if k not in book]
    if missing:
        raise ValueError(f"{path}: checkpoint is missing bookkeeping key(s) {missing}")
    config = config_from_items(items)

    params = {k: v for k, v in arrays.items() if not k.startswith(("adam_m.", "adam_v."))}
    moments = AdamMoments(
        m={k[len("adam_m.") :]: v for k, v in arrays.items() if k.startswith("adam_m.")},
        v={k[len("adam_v.") :]: v for k, v in arrays.items() if k.startswith("adam_v.")},
    )
    if set(moments.m) != set(params) or set(moments.v) != set(params):
        raise ValueError(f"{path}: optimizer moment arrays do not match parameter arrays")
    return Checkpoint(
        config=config,
        params=params,
        moments=moments,
        adam_step_count=int(book["ckpt_adam_step"]),
        epoch=int(book["ckpt_epoch"]),
        best_val=float(book["ckpt_best_val"]),
        rng_state=book["ckpt_rng_state"],
        version=version,
    )
