"""Versioned binary model file.

Layout (little-endian)::

    8s   magic b"GRGCLMDL"
    u32  format version
    u64  n_users, n_items, d, L
    u8   variant tag (0 layer_average, 1 selfloop_last)
    u8   normalize flag
    f64  E0, n x d row-major
    u32 count, then per entry u32 byte length + UTF-8 bytes: user ids
    same for item ids
"""

from __future__ import annotations

import struct

import numpy as np

from .encoder import EmbeddingTable, PropagationConfig
from .training import RecModel

MAGIC = b"GRGCLMDL"
VERSION = 1
_VARIANTS = ("layer_average", "selfloop_last")


class ModelFormatError(ValueError):
    pass


def _write_strings(fh, items) -> None:
    fh.write(struct.pack("<I", len(items)))
    for s in items:
        b = str(s).encode("utf-8")
        fh.write(struct.pack("<I", len(b)))
        fh.write(b)


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ModelFormatError("truncated model file")
    return b


def _read_strings(fh) -> list:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = []
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(fh, 4))
        out.append(_read_exact(fh, length).decode("utf-8"))
    return out


def save_model(model: RecModel, path) -> None:
    e0 = model.e0.matrix
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<4Q", model.n_users, model.n_items, e0.shape[1], model.prop.num_layers))
        fh.write(struct.pack("<BB", _VARIANTS.index(model.prop.variant), int(model.prop.normalize_output)))
        fh.write(np.ascontiguousarray(e0, dtype="<f8").tobytes())
        _write_strings(fh, model.user_ids)
        _write_strings(fh, model.item_ids)


def load_model(path) -> RecModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise ModelFormatError(f"{path}: not a model file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ModelFormatError(f"{path}: unsupported format version {version}")
        n_u, n_i, d, layers = struct.unpack("<4Q", _read_exact(fh, 32))
        tag, norm = struct.unpack("<BB", _read_exact(fh, 2))
        if tag >= len(_VARIANTS):
            raise ModelFormatError(f"{path}: unknown variant tag {tag}")
        n = n_u + n_i
        e0 = np.frombuffer(_read_exact(fh, 8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)
        users = _read_strings(fh)
        items = _read_strings(fh)
    prop = PropagationConfig(num_layers=int(layers), variant=_VARIANTS[tag], normalize_output=bool(norm))
    return RecModel(EmbeddingTable(e0), prop, int(n_u), int(n_i), users, items)
