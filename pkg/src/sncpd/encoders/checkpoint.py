"""Little-endian binary checkpoints.

Layout::

    8 bytes   magic b"SNCPDCKP"
    u32       format version (1)
    u32       length of the config block, then that many bytes of UTF-8 JSON
    u32       number of blobs
    per blob: u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
              prod(dims) x f64 values in row-major order

Blobs are the model weights plus the ``.sn_u`` / ``.sn_v`` power-iteration
vectors, in insertion order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..specnorm import SNConfig
from .model import EncoderConfig, EncoderModel

MAGIC = b"SNCPDCKP"
VERSION = 1


def to_bytes(model: EncoderModel, extra: dict | None = None) -> bytes:
    meta = {"encoder": model.config.to_dict(), "extra": extra or {}}
    cfg = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(cfg)))
    out.write(cfg)
    arrays = model.state_arrays()
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> tuple[EncoderModel, dict]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise ParseError("not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad config block: {exc}") from exc
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes after last blob")
    enc = dict(meta["encoder"])
    sn = enc.pop("sn")
    config = EncoderConfig(**enc, sn=SNConfig(**sn) if sn is not None else None)
    model = EncoderModel.__new__(EncoderModel)
    _init_without_projection(model, config)
    model.load_arrays(arrays)
    return model, meta.get("extra", {})


def _init_without_projection(model: EncoderModel, config: EncoderConfig) -> None:
    # build the parameter layout, then overwrite; the stored weights are
    # already projected, so re-projecting would perturb them
    sn = config.sn
    config.sn = None
    EncoderModel.__init__(model, config)
    config.sn = sn
    model.sn = sn


def save(model: EncoderModel, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, extra))


def load(path: str | Path) -> tuple[EncoderModel, dict]:
    return from_bytes(Path(path).read_bytes())
