"""Binary checkpoint files.

Layout (integers little-endian unless noted)::

    b"MSIF"                     magic
    u32                         format version
    u16 + bytes                 config hash (utf-8)
    u32 + bytes                 metadata JSON (utf-8): stage, objective, grad norm, ...
    u32                         segment count
      u16 + bytes, u64, u64     name, offset, length     (per segment)
    u64                         payload length (values)
    f64 * n                     parameter payload
    u32                         CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import ParamVector, Segment
from .errors import CheckpointFormatError, SegmentError
from .trainer import Checkpoint

MAGIC = b"MSIF"
VERSION = 1


def _pack_str(s, width):
    raw = s.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def dumps(ckpt):
    meta = {
        "stage": ckpt.stage,
        "objective_value": ckpt.objective_value,
        "grad_norm": ckpt.grad_norm,
        "mode": ckpt.mode,
        "proximal_alpha": ckpt.proximal_alpha,
        "converged": bool(ckpt.converged),
        "steps": int(ckpt.steps),
        "meta": ckpt.meta,
    }
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.config_hash, "H"),
             _pack_str(json.dumps(meta, sort_keys=True), "I"),
             struct.pack("<I", len(ckpt.params.segments))]
    for s in ckpt.params.segments:
        parts += [_pack_str(s.name, "H"), struct.pack("<QQ", s.offset, s.length)]
    data = np.ascontiguousarray(ckpt.params.data, dtype="<f8")
    parts += [struct.pack("<Q", data.size), data.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def string(self, width):
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def loads(raw):
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}; not an msif checkpoint")
    r = _Reader(raw)
    r.take(4)
    (version,) = r.unpack("I")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(raw) < 8:
        raise CheckpointFormatError("truncated checkpoint")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointFormatError("checksum mismatch")
    config_hash = r.string("H")
    meta = json.loads(r.string("I"))
    (nseg,) = r.unpack("I")
    segs = []
    for _ in range(nseg):
        name = r.string("H")
        offset, length = r.unpack("QQ")
        segs.append(Segment(name, offset, length))
    (n,) = r.unpack("Q")
    data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
    if r.pos != len(raw) - 4:
        raise CheckpointFormatError("trailing bytes before checksum")
    try:
        params = ParamVector(segs, data)
    except SegmentError as exc:
        raise CheckpointFormatError(f"corrupt segment table: {exc}") from exc
    return Checkpoint(params, meta["objective_value"], meta["grad_norm"], config_hash, meta["stage"],
                      mode=meta["mode"], proximal_alpha=meta["proximal_alpha"],
                      converged=meta["converged"], steps=meta["steps"], meta=meta.get("meta", {}))


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
