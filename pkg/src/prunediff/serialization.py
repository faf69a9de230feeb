"""Binary checkpoint ("PGPD") and feature-trace ("PGPT") files.

Layout, all integers little-endian u32::

    magic(4) version header tensor_count
    per tensor: name_len name(utf-8) shape[4] float32 payload
    crc32 of every preceding byte

A checkpoint header is a length-prefixed JSON blob (topology plus
conditioning mode). A trace header is the 64-char topology hash followed by
a length-prefixed JSON metadata blob. Tensors of rank < 4 are stored with
leading unit dimensions; rank-5 trace features are split per step.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

CKPT_MAGIC = b"PGPD"
TRACE_MAGIC = b"PGPT"
VERSION = 1


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _shape4(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise FormatError(f"tensor rank {len(shape)} exceeds 4")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def _write_tensors(buf: io.BytesIO, tensors: list[tuple[str, np.ndarray]]) -> None:
    buf.write(_u32(len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(_u32(len(raw)))
        buf.write(raw)
        for s in _shape4(arr.shape):
            buf.write(_u32(s))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("file is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def json(self) -> dict:
        return json.loads(self.take(self.u32()).decode("utf-8"))

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            shape = tuple(self.u32() for _ in range(4))
            n = int(np.prod(shape))
            arr = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
            out.append((name, arr))
        return out


def _seal(buf: io.BytesIO) -> bytes:
    body = buf.getvalue()
    return body + _u32(zlib.crc32(body) & 0xFFFFFFFF)


def _open(blob: bytes, magic: bytes) -> _Reader:
    if len(blob) < 12:
        raise FormatError("file is too short")
    body, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch: file is corrupted")
    r = _Reader(body)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (this build reads {VERSION})")
    return r


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model) -> bytes:
    header = {"topology": model.topology.to_dict(), "conditioning": model.conditioner.mode, "target": model.target}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(_u32(VERSION))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(_u32(len(raw)))
    buf.write(raw)
    _write_tensors(buf, [(n, p.data) for n, p in model.named_params()])
    return _seal(buf)


def model_from_bytes(blob: bytes):
    from .diffusion import TARGETS, build_sr_model
    from .unet import UNetTopology

    r = _open(blob, CKPT_MAGIC)
    header = r.json()
    tensors = r.tensors()
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after tensor table")
    if header.get("target") not in TARGETS:
        raise FormatError(f"unknown diffusion target {header.get('target')!r}")
    model = build_sr_model(UNetTopology.from_dict(header["topology"]), seed=0, mode=header["conditioning"],
                           target=header["target"])
    params = dict(model.named_params())
    names = [n for n, _ in tensors]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise FormatError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in tensors:
        p = params[name]
        if arr.size != p.size:
            raise FormatError(f"{name}: stored {arr.size} values, model expects shape {p.shape}")
        p.data = arr.reshape(p.shape).copy()
    return model


def save_checkpoint(model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# traces


def trace_bytes(trace) -> bytes:
    buf = io.BytesIO()
    buf.write(TRACE_MAGIC)
    buf.write(_u32(VERSION))
    th = trace.metadata["topology_hash"].encode("ascii")
    if len(th) != 64:
        raise FormatError("topology hash must be 64 hex characters")
    buf.write(th)
    raw = json.dumps(trace.metadata, sort_keys=True).encode("utf-8")
    buf.write(_u32(len(raw)))
    buf.write(raw)
    tensors = []
    for name in sorted(trace.features):
        for t, f in enumerate(trace.features[name]):
            tensors.append((f"{name}/{t:04d}", f))
    for (j, k) in sorted(trace.blocks):
        for step, (a, o) in sorted(trace.blocks[(j, k)].items()):
            tensors.append((f"block/{j}/{k}/{step:04d}/in", a))
            tensors.append((f"block/{j}/{k}/{step:04d}/out", o))
    _write_tensors(buf, tensors)
    return _seal(buf)


def trace_from_bytes(blob: bytes):
    from .profiler import FeatureTrace

    r = _open(blob, TRACE_MAGIC)
    th = r.take(64).decode("ascii")
    meta = r.json()
    if meta.get("topology_hash") != th:
        raise FormatError("trace header hash disagrees with metadata")
    per: dict[str, list[np.ndarray]] = {}
    blocks: dict = {}
    for name, arr in r.tensors():
        parts = name.split("/")
        if parts[0] == "block":
            j, k, step, side = int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
            slot = blocks.setdefault((j, k), {}).setdefault(step, [None, None])
            slot[0 if side == "in" else 1] = arr
        else:
            per.setdefault(parts[0], []).append(arr)
    features = {n: np.stack(v) for n, v in per.items()}
    blocks = {key: {s: (v[0], v[1]) for s, v in d.items()} for key, d in blocks.items()}
    return FeatureTrace(features, meta, blocks)


def save_trace(trace, path) -> None:
    with open(path, "wb") as fh:
        fh.write(trace_bytes(trace))


def load_trace(path):
    with open(path, "rb") as fh:
        return trace_from_bytes(fh.read())
