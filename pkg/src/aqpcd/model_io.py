"""``.aqpm`` model files: float (trainable) and INT8 (deployable) detectors.

Layout, all little-endian::

    0   4s   magic "AQPM"
    4   u16  schema version
    6   u16  kind (0 = float, 1 = int8)
    8   chunks: 4s tag, u32 length, payload
          "HEAD"  UTF-8 JSON (graph descriptor, config, metadata, tensor table, quant params)
          "DATA"  tensor bytes, concatenated in tensor-table order
          "CRC "  u32 CRC-32 of every byte before this chunk
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import QConv
from .model import Detector, ModelConfig, QuantizedDetector
from .tensor import ConvSpec
from . import quant as Q

MAGIC = b"AQPM"
SCHEMA_VERSION = 1
KIND_FLOAT, KIND_INT8 = 0, 1
_PREFIX = struct.Struct("<4sHH")
_CHUNK = struct.Struct("<4sI")


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class SchemaVersionError(ModelFormatError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"model schema version {found} is not supported (this reader handles up to {supported})")
        self.found, self.supported = found, supported


def _pack(kind: int, header: dict, tensors: dict[str, np.ndarray], version: int = SCHEMA_VERSION) -> bytes:
    table, blobs, off = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": off, "nbytes": len(raw)})
        blobs.append(raw)
        off += len(raw)
    header = {**header, "tensors": table}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    data = b"".join(blobs)
    body = _PREFIX.pack(MAGIC, version, kind) + _CHUNK.pack(b"HEAD", len(head)) + head + _CHUNK.pack(b"DATA", len(data)) + data
    crc = struct.pack("<I", zlib.crc32(body))
    return body + _CHUNK.pack(b"CRC ", 4) + crc


def _unpack(blob: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise ModelFormatError(f"file too short ({len(blob)} bytes)")
    magic, version, kind = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(version, SCHEMA_VERSION)
    chunks, pos = {}, _PREFIX.size
    while pos < len(blob):
        if pos + _CHUNK.size > len(blob):
            raise ModelFormatError(f"truncated chunk header at byte {pos}")
        tag, n = _CHUNK.unpack_from(blob, pos)
        start = pos + _CHUNK.size
        if start + n > len(blob):
            raise ModelFormatError(f"chunk {tag!r} at byte {pos} overruns the file")
        if tag == b"CRC ":
            stored = struct.unpack_from("<I", blob, start)[0]
            if zlib.crc32(blob[:pos]) != stored:
                raise ChecksumError("checksum mismatch: file is corrupt")
            chunks[tag] = stored
        else:
            chunks[tag] = blob[start : start + n]
        pos = start + n
    if b"CRC " not in chunks:
        raise ChecksumError("missing checksum chunk")
    if b"HEAD" not in chunks or b"DATA" not in chunks:
        raise ModelFormatError("missing HEAD or DATA chunk")
    header = json.loads(chunks[b"HEAD"].decode())
    data = chunks[b"DATA"]
    tensors = {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)), offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.dtype(t["dtype"]).newbyteorder("="))
    return kind, header, tensors


def _pj(p: Q.QuantParams) -> list:
    return [float(p.scale), int(p.zero_point)]


def _pl(v) -> Q.QuantParams:
    return Q.QuantParams(float(v[0]), int(v[1]))


def to_bytes(model, metadata: dict | None = None) -> bytes:
    meta = dict(metadata or {})
    if isinstance(model, QuantizedDetector):
        tensors, qconv = {}, {}
        for name, c in model.named_convs():
            for k, v in c.tensors().items():
                tensors[f"{name}/{k}"] = v
            qconv[name] = c.qparams()
        extra = {k: _pj(v) for k, v in model.extra_qparams().items()}
        header = {"graph": model.describe(), "config": model.cfg.to_dict(), "metadata": meta, "qparams": {"conv": qconv, "extra": extra}}
        return _pack(KIND_INT8, header, tensors)
    header = {"graph": model.describe(), "config": model.cfg.to_dict(), "metadata": meta, "fused": model.fused, "qat": model.qat}
    return _pack(KIND_FLOAT, header, model.state())


def from_bytes(blob: bytes):
    kind, header, tensors = _unpack(blob)
    cfg = ModelConfig.from_dict(header["config"])
    if kind == KIND_FLOAT:
        model = Detector(cfg)
        if header["fused"]:
            model.fuse()
        model.load_state(tensors)
        model.set_qat(header["qat"]).eval()
        return model
    if kind != KIND_INT8:
        raise ModelFormatError(f"unknown model kind {kind}")
    rows = {r["name"]: r for r in header["graph"]["layers"]}
    convs = {}
    for name, qp in header["qparams"]["conv"].items():
        r = rows[name]
        spec = ConvSpec(r["k"], r["cin"], r["cout"], r["stride"], r["padding"], r["groups"])
        prefix = name + "/"
        t = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
        convs[name] = QConv.from_tensors(spec, r["act"], t, qp)
    extra = {k: _pl(v) for k, v in header["qparams"]["extra"].items()}
    return QuantizedDetector.assemble(cfg, convs, extra)


def save(model, path, metadata: dict | None = None) -> int:
    blob = to_bytes(model, metadata)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path):
    return from_bytes(Path(path).read_bytes())


def read_header(path) -> dict:
    """Graph descriptor and metadata without building the model."""
    kind, header, _ = _unpack(Path(path).read_bytes())
    header["kind"] = "int8" if kind == KIND_INT8 else "float"
    return header
