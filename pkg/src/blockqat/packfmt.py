"""Bit-exact packed storage for N-bit integers and the checkpoint container.

Packing is LSB-first: value i occupies bit positions [N*i, N*i + N) counted
from bit 0 of byte 0. Matrix payloads are packed row by row with each row
padded to a byte boundary, so rows decode independently.

Container layout (little endian):

    magic "EQAT" | version u32 | header_len u64 | header JSON (UTF-8)
    | zero padding | sections, each aligned to 64 bytes

The header lists every tensor record with its absolute byte offset/length;
offsets must be non-overlapping and inside the file.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError
from .quant import QuantSpec, avg_bits

MAGIC = b"EQAT"
VERSION = 1
ALIGN = 64


# ---------------------------------------------------------------------------
# N-bit packing
# ---------------------------------------------------------------------------

def pack(values: np.ndarray, bits: int) -> bytes:
    """Pack integers in [0, 2^bits - 1] LSB-first into bytes."""
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() > (1 << bits) - 1):
        raise DomainError(f"value outside [0, {(1 << bits) - 1}] for {bits}-bit packing")
    v = values.astype(np.uint8).reshape(-1)
    shifts = np.arange(bits, dtype=np.uint8)
    bitmat = (v[:, None] >> shifts) & 1
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def unpack(buf: bytes, bits: int, count: int) -> np.ndarray:
    """Exact inverse of pack on its image; pad bits are ignored."""
    needed = math.ceil(count * bits / 8)
    if len(buf) < needed:
        raise FormatError(f"buffer holds {len(buf)} bytes, need {needed}")
    raw = np.frombuffer(bytes(buf[:needed]), dtype=np.uint8)
    bitarr = np.unpackbits(raw, bitorder="little")[: count * bits]
    bitmat = bitarr.reshape(count, bits).astype(np.uint16)
    weights = (np.uint16(1) << np.arange(bits, dtype=np.uint16))
    return (bitmat * weights).sum(axis=1).astype(np.uint8)


def pack_rows(values: np.ndarray, bits: int) -> bytes:
    """Pack an [out, in] integer matrix with per-row byte alignment."""
    values = np.asarray(values)
    if values.min(initial=0) < 0 or values.max(initial=0) > (1 << bits) - 1:
        raise DomainError(f"value outside [0, {(1 << bits) - 1}] for {bits}-bit packing")
    out_dim, in_dim = values.shape
    shifts = np.arange(bits, dtype=np.uint8)
    bitmat = ((values.astype(np.uint8)[:, :, None] >> shifts) & 1).reshape(out_dim, in_dim * bits)
    return np.packbits(bitmat, axis=1, bitorder="little").tobytes()


def unpack_rows(buf: bytes, bits: int, out_dim: int, in_dim: int) -> np.ndarray:
    row_bytes = math.ceil(in_dim * bits / 8)
    if len(buf) < out_dim * row_bytes:
        raise FormatError(f"payload holds {len(buf)} bytes, need {out_dim * row_bytes}")
    raw = np.frombuffer(bytes(buf[: out_dim * row_bytes]), dtype=np.uint8)
    bitarr = np.unpackbits(raw.reshape(out_dim, row_bytes), axis=1, bitorder="little")
    bitmat = bitarr[:, : in_dim * bits].reshape(out_dim, in_dim, bits).astype(np.uint16)
    weights = (np.uint16(1) << np.arange(bits, dtype=np.uint16))
    return (bitmat * weights).sum(axis=2).astype(np.uint8)


# ---------------------------------------------------------------------------
# packed tensor
# ---------------------------------------------------------------------------

@dataclass
class PackedTensor:
    """Bit-packed weights plus group metadata for one [out, in] layer."""

    bits: int
    shape: tuple[int, int]
    group_size: int
    payload: bytes                      # per-row aligned N-bit weights
    zeros: bytes | np.ndarray           # packed N-bit, or float16 array
    scales: np.ndarray                  # float16 [out, n_groups]

    def __post_init__(self):
        out_dim, in_dim = self.shape
        expect = out_dim * math.ceil(in_dim * self.bits / 8)
        if len(self.payload) != expect:
            raise FormatError(f"payload length {len(self.payload)} != {expect}")

    @property
    def z_fp16(self) -> bool:
        return isinstance(self.zeros, np.ndarray)

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.group_size)

    @classmethod
    def from_arrays(cls, w_int: np.ndarray, s: np.ndarray, z: np.ndarray,
                    spec: QuantSpec, z_fp16: bool = False) -> "PackedTensor":
        out_dim, in_dim = w_int.shape
        if z_fp16:
            zeros: bytes | np.ndarray = z.astype(np.float16)
        else:
            if np.any(z != np.rint(z)):
                raise DomainError("non-integral zero points require the float16 layout")
            zeros = pack(z.astype(np.uint8).reshape(-1), spec.bits)
        return cls(bits=spec.bits, shape=(out_dim, in_dim),
                   group_size=spec.group_size, payload=pack_rows(w_int, spec.bits),
                   zeros=zeros, scales=s.astype(np.float16))

    def unpack_weights(self) -> np.ndarray:
        return unpack_rows(self.payload, self.bits, *self.shape)

    def zeros_f32(self) -> np.ndarray:
        n_groups = self.spec.n_groups(self.shape[1])
        if self.z_fp16:
            return self.zeros.astype(np.float32)
        z = unpack(self.zeros, self.bits, self.shape[0] * n_groups)
        return z.reshape(self.shape[0], n_groups).astype(np.float32)

    def scales_f32(self) -> np.ndarray:
        return self.scales.astype(np.float32)

    def avg_bits(self) -> float:
        return avg_bits(self.spec, in_dim=self.shape[1], z_fp16=self.z_fp16)

    def stored_bytes(self) -> int:
        zb = self.zeros.nbytes if self.z_fp16 else len(self.zeros)
        return len(self.payload) + zb + self.scales.nbytes


# ---------------------------------------------------------------------------
# container records
# ---------------------------------------------------------------------------

@dataclass
class Record:
    """One named binary section plus its header metadata."""

    name: str
    role: str                 # dense | packed_weight | zeros | scales
    dtype: str                # f32 | f16 | uN
    shape: tuple[int, ...]
    data: bytes
    bits: int = 0
    group_size: int = 0


def _dense_record(name: str, arr: np.ndarray) -> Record:
    dtype = {np.dtype(np.float32): "f32", np.dtype(np.float16): "f16"}[arr.dtype]
    return Record(name=name, role="dense", dtype=dtype, shape=arr.shape, data=arr.tobytes())


def records_from_packed(name: str, pt: PackedTensor) -> list[Record]:
    recs = [Record(name=f"{name}.packed", role="packed_weight", dtype=f"u{pt.bits}",
                   shape=pt.shape, data=pt.payload, bits=pt.bits, group_size=pt.group_size)]
    n_groups = pt.spec.n_groups(pt.shape[1])
    if pt.z_fp16:
        recs.append(Record(name=f"{name}.zeros", role="zeros", dtype="f16",
                           shape=(pt.shape[0], n_groups), data=pt.zeros.tobytes(),
                           bits=pt.bits, group_size=pt.group_size))
    else:
        recs.append(Record(name=f"{name}.zeros", role="zeros", dtype=f"u{pt.bits}",
                           shape=(pt.shape[0], n_groups), data=pt.zeros,
                           bits=pt.bits, group_size=pt.group_size))
    recs.append(Record(name=f"{name}.scales", role="scales", dtype="f16",
                       shape=(pt.shape[0], n_groups), data=pt.scales.tobytes(),
                       bits=pt.bits, group_size=pt.group_size))
    return recs


def packed_from_records(recs: dict[str, Record], name: str) -> PackedTensor:
    pw = recs[f"{name}.packed"]
    zr = recs[f"{name}.zeros"]
    sc = recs[f"{name}.scales"]
    zeros: bytes | np.ndarray
    if zr.dtype == "f16":
        zeros = np.frombuffer(zr.data, dtype=np.float16).reshape(zr.shape).copy()
    else:
        zeros = zr.data
    scales = np.frombuffer(sc.data, dtype=np.float16).reshape(sc.shape).copy()
    return PackedTensor(bits=pw.bits, shape=tuple(pw.shape), group_size=pw.group_size,
                        payload=pw.data, zeros=zeros, scales=scales)


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _header_bytes(meta: dict, records: list[Record], offsets: list[int]) -> bytes:
    tensors = []
    for rec, off in zip(records, offsets):
        tensors.append({
            "name": rec.name, "role": rec.role, "dtype": rec.dtype,
            "shape": list(rec.shape), "bits": rec.bits, "group_size": rec.group_size,
            "byte_offset": off, "byte_length": len(rec.data),
        })
    doc = {"meta": meta, "tensors": tensors}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: str, meta: dict, records: list[Record]) -> None:
    """Serialize records; deterministic for identical inputs."""
    # offsets depend on the header length, whose digits depend on offsets:
    # iterate to a fixed point (converges in a couple of rounds).
    offsets = [0] * len(records)
    for _ in range(8):
        header = _header_bytes(meta, records, offsets)
        base = _align(4 + 4 + 8 + len(header))
        new_offsets = []
        pos = base
        for rec in records:
            new_offsets.append(pos)
            pos = _align(pos + len(rec.data))
        if new_offsets == offsets:
            break
        offsets = new_offsets
    else:
        raise FormatError("container offsets failed to stabilize")

    header = _header_bytes(meta, records, offsets)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        pos = 4 + 4 + 8 + len(header)
        for rec, off in zip(records, offsets):
            fh.write(b"\0" * (off - pos))
            fh.write(rec.data)
            pos = off + len(rec.data)


def read_container(path: str) -> tuple[dict, dict[str, Record]]:
    """Parse and validate a container; returns (meta, records by name)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"truncated container: {len(blob)} bytes at offset 0")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    if 16 + header_len > len(blob):
        raise FormatError(f"header length {header_len} exceeds file at offset 8")
    try:
        doc = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header at offset 16: {exc}") from exc

    records: dict[str, Record] = {}
    spans: list[tuple[int, int]] = []
    for t in doc["tensors"]:
        off, length = t["byte_offset"], t["byte_length"]
        if off % ALIGN != 0:
            raise FormatError(f"section {t['name']} misaligned at offset {off}")
        if off < 16 + header_len or off + length > len(blob):
            raise FormatError(f"section {t['name']} outside file at offset {off}")
        for o2, l2 in spans:
            if off < o2 + l2 and o2 < off + length:
                raise FormatError(f"section {t['name']} overlaps another at offset {off}")
        spans.append((off, length))
        records[t["name"]] = Record(
            name=t["name"], role=t["role"], dtype=t["dtype"], shape=tuple(t["shape"]),
            data=blob[off:off + length], bits=t["bits"], group_size=t["group_size"])
    return doc["meta"], records


def dense_to_array(rec: Record) -> np.ndarray:
    dtype = {"f32": np.float32, "f16": np.float16}[rec.dtype]
    arr = np.frombuffer(rec.data, dtype=dtype).reshape(rec.shape)
    return arr.astype(np.float32)


def dense_record(name: str, arr: np.ndarray, fp16: bool = False) -> Record:
    stored = arr.astype(np.float16) if fp16 else arr.astype(np.float32)
    return _dense_record(name, stored)


# ---------------------------------------------------------------------------
# size reporting
# ---------------------------------------------------------------------------

def report_size(path: str) -> dict:
    """Per-tensor bits/param plus totals and compression ratio vs 16-bit.

    ratio = 1 - stored_bytes / (2 bytes * param_count).
    """
    meta, records = read_container(path)
    rows = []
    total_bytes = 0
    total_params = 0
    q_bits = 0.0
    q_params = 0
    by_prefix: dict[str, dict[str, Record]] = {}
    for rec in records.values():
        if rec.role == "dense":
            params = int(np.prod(rec.shape)) if rec.shape else 1
            nbytes = len(rec.data)
            rows.append({"name": rec.name, "kind": "dense", "params": params,
                         "bits_per_param": 8 * nbytes / params, "bytes": nbytes})
            total_bytes += nbytes
            total_params += params
        else:
            prefix = rec.name.rsplit(".", 1)[0]
            by_prefix.setdefault(prefix, {})[rec.name] = rec
    for prefix, recs in sorted(by_prefix.items()):
        pt = packed_from_records(recs, prefix)
        params = pt.shape[0] * pt.shape[1]
        bits = pt.avg_bits()
        rows.append({"name": prefix, "kind": f"u{pt.bits}g{pt.group_size}",
                     "params": params, "bits_per_param": bits,
                     "bytes": pt.stored_bytes()})
        total_bytes += pt.stored_bytes()
        total_params += params
        q_bits += bits * params
        q_params += params
    ratio = 1.0 - total_bytes / (2.0 * total_params) if total_params else 0.0
    return {
        "rows": sorted(rows, key=lambda r: r["name"]),
        "total_bytes": total_bytes,
        "total_gib": total_bytes / 2 ** 30,
        "total_params": total_params,
        "avg_quantized_bits": q_bits / q_params if q_params else None,
        "compression_ratio": ratio,
        "meta": meta,
    }
