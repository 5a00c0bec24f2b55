"""Binary shadow-record files: the contract between farm and attack.

Layout (version 1, all integers little-endian):

  magic   4 bytes  b"PIA1"
  u32     format version (1)
  u16     architecture-id length, then that many ascii bytes
  u16 x3  input shape (channels, height, width)
  u64     master seed of the producing farm run
  u32     parameter count
  u32     boundary-entry count, then per entry:
            u32 layer index, u8 layer kind (0=conv, 1=fc),
            u8 param kind (0=kernel, 1=bias), u64 offset, u64 length
  u32     record count, then per record:
            u8 property label, f32 achieved accuracy, u64 seed,
            u32 shadow index, u16 retrain count,
            f32[parameter count] flattened weights

Weight vectors follow the frozen flattening order: layer order, kernel
before bias within a layer, row-major within each tensor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .architectures import BoundaryEntry
from .errors import FormatError

MAGIC = b"PIA1"
VERSION = 1

_LAYER_KIND = {"conv": 0, "fc": 1}
_LAYER_KIND_REV = {v: k for k, v in _LAYER_KIND.items()}
_PARAM_KIND = {"kernel": 0, "bias": 1}
_PARAM_KIND_REV = {v: k for k, v in _PARAM_KIND.items()}


@dataclass
class ShadowRecord:
    """One trained shadow model, flattened."""

    weights: np.ndarray  # float32, full flattening
    property_label: int  # {0, 1}
    accuracy: float
    seed: int
    shadow_index: int
    retrain_count: int = 0

    def __eq__(self, other):
        return (isinstance(other, ShadowRecord)
                and np.array_equal(self.weights, other.weights)
                and self.property_label == other.property_label
                and np.float32(self.accuracy) == np.float32(other.accuracy)
                and self.seed == other.seed
                and self.shadow_index == other.shadow_index
                and self.retrain_count == other.retrain_count)


@dataclass
class RecordFile:
    """A shadow-record file's header plus its records."""

    arch_id: str
    input_shape: tuple[int, int, int]
    master_seed: int
    boundaries: tuple[BoundaryEntry, ...]
    records: list[ShadowRecord]

    @property
    def parameter_count(self) -> int:
        return sum(e.length for e in self.boundaries)


def persist_records(rf: RecordFile, path: str) -> None:
    pcount = rf.parameter_count
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        arch = rf.arch_id.encode("ascii")
        fh.write(struct.pack("<H", len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<HHH", *rf.input_shape))
        fh.write(struct.pack("<Q", rf.master_seed))
        fh.write(struct.pack("<I", pcount))
        fh.write(struct.pack("<I", len(rf.boundaries)))
        for e in rf.boundaries:
            fh.write(struct.pack("<IBBQQ", e.layer_index,
                                 _LAYER_KIND[e.layer_kind],
                                 _PARAM_KIND[e.param_kind], e.offset, e.length))
        fh.write(struct.pack("<I", len(rf.records)))
        for r in rf.records:
            if r.weights.shape != (pcount,):
                raise FormatError(
                    f"record {r.shadow_index}: weight length {r.weights.size} "
                    f"!= parameter count {pcount}")
            fh.write(struct.pack("<BfQIH", r.property_label,
                                 np.float32(r.accuracy), r.seed,
                                 r.shadow_index, r.retrain_count))
            fh.write(r.weights.astype("<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise FormatError(f"truncated file at byte offset {self.pos}")
        out = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return out

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated file at byte offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_records(path: str) -> RecordFile:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise FormatError(f"record file {path!r} not found") from None
    rd = _Reader(blob)
    if rd.take_bytes(4) != MAGIC:
        raise FormatError("bad magic at byte offset 0, not a PIA1 record file")
    (version,) = rd.take("<I")
    if version != VERSION:
        raise FormatError(f"unsupported record-file version {version}")
    (alen,) = rd.take("<H")
    arch_id = rd.take_bytes(alen).decode("ascii")
    input_shape = rd.take("<HHH")
    (master_seed,) = rd.take("<Q")
    (pcount,) = rd.take("<I")
    (n_bounds,) = rd.take("<I")
    boundaries = []
    for _ in range(n_bounds):
        layer_index, lkind, pkind, offset, length = rd.take("<IBBQQ")
        if lkind not in _LAYER_KIND_REV or pkind not in _PARAM_KIND_REV:
            raise FormatError(f"bad boundary entry at byte offset {rd.pos}")
        boundaries.append(BoundaryEntry(layer_index, _LAYER_KIND_REV[lkind],
                                        _PARAM_KIND_REV[pkind], offset, length))
    total = sum(e.length for e in boundaries)
    if total != pcount:
        raise FormatError(
            f"boundary table sums to {total}, header says {pcount}")
    (n_records,) = rd.take("<I")
    records = []
    for _ in range(n_records):
        label, accuracy, seed, shadow_index, retrain = rd.take("<BfQIH")
        if label not in (0, 1):
            raise FormatError(f"bad property label at byte offset {rd.pos}")
        raw = rd.take_bytes(pcount * 4)
        weights = np.frombuffer(raw, dtype="<f4").copy()
        records.append(ShadowRecord(weights, int(label), float(accuracy),
                                    int(seed), int(shadow_index), int(retrain)))
    if rd.pos != len(blob):
        raise FormatError(
            f"{len(blob) - rd.pos} trailing bytes at byte offset {rd.pos}")
    return RecordFile(arch_id, tuple(input_shape), master_seed,
                      tuple(boundaries), records)
