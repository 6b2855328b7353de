"""Compiled lookup tables: index arithmetic, retrieval, binary format.

A table maps a d-dimensional grid index (one axis per active sampling
tap) to m stored output values.  Axis j has M_j = floor(256 / b_j) + 1
grid lines over the 8-bit input domain, so lookup cost is d scalar
roundings plus one memory read, with zero multiply-accumulate.

File format (little-endian throughout):

    magic  'RFLT'                     4 bytes
    version u16 (= 1)
    d       u8
    reserved u8 (0)
    per dimension: M_j u32, b_j f32
    m       u32
    B_v     u8   bytes per value
    vtype   u8   0 = u8, 1 = i16, 2 = f32
    pattern_id u32
    value block, storage_bytes(M, m, B_v) bytes, row-major,
        last index dimension fastest, value channels innermost
    crc32 of everything prior, u32

Parse checks run in order: magic, version, header fields, payload
length, checksum, trailing bytes; each failure raises its own error.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadChecksum,
    BadMagic,
    BadVersion,
    DimensionTooLarge,
    IndexOutOfBounds,
    InvalidField,
    InvalidInput,
    LengthMismatch,
    StorageOverflow,
    Truncated,
)
from .lvq import DiagonalLattice, round_half_away

MAGIC = b"RFLT"
FORMAT_VERSION = 1

#: value-type tag -> (numpy dtype, bytes per value)
VALUE_TYPES = {
    "u8": (np.dtype("<u1"), 1),
    "i16": (np.dtype("<i2"), 2),
    "f32": (np.dtype("<f4"), 4),
}
_TAG_TO_NAME = {0: "u8", 1: "i16", 2: "f32"}
_NAME_TO_TAG = {v: k for k, v in _TAG_TO_NAME.items()}

_I64_MAX = 2**63 - 1


def grid_size_for_step(step: float) -> int:
    """Distinct indices along one axis of the 8-bit domain.

    floor(256 / b) + 1; the tiny slack absorbs float roundoff when b was
    derived as 256 / (M - 1).
    """
    if not np.isfinite(step) or step <= 0:
        raise InvalidInput(f"step must be positive, got {step}")
    return int(np.floor(256.0 / float(step) + 1e-6)) + 1


def storage_bytes(grid_sizes, m: int, bytes_per_value: int) -> int:
    """Total value-block size: (prod M_j) * m * B_v."""
    sizes = [int(s) for s in np.atleast_1d(grid_sizes)]
    if any(s <= 0 for s in sizes) or m <= 0 or bytes_per_value <= 0:
        raise InvalidInput("grid sizes, m and bytes_per_value must be positive")
    total = 1
    for s in sizes:
        total *= s
    total *= int(m) * int(bytes_per_value)
    if total > _I64_MAX:
        raise StorageOverflow(f"table of {total} bytes exceeds 2^63 - 1")
    return total


@dataclass(frozen=True, eq=False)
class TableHeader:
    """Geometry and layout of one compiled table."""

    grid_sizes: tuple[int, ...]
    steps: np.ndarray  # float32, one per index dimension
    entry_arity: int
    value_type: str
    pattern_id: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.grid_sizes)
        steps = np.asarray(self.steps, dtype=np.float32).reshape(-1)
        if len(sizes) == 0 or len(sizes) != steps.size:
            raise InvalidInput("grid_sizes and steps must align and be nonempty")
        if any(s < 1 for s in sizes):
            raise InvalidInput("grid sizes must be >= 1")
        if not np.all(np.isfinite(steps)) or np.any(steps <= 0):
            raise InvalidInput("steps must be finite and positive")
        if self.value_type not in VALUE_TYPES:
            raise InvalidInput(f"unknown value type {self.value_type!r}")
        if self.entry_arity < 1:
            raise InvalidInput("entry_arity must be >= 1")
        if not 0 <= int(self.pattern_id) < 2**32:
            raise InvalidInput("pattern_id must fit in u32")
        object.__setattr__(self, "grid_sizes", sizes)
        object.__setattr__(self, "steps", steps)

    @property
    def d(self) -> int:
        return len(self.grid_sizes)

    @property
    def bytes_per_value(self) -> int:
        return VALUE_TYPES[self.value_type][1]

    @property
    def dtype(self) -> np.dtype:
        return VALUE_TYPES[self.value_type][0]

    @property
    def entry_count(self) -> int:
        return int(np.prod(self.grid_sizes, dtype=object))

    def storage_bytes(self) -> int:
        return storage_bytes(self.grid_sizes, self.entry_arity,
                             self.bytes_per_value)

    def lattice(self) -> DiagonalLattice:
        return DiagonalLattice(self.steps.astype(np.float64))


@dataclass(frozen=True, eq=False)
class LookupTable:
    """Header plus the flat value block.

    values has shape (prod M_j * m,), row-major over indices with the
    last dimension fastest and the m value channels innermost.  Immutable
    after build; concurrent lookups are safe.
    """

    header: TableHeader
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=self.header.dtype)
        expected = self.header.entry_count * self.header.entry_arity
        if values.size != expected:
            raise InvalidInput(
                f"value block has {values.size} items, expected {expected}")
        if not np.all(np.isfinite(values.astype(np.float64))):
            raise InvalidInput("table values must be finite")
        object.__setattr__(self, "values", values.reshape(-1))

    def entries(self) -> np.ndarray:
        """View of shape (entry_count, m)."""
        return self.values.reshape(self.header.entry_count,
                                   self.header.entry_arity)


def flat_offset(header: TableHeader, index) -> int:
    """Row-major offset of a grid index (mixed-radix, last axis fastest)."""
    index = np.atleast_1d(np.asarray(index, dtype=np.int64))
    if index.size != header.d:
        raise IndexOutOfBounds(f"index has {index.size} axes, table has {header.d}")
    off = 0
    for i, m in zip(index, header.grid_sizes):
        if i < 0 or i >= m:
            raise IndexOutOfBounds(f"index {tuple(index)} outside grid {header.grid_sizes}")
        off = off * m + int(i)
    return off


def offset_to_index(header: TableHeader, offset: int) -> tuple[int, ...]:
    """Inverse of flat_offset."""
    if not 0 <= offset < header.entry_count:
        raise IndexOutOfBounds(f"offset {offset} outside [0, {header.entry_count})")
    idx = []
    for m in reversed(header.grid_sizes):
        idx.append(offset % m)
        offset //= m
    return tuple(reversed(idx))


def _index_planes(header: TableHeader, x: np.ndarray) -> np.ndarray:
    """Per-axis rounded and clamped grid indices for (..., d) inputs."""
    t = x / header.steps.astype(np.float64)
    idx = round_half_away(t).astype(np.int64)
    sizes = np.asarray(header.grid_sizes, dtype=np.int64)
    return np.clip(idx, 0, sizes - 1)


def _flat_planes(header: TableHeader, idx: np.ndarray) -> np.ndarray:
    off = np.zeros(idx.shape[:-1], dtype=np.int64)
    for j, m in enumerate(header.grid_sizes):
        off = off * m + idx[..., j]
    return off


def lookup_nearest(table: LookupTable, x) -> np.ndarray:
    """Decode x per axis, clamp to the grid, return the stored m-vector.

    Accepts (..., d) batches and returns (..., m) in the table's stored
    dtype.  No multiply-accumulate over kernel weights happens here; the
    whole network response is already baked into the entry.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != table.header.d:
        raise InvalidInput(f"expected last axis {table.header.d}")
    idx = _index_planes(table.header, x)
    flat = _flat_planes(table.header, idx)
    return table.entries()[flat]


MAX_INTERP_DIM = 4


def lookup_interpolated(table: LookupTable, x) -> np.ndarray:
    """Multilinear interpolation over the 2^d surrounding cell corners.

    Exact at grid points, continuous everywhere, saturating beyond the
    outermost grid lines.  Returns float64 (..., m).  d <= 4 keeps the
    corner fetches to at most 16.
    """
    header = table.header
    if header.d > MAX_INTERP_DIM:
        raise DimensionTooLarge(f"interpolation supports d <= {MAX_INTERP_DIM}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != header.d:
        raise InvalidInput(f"expected last axis {header.d}")
    t = x / header.steps.astype(np.float64)
    sizes = np.asarray(header.grid_sizes, dtype=np.int64)
    base = np.clip(np.floor(t).astype(np.int64), 0, np.maximum(sizes - 2, 0))
    frac = np.clip(t - base, 0.0, 1.0)
    # Degenerate axes (a single grid line) always read corner 0.
    frac = np.where(sizes == 1, 0.0, frac)

    entries = table.entries().astype(np.float64)
    out = np.zeros(x.shape[:-1] + (header.entry_arity,), dtype=np.float64)
    for corner in range(2 ** header.d):
        bits = np.array([(corner >> (header.d - 1 - j)) & 1
                         for j in range(header.d)], dtype=np.int64)
        idx = np.clip(base + bits, 0, sizes - 1)
        w = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=-1)
        out += w[..., None] * entries[_flat_planes(header, idx)]
    return out


# --- binary serialization ---------------------------------------------------


def serialize(table: LookupTable) -> bytes:
    """Encode the table in the RFLT byte format (bit-exact round trip)."""
    h = table.header
    parts = [MAGIC, struct.pack("<HBB", FORMAT_VERSION, h.d, 0)]
    for m_j, b_j in zip(h.grid_sizes, h.steps):
        parts.append(struct.pack("<If", m_j, float(b_j)))
    parts.append(struct.pack("<IBBI", h.entry_arity, h.bytes_per_value,
                             _NAME_TO_TAG[h.value_type], h.pattern_id))
    parts.append(table.values.astype(h.dtype, copy=False).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(
                f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data: bytes) -> LookupTable:
    """Decode RFLT bytes; each corruption class raises its own error."""
    r = _Reader(bytes(data))
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r} != {MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise BadVersion(f"version {version}, expected {FORMAT_VERSION}")
    d, _reserved = r.unpack("<BB")
    if d < 1:
        raise InvalidField("index dimension must be >= 1")
    sizes, steps = [], []
    for _ in range(d):
        m_j, b_j = r.unpack("<If")
        sizes.append(m_j)
        steps.append(b_j)
    arity, b_v, tag, pattern_id = r.unpack("<IBBI")
    if any(s < 1 for s in sizes):
        raise InvalidField("grid sizes must be >= 1")
    if any(not np.isfinite(b) or b <= 0 for b in steps):
        raise InvalidField("steps must be finite and positive")
    if arity < 1:
        raise InvalidField("entry arity must be >= 1")
    if tag not in _TAG_TO_NAME:
        raise InvalidField(f"unknown value-type tag {tag}")
    vtype = _TAG_TO_NAME[tag]
    if b_v != VALUE_TYPES[vtype][1]:
        raise InvalidField(
            f"bytes-per-value {b_v} inconsistent with value type {vtype}")
    try:
        nbytes = storage_bytes(sizes, arity, b_v)
    except StorageOverflow as exc:
        raise InvalidField(str(exc)) from exc
    block = r.take(nbytes)
    (crc_stored,) = r.unpack("<I")
    crc_actual = zlib.crc32(r.data[:r.pos - 4])
    if crc_stored != crc_actual:
        raise BadChecksum(f"crc {crc_stored:#010x} != {crc_actual:#010x}")
    if r.pos != len(r.data):
        raise LengthMismatch(f"{len(r.data) - r.pos} trailing bytes")
    header = TableHeader(grid_sizes=tuple(sizes),
                         steps=np.asarray(steps, dtype=np.float32),
                         entry_arity=arity, value_type=vtype,
                         pattern_id=pattern_id)
    values = np.frombuffer(block, dtype=header.dtype)
    return LookupTable(header=header, values=values)


def save_table(table: LookupTable, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(table))


def load_table(path) -> LookupTable:
    with open(path, "rb") as f:
        return deserialize(f.read())
