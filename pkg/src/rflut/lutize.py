"""Compile a trained network into a lookup table and verify fidelity.

Enumeration walks every grid index of the network's (step-snapped)
lattice, evaluates the post-gather stack on the decoded grid point, and
stores the outputs in the table's value type.  The walk is chunked over
contiguous flat-offset ranges, so partitioned builds are byte-identical
to sequential ones.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import FidelityError, StorageOverflow
from .lvq import round_half_away
from .refnet import TinyNet, stack_forward
from .sampling import pattern_id
from .table import (
    LookupTable,
    TableHeader,
    grid_size_for_step,
    lookup_interpolated,
    lookup_nearest,
    storage_bytes,
)

#: Desk-scale cap on a single compiled table.
DEFAULT_MAX_BYTES = 1 << 30


def thread_count() -> int:
    """Worker cap from RFE_LUT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("RFE_LUT_THREADS", "1")))
    except ValueError:
        return 1


def value_quantize(values: np.ndarray, value_type: str) -> np.ndarray:
    """Round-half-away with saturation into the table value type."""
    values = np.asarray(values, dtype=np.float64)
    if value_type == "u8":
        return np.clip(round_half_away(values), 0, 255).astype(np.uint8)
    if value_type == "i16":
        return np.clip(round_half_away(values), -32768, 32767).astype("<i2")
    return values.astype("<f4")


def value_step(value_type: str) -> float:
    """Quantization step of the stored value type (0 for f32)."""
    return 0.0 if value_type == "f32" else 1.0


def _indices_for_offsets(grid_sizes, offsets: np.ndarray) -> np.ndarray:
    """Mixed-radix expansion of flat offsets -> (N, d) grid indices."""
    out = np.empty((offsets.size, len(grid_sizes)), dtype=np.int64)
    rem = offsets.astype(np.int64)
    for j in range(len(grid_sizes) - 1, -1, -1):
        out[:, j] = rem % grid_sizes[j]
        rem = rem // grid_sizes[j]
    return out


def _header_for_net(net: TinyNet) -> TableHeader:
    steps32 = net.lattice.steps.astype(np.float32)
    sizes = tuple(grid_size_for_step(float(s)) for s in steps32)
    return TableHeader(grid_sizes=sizes, steps=steps32,
                       entry_arity=net.out_arity, value_type=net.value_type,
                       pattern_id=pattern_id(net.pattern))


def enumerate_table(net: TinyNet, chunk_size: int = 65536,
                    max_bytes: int = DEFAULT_MAX_BYTES) -> LookupTable:
    """Evaluate the net on every lattice grid point and pack the results.

    The header snaps steps to f32 (the stored precision) and the decoded
    grid points use those snapped steps, so lookup and enumeration share
    the exact same geometry.
    """
    header = _header_for_net(net)
    nbytes = storage_bytes(header.grid_sizes, header.entry_arity,
                           header.bytes_per_value)
    if nbytes > max_bytes:
        raise StorageOverflow(f"{nbytes} bytes exceeds the {max_bytes} cap")

    total = header.entry_count
    steps = header.steps.astype(np.float64)
    out = np.empty((total, header.entry_arity), dtype=header.dtype)

    def build(start: int) -> None:
        stop = min(start + chunk_size, total)
        idx = _indices_for_offsets(header.grid_sizes,
                                   np.arange(start, stop))
        points = idx.astype(np.float64) * steps
        out[start:stop] = value_quantize(stack_forward(net, points),
                                         net.value_type)

    starts = range(0, total, chunk_size)
    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build, starts))
    else:
        for start in starts:
            build(start)
    return LookupTable(header=header, values=out.reshape(-1))


@dataclass(frozen=True)
class FidelityReport:
    max_grid_dev: float
    max_offgrid_dev_nearest: float
    max_offgrid_dev_interpolated: float
    grid_points_checked: int
    trials: int


#: Above this index dimension the grid check samples instead of sweeping.
_EXHAUSTIVE_DIM = 3
_GRID_SAMPLE = 100_000


def verify_fidelity(net: TinyNet, table: LookupTable, trial_count: int = 10_000,
                    seed: int = 0) -> FidelityReport:
    """Check the table against the float net.

    Grid points must match the re-quantized net output exactly
    (exhaustively for d <= 3, on a 1e5 sample above); any mismatch means
    the table was not built from this net and raises FidelityError.
    Off-grid deviations of nearest and interpolated lookup against the
    float net are measured over random trials and reported.
    """
    header = table.header
    expected = _header_for_net(net)
    if (header.grid_sizes != expected.grid_sizes
            or header.entry_arity != expected.entry_arity
            or header.value_type != net.value_type
            or header.steps.tobytes() != expected.steps.tobytes()
            or header.pattern_id != expected.pattern_id):
        raise FidelityError("table header does not match the network")

    rng = np.random.default_rng(seed)
    total = header.entry_count
    if header.d <= _EXHAUSTIVE_DIM or total <= _GRID_SAMPLE:
        offsets = np.arange(total)
    else:
        offsets = rng.choice(total, size=_GRID_SAMPLE, replace=False)
    idx = _indices_for_offsets(header.grid_sizes, offsets)
    points = idx.astype(np.float64) * header.steps.astype(np.float64)
    want = value_quantize(stack_forward(net, points), net.value_type)
    got = table.entries()[offsets]
    grid_dev = float(np.max(np.abs(got.astype(np.float64)
                                   - want.astype(np.float64)))) if total else 0.0
    if grid_dev > 0.0:
        raise FidelityError(f"grid deviation {grid_dev} at compiled points")

    # Off-grid: random inputs over the 8-bit domain.
    x = rng.uniform(0.0, 255.9, size=(trial_count, header.d))
    x = np.clip(x, 0.0, 255.0)
    float_out = stack_forward(net, x)
    near = lookup_nearest(table, x).astype(np.float64)
    interp = lookup_interpolated(table, x)
    dev_near = float(np.max(np.abs(near - float_out)))
    dev_interp = float(np.max(np.abs(interp - float_out)))
    return FidelityReport(
        max_grid_dev=grid_dev,
        max_offgrid_dev_nearest=dev_near,
        max_offgrid_dev_interpolated=dev_interp,
        grid_points_checked=int(offsets.size),
        trials=int(trial_count),
    )


def nearest_lookup_bound(net: TinyNet) -> float:
    """Worst-case nearest-lookup deviation from the float net.

    Lipschitz constant times half the cell diagonal, plus half a value
    step for integer-valued tables.  Inputs past the outermost grid line
    clamp, which never exceeds the in-cell bound for the 8-bit domain.
    """
    from .refnet import lipschitz_bound

    c = lipschitz_bound(net)
    halfcell = 0.5 * float(np.linalg.norm(net.lattice.steps))
    return c * halfcell + 0.5 * value_step(net.value_type)
