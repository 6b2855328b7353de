"""Irregular dilated sampling patterns and the feature gather.

A pattern places at most four active taps on a k x k grid, stretched by
an anisotropic dilation (dx, dy).  The gathered values at the tap
positions form the raw index vector of a lookup table, so the receptive
field grows with the dilation while the table dimensionality stays
capped.  Coprime dilations are preferred: equal or resonant rates waste
taps on periodically overlapping positions.
"""

from __future__ import annotations

import re
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidPattern, PatternWarning, ShapeError

#: Hard cap on active taps; table size is exponential in this count.
R_MAX = 4


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """H x W (x C) grid of values with its value-range metadata."""

    values: np.ndarray
    value_min: float = 0.0
    value_max: float = 255.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ShapeError(f"feature map must be HxW or HxWxC, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class SamplingPattern:
    """Validated tap geometry; equality is structural.

    `mask[row][col]` covers tap offsets (m, n) = (row - k//2, col - k//2);
    active taps are listed in row-major order, and that order fixes the
    index-dimension order of any table compiled against the pattern.
    """

    k: int
    dilation: tuple[int, int]
    mask: tuple[tuple[int, ...], ...]
    active_taps: tuple[tuple[int, int], ...] = field(init=False, compare=False)

    def __post_init__(self):
        half = self.k // 2
        taps = tuple(
            (r - half, c - half)
            for r, row in enumerate(self.mask)
            for c, bit in enumerate(row)
            if bit
        )
        object.__setattr__(self, "active_taps", taps)

    @property
    def tap_count(self) -> int:
        return len(self.active_taps)


def make_pattern(k: int, dilation, mask) -> SamplingPattern:
    """Validate and build a pattern; warns on non-coprime dilation."""
    if k < 1 or k % 2 == 0:
        raise InvalidPattern(f"kernel extent must be odd and >= 1, got {k}")
    dx, dy = (int(v) for v in dilation)
    if dx < 1 or dy < 1:
        raise InvalidPattern(f"dilation components must be >= 1, got {(dx, dy)}")
    grid = np.asarray(mask)
    if grid.shape != (k, k):
        raise InvalidPattern(f"mask must be {k}x{k}, got {grid.shape}")
    if not np.all((grid == 0) | (grid == 1)):
        raise InvalidPattern("mask entries must be 0 or 1")
    active = int(grid.sum())
    if not 1 <= active <= R_MAX:
        raise InvalidPattern(
            f"active tap count {active} outside [1, {R_MAX}]")
    if np.gcd(dx, dy) != 1:
        warnings.warn(
            f"dilation {(dx, dy)} is not coprime; periodic tap overlap "
            "reduces directional reach",
            PatternWarning, stacklevel=2)
    rows = tuple(tuple(int(v) for v in row) for row in grid)
    return SamplingPattern(k=k, dilation=(dx, dy), mask=rows)


def pixel_offsets(pattern: SamplingPattern) -> list[tuple[int, int]]:
    """Pixel-space tap offsets (dx, dy) = (dilation_x * m, dilation_y * n),
    in the row-major tap order that defines table index dimensions."""
    dx, dy = pattern.dilation
    return [(dx * m, dy * n) for m, n in pattern.active_taps]


def receptive_extent(pattern: SamplingPattern) -> tuple[int, int]:
    """Bounding-box size of the pixel offsets."""
    offs = pixel_offsets(pattern)
    xs = [o[0] for o in offs]
    ys = [o[1] for o in offs]
    return (max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)


def rotate_pattern(pattern: SamplingPattern, quarter_turns: int) -> SamplingPattern:
    """Rotate tap offsets by quarter turns: (m, n) -> (-n, m) per turn.

    The dilation components swap each turn so pixel offsets rotate
    exactly and the receptive extent transposes; the active count is
    preserved.  Four turns give back the original pattern.
    """
    quarter_turns = int(quarter_turns) % 4
    taps = list(pattern.active_taps)
    dx, dy = pattern.dilation
    for _ in range(quarter_turns):
        taps = [(-n, m) for m, n in taps]
        dx, dy = dy, dx
    half = pattern.k // 2
    grid = np.zeros((pattern.k, pattern.k), dtype=np.int64)
    for m, n in taps:
        grid[m + half, n + half] = 1
    rows = tuple(tuple(int(v) for v in row) for row in grid)
    return SamplingPattern(k=pattern.k, dilation=(dx, dy), mask=rows)


def gather(feature: FeatureMap, pattern: SamplingPattern, p: int, q: int) -> np.ndarray:
    """Feature values at the tap positions around (p, q), tap order.

    Replicate padding at the borders keeps every gathered value inside
    the map; the result is the raw table index vector.  Single-channel
    maps only; the cascade engine uses gather_plane per channel.
    """
    if feature.channels != 1:
        raise ShapeError("gather expects a single-channel feature map")
    if not (0 <= p < feature.height and 0 <= q < feature.width):
        raise InvalidInput(f"position {(p, q)} outside {feature.height}x{feature.width}")
    plane = feature.values[:, :, 0]
    out = np.empty(pattern.tap_count, dtype=np.float64)
    for i, (dx, dy) in enumerate(pixel_offsets(pattern)):
        r = min(max(p + dx, 0), feature.height - 1)
        c = min(max(q + dy, 0), feature.width - 1)
        out[i] = plane[r, c]
    return out


def gather_plane(plane: np.ndarray, pattern: SamplingPattern) -> np.ndarray:
    """Vectorized gather at every position of a 2-D plane -> (H, W, n)."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError(f"expected a 2-D plane, got {plane.shape}")
    h, w = plane.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    taps = []
    for dx, dy in pixel_offsets(pattern):
        r = np.clip(rows + dx, 0, h - 1)
        c = np.clip(cols + dy, 0, w - 1)
        taps.append(plane[r, c])
    return np.stack(taps, axis=-1)


# --- text descriptor ---------------------------------------------------------

_DESCRIPTOR_RE = re.compile(
    r"^idc k=(\d+) dil=(\d+),(\d+) mask=([01]+(?:;[01]+)*)$")


def format_pattern(pattern: SamplingPattern) -> str:
    """Canonical one-line descriptor, e.g. `idc k=3 dil=2,3 mask=010;101;010`."""
    mask = ";".join("".join(str(b) for b in row) for row in pattern.mask)
    dx, dy = pattern.dilation
    return f"idc k={pattern.k} dil={dx},{dy} mask={mask}"


def parse_pattern(text: str) -> SamplingPattern:
    """Parse a descriptor produced by format_pattern (strict)."""
    m = _DESCRIPTOR_RE.match(text.strip())
    if not m:
        raise InvalidPattern(f"malformed pattern descriptor: {text!r}")
    k = int(m.group(1))
    dil = (int(m.group(2)), int(m.group(3)))
    rows = m.group(4).split(";")
    if len(rows) != k or any(len(r) != k for r in rows):
        raise InvalidPattern(f"mask rows must form a {k}x{k} grid")
    mask = [[int(ch) for ch in row] for row in rows]
    return make_pattern(k, dil, mask)


def pattern_id(pattern: SamplingPattern) -> int:
    """Stable u32 identifier: CRC-32 of the canonical descriptor.

    Stored in table headers so index dimensions can never silently
    permute between build and inference.
    """
    return zlib.crc32(format_pattern(pattern).encode("ascii"))


def single_tap_pattern() -> SamplingPattern:
    """The 1x1 centered pattern (pointwise lookup)."""
    return make_pattern(1, (1, 1), [[1]])


def corner_block_pattern(dilation=(1, 1)) -> SamplingPattern:
    """The classic 2x2 window: taps (0,0), (0,1), (1,0), (1,1) on a 3x3 grid."""
    mask = [[0, 0, 0], [0, 1, 1], [0, 1, 1]]
    return make_pattern(3, dilation, mask)
