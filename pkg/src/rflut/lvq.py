"""Lattice geometry and nearest-point decoding.

A lattice is the set {B z : z integer}, with B a full-rank basis whose
columns generate the points.  Decoding an input means finding a nearby
lattice point: `babai_round` transforms to lattice coordinates and rounds
per component (exact for orthogonal bases), `exact_cvp` is the exhaustive
oracle used by tests.  The production quantizer is always diagonal
(per-axis steps), so its decode is d independent scalar roundings.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionTooLarge, InvalidInput

#: Exhaustive search is only tractable for tiny index dimensions.
MAX_EXACT_DIM = 6


def round_half_away(x):
    """Round to nearest integer, halves away from zero.

    numpy's `round` is round-half-even; the table grid uses sign-symmetric
    rounding so that -0.5 and 0.5 land on -1 and 1.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class GeneralLattice:
    """Full-rank lattice with an arbitrary basis.

    Column-major semantics: a lattice point is basis @ z.  Only used for
    oracles and distortion measurements; production tables are diagonal.
    """

    basis: np.ndarray
    basis_inverse: np.ndarray = field(repr=False)

    def __init__(self, basis):
        basis = np.asarray(basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] != basis.shape[1]:
            raise InvalidInput(f"basis must be square, got shape {basis.shape}")
        if not np.all(np.isfinite(basis)):
            raise InvalidInput("basis contains non-finite entries")
        if abs(np.linalg.det(basis)) <= 1e-9:
            raise InvalidInput("basis is singular or nearly singular")
        inv = np.linalg.inv(basis)
        resid = np.max(np.abs(basis @ inv - np.eye(basis.shape[0])))
        if resid >= 1e-6:
            raise InvalidInput(f"basis inverse residual {resid:.3g} too large")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "basis_inverse", inv)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    def lattice_coords(self, x):
        """Map points (..., d) into lattice coordinates B^-1 x."""
        return np.asarray(x, dtype=np.float64) @ self.basis_inverse.T

    def decode(self, z):
        """Map integer (or relaxed) coordinates (..., d) to points B z."""
        return np.asarray(z, dtype=np.float64) @ self.basis.T

    def cell_volume(self) -> float:
        return abs(float(np.linalg.det(self.basis)))


@dataclass(frozen=True, eq=False)
class DiagonalLattice:
    """Hyper-rectangular lattice with per-axis step sizes.

    Equivalent to a GeneralLattice with basis diag(steps); decoding is d
    independent scalar roundings, which is what keeps table lookup as
    cheap as uniform scalar quantization.
    """

    steps: np.ndarray
    step_min: float

    def __init__(self, steps, step_min=None):
        steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
        if steps.ndim != 1 or steps.size == 0:
            raise InvalidInput("steps must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(steps)):
            raise InvalidInput("steps contain non-finite entries")
        if step_min is None:
            step_min = float(np.min(steps))
        step_min = float(step_min)
        if step_min <= 0.0:
            raise InvalidInput("step_min must be positive")
        if np.any(steps < step_min):
            raise InvalidInput("every step must be >= step_min")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "step_min", step_min)

    @property
    def d(self) -> int:
        return self.steps.size

    def lattice_coords(self, x):
        return np.asarray(x, dtype=np.float64) / self.steps

    def decode(self, z):
        return np.asarray(z, dtype=np.float64) * self.steps

    def cell_volume(self) -> float:
        return float(np.prod(self.steps))

    def as_general(self) -> GeneralLattice:
        return GeneralLattice(np.diag(self.steps))


@dataclass(frozen=True)
class QuantizerMode:
    """Decoding mode: hard rounding, or seeded uniform-noise relaxation.

    Training mode replaces rounding with additive uniform(-1/2, 1/2) noise
    in lattice coordinates, which keeps the forward pass differentiable in
    both the input and the step sizes.  The noise source is seeded per
    call, so a fixed seed gives a deterministic forward pass.
    """

    training: bool
    seed: int | None = None

    @classmethod
    def inference(cls) -> "QuantizerMode":
        return cls(training=False)

    @classmethod
    def training_mode(cls, seed: int) -> "QuantizerMode":
        return cls(training=True, seed=int(seed))


INFERENCE = QuantizerMode.inference()


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains non-finite values")


def babai_round(lattice, x):
    """Nearest-plane decode: round each lattice coordinate.

    Returns (index, quantized) where index = round(B^-1 x) element-wise
    (halves away from zero) and quantized = B index.  Exact for orthogonal
    bases; for a DiagonalLattice this is d independent scalar roundings.
    Accepts (..., d) batches.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if x.shape[-1] != lattice.d:
        raise InvalidInput(f"expected last axis {lattice.d}, got {x.shape[-1]}")
    index = round_half_away(lattice.lattice_coords(x)).astype(np.int64)
    return index, lattice.decode(index)


def exact_cvp(lattice, x, search_radius: int = 3):
    """Exhaustive closest-vector search around the Babai estimate.

    Scans the integer box round(B^-1 x) +- search_radius and returns the
    (index, point) minimizing the Euclidean distance; ties go to the
    lexicographically smallest index.  Only usable for d <= 6.  Accepts
    (..., d) batches.
    """
    if lattice.d > MAX_EXACT_DIM:
        raise DimensionTooLarge(f"exact search supports d <= {MAX_EXACT_DIM}")
    if search_radius < 1:
        raise InvalidInput("search_radius must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if x.shape[-1] != lattice.d:
        raise InvalidInput(f"expected last axis {lattice.d}, got {x.shape[-1]}")
    batched = x.ndim > 1
    x2 = x.reshape(-1, lattice.d)
    base = round_half_away(lattice.lattice_coords(x2)).astype(np.int64)

    best_dist = np.full(x2.shape[0], np.inf)
    best_z = np.zeros_like(base)
    offsets = itertools.product(
        range(-search_radius, search_radius + 1), repeat=lattice.d
    )
    # Offsets iterate in lexicographic order and improvements are strict,
    # so the first of any equal-distance pair (the lex-smallest z) wins.
    for off in offsets:
        z = base + np.asarray(off, dtype=np.int64)
        dist = np.sum((x2 - lattice.decode(z)) ** 2, axis=-1)
        better = dist < best_dist
        best_dist = np.where(better, dist, best_dist)
        best_z = np.where(better[:, None], z, best_z)

    points = lattice.decode(best_z)
    if not batched:
        return best_z[0], points[0]
    return best_z.reshape(x.shape), points.reshape(x.shape)


def training_noise(shape, seed: int) -> np.ndarray:
    """Uniform(-1/2, 1/2) noise, deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, size=shape)


def quantize(lattice, x, mode: QuantizerMode = INFERENCE):
    """Decode x to the lattice per the mode.

    Inference: the Babai-rounded point.  Training: B (B^-1 x + u) with u
    uniform(-1/2, 1/2) per component; the output is differentiable with
    identity gradient in x, and for a diagonal lattice the per-step
    gradient of output_j is exactly u_j.
    """
    x = np.asarray(x, dtype=np.float64)
    if not mode.training:
        return babai_round(lattice, x)[1]
    _check_finite(x)
    if x.shape[-1] != lattice.d:
        raise InvalidInput(f"expected last axis {lattice.d}, got {x.shape[-1]}")
    u = training_noise(x.shape, mode.seed)
    return lattice.decode(lattice.lattice_coords(x) + u)


def quantize_with_noise(lattice, x, seed: int):
    """Training-mode decode that also returns the drawn noise.

    The trainer needs u to form the analytic step gradient: for a
    diagonal lattice, output_j = x_j + steps_j * u_j.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    u = training_noise(x.shape, seed)
    return lattice.decode(lattice.lattice_coords(x) + u), u


def distortion_mse(lattice, samples, decoder: str = "babai",
                   search_radius: int = 2) -> float:
    """Mean squared decode error over a sample set.

    `decoder` selects Babai rounding (the production path) or the
    exhaustive search (needed to measure non-orthogonal lattices such as
    the hexagonal reference).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise InvalidInput("samples must be nonempty")
    samples = np.atleast_2d(samples)
    if decoder == "babai":
        _, decoded = babai_round(lattice, samples)
    elif decoder == "exact":
        _, decoded = exact_cvp(lattice, samples, search_radius)
    else:
        raise InvalidInput(f"unknown decoder {decoder!r}")
    return float(np.mean(np.sum((samples - decoded) ** 2, axis=-1)))


def normalized_second_moment(lattice, n_samples: int, seed: int,
                             decoder: str = "exact") -> float:
    """Monte-Carlo dimensionless per-cell quantization MSE.

    Samples uniformly over the fundamental cell (B u, u in [0,1)^d, which
    tiles space), decodes, and normalizes by d * V^(2/d).  The square cell
    gives 1/12 ~ 0.08333; the hexagonal cell ~ 0.0802.
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 1.0, size=(n_samples, lattice.d))
    x = lattice.decode(u)
    mse = distortion_mse(lattice, x, decoder=decoder)
    vol = lattice.cell_volume()
    return mse / (lattice.d * vol ** (2.0 / lattice.d))


def hexagonal_lattice(unit_volume: bool = True) -> GeneralLattice:
    """The 2-D hexagonal lattice, optionally scaled to unit cell volume.

    Reference geometry only: its Voronoi cells fill the plane more
    efficiently than squares, which is what motivates vector over scalar
    quantization.  Never used as a production index.
    """
    basis = np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2.0]])
    if unit_volume:
        basis = basis / np.sqrt(np.sqrt(3.0) / 2.0)
    return GeneralLattice(basis)
