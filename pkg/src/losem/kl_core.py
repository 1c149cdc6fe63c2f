"""Grids, simplex densities and Kullback-Leibler functionals.

Everything downstream (operators, solvers, experiments) is built on the two
quadratures defined here: uniform pixel cells masked to a disc domain for
densities, and uniform angle/radius samples grouped into angular-sector
blocks for sinogram data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "PixelGrid",
    "DensityGrid",
    "SinogramGrid",
    "SinogramBlock",
    "kl_distance",
    "kl_residual",
    "kl_l1_bound_check",
    "normalize_to_simplex",
    "uniform_density",
    "weighted_l1",
    "weighted_l2",
    "save_matrix_csv",
    "load_matrix_csv",
    "save_pgm",
]

MASS_TOL = 1e-9


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class PixelGrid:
    """Square node grid on [-1, 1]^2 masked to a centered disc domain.

    Nodes sit at -1 + 2*i/n_t per axis, i = 0..n_t, so there are
    (n_t + 1)^2 nodes with spacing 2/n_t.  The reconstruction domain is the
    open disc of radius 1 - epsilon; nodes outside it carry zero quadrature
    weight.  Integrals over the domain use the uniform cell measure
    (2/n_t)^2 at every inside node.
    """

    n_t: int
    epsilon: float

    def __post_init__(self):
        if self.n_t < 2:
            raise ValueError(f"n_t must be >= 2, got {self.n_t}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_t + 1, self.n_t + 1)

    @property
    def spacing(self) -> float:
        return 2.0 / self.n_t

    @property
    def cell_measure(self) -> float:
        return self.spacing ** 2

    @property
    def radius(self) -> float:
        """Radius of the disc domain."""
        return 1.0 - self.epsilon

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates along one axis, length n_t + 1."""
        out = -1.0 + 2.0 * np.arange(self.n_t + 1) / self.n_t
        out.flags.writeable = False
        return out

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean array, True at nodes strictly inside the disc domain."""
        x = self.nodes[:, None]
        y = self.nodes[None, :]
        out = x * x + y * y < self.radius ** 2
        out.flags.writeable = False
        return out

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Quadrature weights: cell measure inside the domain, zero outside."""
        out = np.where(self.mask, self.cell_measure, 0.0)
        out.flags.writeable = False
        return out


@dataclass(frozen=True)
class DensityGrid:
    """A nonnegative unit-mass density sampled on a :class:`PixelGrid`.

    Values are zero at nodes outside the disc domain and the quadrature
    weighted sum equals one at construction.  Instances are immutable; the
    value array is stored read-only.
    """

    grid: PixelGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            raise ValueError(
                f"values shape {vals.shape} does not match grid {self.grid.shape}"
            )
        if np.any(vals < 0.0):
            raise ValueError("density values must be nonnegative")
        if np.any(vals[~self.grid.mask] != 0.0):
            raise ValueError("density must vanish outside the disc domain")
        mass = float(np.sum(self.grid.node_weights * vals))
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"density mass {mass} deviates from 1 beyond {MASS_TOL}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def normalized(cls, grid: PixelGrid, raw: np.ndarray) -> "DensityGrid":
        """Mask raw values to the domain and rescale them to unit mass."""
        vals = np.ascontiguousarray(raw, dtype=np.float64)
        if vals.shape != grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {grid.shape}")
        vals = np.where(grid.mask, vals, 0.0)
        return cls(grid, normalize_to_simplex(vals, grid.node_weights))

    @property
    def mass(self) -> float:
        return float(np.sum(self.grid.node_weights * self.values))

    def to_csv(self, path) -> None:
        save_matrix_csv(path, self.values)

    def to_pgm(self, path) -> None:
        save_pgm(path, self.values)


def uniform_density(grid: PixelGrid) -> DensityGrid:
    """The constant unit-mass density on the disc domain."""
    return DensityGrid.normalized(grid, grid.mask.astype(np.float64))


@dataclass(frozen=True)
class SinogramGrid:
    """Uniform angle/radius sampling of the data cylinder, split into blocks.

    Detector centers sit on the unit circle at n_blocks * n_phi angles tiling
    [0, 2*pi) uniformly; block j owns the n_phi consecutive angles of the
    sector [2*pi*j/n_blocks, 2*pi*(j+1)/n_blocks).  Radii are r[i] = 2*i/n_r
    for i = 0..n_r.  Each sample carries the uniform quadrature weight
    block_measure / (n_phi * (n_r + 1)) so the weights of one block sum to
    the block measure 4*pi/n_blocks.
    """

    n_blocks: int
    n_phi: int
    n_r: int

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.n_phi < 1:
            raise ValueError(f"n_phi must be >= 1, got {self.n_phi}")
        if self.n_r < 2:
            raise ValueError(f"n_r must be >= 2, got {self.n_r}")

    @property
    def n_angles(self) -> int:
        return self.n_blocks * self.n_phi

    @property
    def block_shape(self) -> tuple[int, int]:
        return (self.n_phi, self.n_r + 1)

    @property
    def block_measure(self) -> float:
        """Measure of one block: angular sector times radial extent (0, 2)."""
        return 4.0 * math.pi / self.n_blocks

    @property
    def sample_weight(self) -> float:
        return self.block_measure / (self.n_phi * (self.n_r + 1))

    @cached_property
    def angles(self) -> np.ndarray:
        out = 2.0 * math.pi * np.arange(self.n_angles) / self.n_angles
        out.flags.writeable = False
        return out

    @cached_property
    def radii(self) -> np.ndarray:
        out = 2.0 * np.arange(self.n_r + 1) / self.n_r
        out.flags.writeable = False
        return out

    def block_angles(self, j: int) -> np.ndarray:
        if not 0 <= j < self.n_blocks:
            raise ValueError(f"block index {j} out of range [0, {self.n_blocks})")
        return self.angles[j * self.n_phi : (j + 1) * self.n_phi]


@dataclass(frozen=True)
class SinogramBlock:
    """Data values of one block, shaped (n_phi, n_r + 1).

    ``normalized`` asserts that the quadrature weighted integral over the
    block equals one.
    """

    grid: SinogramGrid
    j: int
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if not 0 <= self.j < self.grid.n_blocks:
            raise ValueError(f"block index {self.j} out of range")
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != self.grid.block_shape:
            raise ValueError(
                f"block shape {vals.shape} does not match grid {self.grid.block_shape}"
            )
        if np.any(vals < 0.0):
            raise ValueError("sinogram values must be nonnegative")
        if self.normalized:
            mass = float(np.sum(vals) * self.grid.sample_weight)
            if abs(mass - 1.0) > MASS_TOL:
                raise ValueError(
                    f"normalized block {self.j} has mass {mass}, expected 1"
                )
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.sample_weight)

    def to_csv(self, path) -> None:
        save_matrix_csv(path, self.values)

    def to_pgm(self, path) -> None:
        save_pgm(path, self.values)


# ---------------------------------------------------------------------------
# Kullback-Leibler machinery


def _check_pair(v, u, weights):
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if v.shape != u.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {u.shape}")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim and w.shape != v.shape:
            raise ValueError(f"weights shape {w.shape} does not match {v.shape}")
    else:
        w = np.float64(1.0)
    if np.any(v < 0.0) or np.any(u < 0.0):
        raise ValueError("kl arguments must be nonnegative")
    return v, u, w


def kl_distance(v, u, weights=None) -> float:
    """Quadrature-weighted Kullback-Leibler distance between nonnegative arrays.

    Computes sum(w * (v*log(v/u) - v + u)) with the conventions 0*log(0) = 0
    and +inf whenever v > 0 where u = 0.  ``weights`` may be an array of the
    same shape or a scalar (default 1).
    """
    v, u, w = _check_pair(v, u, weights)
    pos = v > 0.0
    if np.any(pos & (u == 0.0)):
        return math.inf
    logterm = np.zeros_like(v)
    np.log(np.divide(v, u, out=np.ones_like(v), where=pos), out=logterm, where=pos)
    total = float(np.sum(w * (v * logterm - v + u)))
    # tiny negative rounding residue is clipped; the functional is >= 0
    return max(total, 0.0)


def kl_residual(block_op, x, y, weights=None) -> float:
    """KL distance between block data ``y`` and the forward image of ``x``.

    ``block_op`` is any callable mapping ``x`` to values on the block of
    ``y``.  When ``y`` is a :class:`SinogramBlock` its grid weights are used.
    """
    if isinstance(y, SinogramBlock):
        data, w = y.values, y.grid.sample_weight
    else:
        data, w = np.asarray(y, dtype=np.float64), weights
    fx = block_op(x)
    return kl_distance(data, fx, w)


def kl_l1_bound_check(v, u, weights=None, slack: float = 1e-12) -> bool:
    """Check the L1 bound ||v - u||_1^2 <= (2/3 ||v||_1 + 4/3 ||u||_1) * kl."""
    v, u, w = _check_pair(v, u, weights)
    lhs = float(np.sum(w * np.abs(v - u))) ** 2
    d = kl_distance(v, u, weights)
    if math.isinf(d):
        return True
    rhs = (2.0 / 3.0 * float(np.sum(w * v)) + 4.0 / 3.0 * float(np.sum(w * u))) * d
    return lhs <= rhs + slack


def normalize_to_simplex(values, weights=None) -> np.ndarray:
    """Rescale nonnegative values so the quadrature weighted sum equals one."""
    vals = np.asarray(values, dtype=np.float64)
    if np.any(vals < 0.0):
        raise ValueError("cannot normalize values with negative entries")
    w = np.float64(1.0) if weights is None else np.asarray(weights, dtype=np.float64)
    total = float(np.sum(w * vals))
    if not total > 0.0:
        raise ValueError("cannot normalize: weighted sum is not positive")
    return vals / total


def weighted_l1(a, b, weights=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.float64(1.0) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.sum(w * np.abs(a - b)))


def weighted_l2(a, b, weights=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.float64(1.0) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(math.sqrt(np.sum(w * (a - b) ** 2)))


# ---------------------------------------------------------------------------
# serialization


def save_matrix_csv(path, arr) -> None:
    """Write a 2D array as headerless CSV, one matrix row per line."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D array, got ndim={arr.ndim}")
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    return np.asarray(rows, dtype=np.float64)


def save_pgm(path, arr) -> None:
    """Write a 2D array as binary 16-bit PGM with a `<name>.scale` sidecar.

    Values are mapped linearly onto 0..65535; the sidecar records the
    original min and max so the mapping can be inverted.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D array, got ndim={arr.ndim}")
    vmin = float(arr.min())
    vmax = float(arr.max())
    if vmax > vmin:
        pix = np.round((arr - vmin) / (vmax - vmin) * 65535.0)
    else:
        pix = np.zeros_like(arr)
    pix = pix.astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())
    scale_path = str(path)
    if scale_path.endswith(".pgm"):
        scale_path = scale_path[: -len(".pgm")]
    with open(scale_path + ".scale", "w") as fh:
        fh.write(f"min={vmin!r}\nmax={vmax!r}\n")
