"""Phantoms, data simulation, Poisson noise and oracle-stopped runs.

Simulation avoids the inverse crime: the phantom is rendered and projected
on a grid refined by ``oversample`` relative to the reconstruction grid, so
the solver never inverts the exact discrete operator that produced its
data.  Noise is applied to the smoothed, shift-free data; the additive
shift is applied afterwards, to the noisy blocks.

Data is simulated once on the unsplit angle set (a single-block grid) and
then regrouped for any block count.  The per-sample quadrature weight only
depends on the total number of angles, and the per-block scaling is linear,
so every block split of the same simulation sees the same noise
realization.  This is what the comparison mode relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kl_core import (
    DensityGrid,
    PixelGrid,
    SinogramBlock,
    SinogramGrid,
    kl_distance,
    normalize_to_simplex,
    weighted_l1,
    weighted_l2,
)
from .operators import RadonBlockOperator, RadonSystem, SmoothingKernel
from .solvers import osem_run

__all__ = [
    "Disc",
    "PhantomSpec",
    "NoiseSpec",
    "render_phantom",
    "simulate_data",
    "simulate_clean_base",
    "reblock",
    "consistent_data",
    "add_poisson_noise",
    "realized_deltas",
    "oracle_stopped_osem",
]

RNG_ALGORITHM = "numpy-philox"


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    radius: float
    amplitude: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError(f"disc radius must be positive, got {self.radius}")
        if self.amplitude <= 0.0:
            raise ValueError(f"disc amplitude must be positive, got {self.amplitude}")


@dataclass(frozen=True)
class PhantomSpec:
    """A phantom as a superposition of constant discs."""

    discs: tuple[Disc, ...]

    def __post_init__(self):
        if not self.discs:
            raise ValueError("phantom spec needs at least one disc")
        object.__setattr__(self, "discs", tuple(self.discs))

    def validate_inside(self, domain_radius: float) -> None:
        for d in self.discs:
            if math.hypot(d.cx, d.cy) + d.radius > domain_radius + 1e-9:
                raise ValueError(
                    f"disc at ({d.cx}, {d.cy}) with radius {d.radius} leaves the "
                    f"domain of radius {domain_radius}"
                )


def render_phantom(spec: PhantomSpec, grid: PixelGrid) -> DensityGrid:
    """Rasterize the disc superposition on the grid and normalize its mass."""
    spec.validate_inside(grid.radius)
    x = grid.nodes[:, None]
    y = grid.nodes[None, :]
    vals = np.zeros(grid.shape)
    for d in spec.discs:
        inside = (x - d.cx) ** 2 + (y - d.cy) ** 2 <= d.radius ** 2
        vals += d.amplitude * inside
    return DensityGrid.normalized(grid, vals)


# ---------------------------------------------------------------------------
# clean data


def simulate_clean_base(
    density: DensityGrid,
    n_angles: int,
    n_r: int,
    K: int,
    max_nodes: int = 16_000_000,
) -> SinogramBlock:
    """Smoothed circular means of a density on the unsplit angle set.

    ``density`` is usually rendered on an oversampled grid.  The result is
    a single normalized block covering all angles (block count one).
    """
    n_nodes = (density.grid.n_t + 1) ** 2
    if n_nodes > max_nodes:
        raise ValueError(
            f"simulation grid has {n_nodes} nodes, exceeding the cap {max_nodes}; "
            "lower the oversample factor or raise the cap"
        )
    base_grid = SinogramGrid(n_blocks=1, n_phi=n_angles, n_r=n_r)
    kernel = SmoothingKernel(n_r, K)
    op = RadonBlockOperator(density.grid, base_grid, 0, kernel, cache_plans=False)
    vals = op.forward(density.values)
    vals = normalize_to_simplex(vals, base_grid.sample_weight)
    return SinogramBlock(base_grid, 0, vals, normalized=True)


def reblock(base: SinogramBlock, grid: SinogramGrid) -> list[SinogramBlock]:
    """Regroup single-block data onto a block-split grid of the same samples.

    The split grid must share the angle set and radii of the base.  Values
    are rescaled by the block count (the per-block forward map carries that
    factor) and renormalized blockwise.
    """
    if base.grid.n_blocks != 1:
        raise ValueError("base data must live on a single-block grid")
    if grid.n_angles != base.grid.n_angles or grid.n_r != base.grid.n_r:
        raise ValueError(
            f"target grid samples ({grid.n_angles} angles, n_r={grid.n_r}) do not "
            f"match base ({base.grid.n_angles} angles, n_r={base.grid.n_r})"
        )
    out = []
    for j in range(grid.n_blocks):
        rows = base.values[j * grid.n_phi : (j + 1) * grid.n_phi]
        vals = normalize_to_simplex(rows * grid.n_blocks, grid.sample_weight)
        out.append(SinogramBlock(grid, j, vals, normalized=True))
    return out


def simulate_data(
    spec: PhantomSpec,
    system: RadonSystem,
    oversample: int = 4,
    max_nodes: int = 16_000_000,
) -> list[SinogramBlock]:
    """Clean shift-free data blocks for the system, simulated oversampled.

    The phantom is rendered on a grid with n_t * oversample pixels per axis
    and projected from there onto the system's sinogram samples.
    """
    if oversample < 1:
        raise ValueError(f"oversample must be >= 1, got {oversample}")
    hi = PixelGrid(system.pixel_grid.n_t * oversample, system.pixel_grid.epsilon)
    density = render_phantom(spec, hi)
    base = simulate_clean_base(
        density, system.sino_grid.n_angles, system.sino_grid.n_r,
        system.kernel.K, max_nodes,
    )
    return reblock(base, system.sino_grid)


def consistent_data(x_star: DensityGrid, system: RadonSystem) -> list[np.ndarray]:
    """Shifted data with the rendered phantom an exact discrete solution.

    Applies the system's own shifted forward map to ``x_star`` on the
    reconstruction grid, without renormalization or noise.  Use this for
    exact-data runs where the monotone decrease toward the ground truth is
    asserted step by step.
    """
    return [system.forward(x_star.values, j) for j in range(system.n_blocks)]


# ---------------------------------------------------------------------------
# Poisson noise


@dataclass(frozen=True)
class NoiseSpec:
    """Poisson counts noise targeting a relative L1 data error.

    ``level`` is the target aggregate relative error (quadrature L1 distance
    between clean and noisy data over the clean mass).  ``counts_scale``
    fixes the expected counts per unit value; when None it is calibrated by
    bisection so the realized aggregate error lands within ten percent of
    the target.
    """

    level: float = 0.05
    counts_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"noise level must be in (0, 1), got {self.level}")
        if self.counts_scale is not None and not self.counts_scale > 0.0:
            raise ValueError("counts_scale must be positive")


def _block_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
    )


def _draw(blocks: list[SinogramBlock], c: float, seed: int):
    """One noise realization at counts scale c; returns blocks and aggregate."""
    noisy = []
    agg_err = 0.0
    agg_mass = 0.0
    for j, b in enumerate(blocks):
        rng = _block_rng(seed, j)
        counts = rng.poisson(c * b.values)
        vals = counts.astype(np.float64) / c
        total = float(np.sum(vals) * b.grid.sample_weight)
        if total <= 0.0:
            return None, 2.0  # complete loss of signal at this scale
        vals /= total
        noisy.append(SinogramBlock(b.grid, b.j, vals, normalized=True))
        agg_err += weighted_l1(b.values, vals, b.grid.sample_weight)
        agg_mass += b.mass
    return noisy, agg_err / agg_mass


def add_poisson_noise(blocks: list[SinogramBlock], spec: NoiseSpec):
    """Poisson noise on clean blocks, renormalized blockwise.

    Returns ``(noisy_blocks, deltas, info)`` where ``deltas[j]`` is the
    realized quadrature L1 distance between the j-th clean and noisy block
    and ``info`` records the counts scale, realized aggregate error and the
    generator algorithm.  Each block uses its own stream spawned from the
    seed, so blockwise parallel simulation would not change the draws.
    """
    if not blocks:
        raise ValueError("no data blocks to perturb")
    if spec.counts_scale is not None:
        noisy, agg = _draw(blocks, spec.counts_scale, spec.seed)
        if noisy is None:
            raise RuntimeError(
                f"counts scale {spec.counts_scale} lost the whole signal"
            )
        c = spec.counts_scale
    else:
        c, noisy, agg = _bisect_counts(blocks, spec)
    deltas = np.array(
        [
            weighted_l1(b.values, nb.values, b.grid.sample_weight)
            for b, nb in zip(blocks, noisy)
        ]
    )
    info = {
        "counts_scale": c,
        "aggregate_error": agg,
        "target": spec.level,
        "seed": spec.seed,
        "algorithm": RNG_ALGORITHM,
    }
    return noisy, deltas, info


def _counts_scale_guess(blocks: list[SinogramBlock], level: float) -> float:
    # E|Poisson(c v)/c - v| is about sqrt(2 v / (pi c)) per sample
    s = sum(
        float(np.sum(np.sqrt(b.values)) * b.grid.sample_weight) for b in blocks
    )
    mass = sum(b.mass for b in blocks)
    return max((2.0 / math.pi) * (s / (level * mass)) ** 2, 1.0)


def _bisect_counts(blocks: list[SinogramBlock], spec: NoiseSpec):
    """Calibrate the counts scale so the realized error matches the target."""
    target = spec.level
    tol = 0.1 * target

    def realized(c):
        return _draw(blocks, c, spec.seed)

    c = _counts_scale_guess(blocks, target)
    noisy, agg = realized(c)
    if abs(agg - target) <= tol:
        return c, noisy, agg
    # bracket: realized error decreases as the counts scale grows
    lo, hi = c, c
    agg_lo = agg_hi = agg
    for _ in range(60):
        if agg_lo <= target:
            lo /= 4.0
            _, agg_lo = realized(lo)
        elif agg_hi >= target:
            hi *= 4.0
            _, agg_hi = realized(hi)
        else:
            break
    if not (agg_lo >= target >= agg_hi):
        raise RuntimeError(
            f"could not bracket the noise target {target}: realized error is "
            f"{agg_lo} at counts scale {lo} and {agg_hi} at {hi}"
        )
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        noisy, agg = realized(mid)
        if abs(agg - target) <= tol:
            return mid, noisy, agg
        if agg > target:
            lo = mid
        else:
            hi = mid
    raise RuntimeError(
        f"noise target {target} not attained within the bisection budget; "
        f"last counts scale {mid} realized {agg}"
    )


def realized_deltas(clean: list[SinogramBlock], noisy: list[SinogramBlock],
                    ord: int = 1) -> np.ndarray:
    """Per-block quadrature distances between clean and noisy data."""
    dist = weighted_l1 if ord == 1 else weighted_l2
    return np.array(
        [
            dist(b.values, nb.values, b.grid.sample_weight)
            for b, nb in zip(clean, noisy)
        ]
    )


# ---------------------------------------------------------------------------
# oracle stopping


@dataclass(frozen=True)
class OracleResult:
    values: np.ndarray
    best_cycle: int
    errors: np.ndarray  # ground-truth error after 0..max_cycles cycles


def oracle_stopped_osem(x0, system, data, x_star, max_cycles: int) -> OracleResult:
    """Run the cyclic iteration and keep the iterate of the best cycle.

    "Best" minimizes the ground-truth KL error over cycle ends 1..max_cycles.
    This stopping rule needs the ground truth and serves as the reference
    against which automatic stopping is judged.
    """
    x = x0.values if isinstance(x0, DensityGrid) else np.asarray(x0, dtype=np.float64)
    xs = x_star.values if isinstance(x_star, DensityGrid) else np.asarray(x_star)
    errors = [kl_distance(xs, x, system.node_weights)]
    best_err = math.inf
    best_cycle = 0
    best = x.copy()
    for cycle in range(1, max_cycles + 1):
        x, _ = osem_run(x, system, data, cycles=1)
        err = kl_distance(xs, x, system.node_weights)
        errors.append(err)
        if err < best_err:
            best_err = err
            best_cycle = cycle
            best = x.copy()
    return OracleResult(values=best, best_cycle=best_cycle, errors=np.asarray(errors))
