"""Command line front end.

Subcommands:

  losem run CONFIG      simulate data per the config and run the solver
  losem verify CONFIG   check the method's preconditions on this setup
  losem phantom CONFIG  render the phantom and write its images

Exit codes: 0 success, 2 bad configuration, 3 violated mathematical
precondition, 4 numerical degeneration (a FAILED marker file is left in
the output directory in that case).
"""

from __future__ import annotations

import argparse
import datetime
import sys
import time
from pathlib import Path

import numpy as np

from .config import (
    AssumptionError,
    ConfigError,
    NumericalError,
    RunConfig,
    load_config,
)
from .experiment import (
    NoiseSpec,
    add_poisson_noise,
    consistent_data,
    oracle_stopped_osem,
    realized_deltas,
    reblock,
    render_phantom,
    simulate_clean_base,
    simulate_data,
)
from .kl_core import (
    DensityGrid,
    PixelGrid,
    kl_distance,
    save_matrix_csv,
    save_pgm,
    uniform_density,
)
from .operators import RadonBlockOperator, SmoothingKernel, effective_bounds
from .solvers import SolverConfig, loping_osem_run, osem_run

__all__ = ["entry", "main"]


def _say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


def _outdir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out or "losem_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stack(blocks) -> np.ndarray:
    rows = [b.values if hasattr(b, "values") else np.asarray(b) for b in blocks]
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# data assembly


class PreparedRun:
    """Everything a solver run needs, assembled from a config."""

    def __init__(self, cfg: RunConfig, seed: int, quiet: bool,
                 n_blocks: int | None = None):
        self.cfg = cfg
        self.system = cfg.build_system(n_blocks=n_blocks)
        self.x_star = render_phantom(cfg.phantom, self.system.pixel_grid)
        self.x0 = uniform_density(self.system.pixel_grid)
        self.noise_info = None
        self.raw_deltas = None
        if cfg.noise_level == 0.0:
            # exact data: the rendered phantom solves the discrete system
            self.noisy_blocks = None
            self.data = consistent_data(self.x_star, self.system)
            self.deltas = np.zeros(self.system.n_blocks)
            _say(quiet, "data: exact (consistent with the discrete system)")
            return
        _say(quiet, f"simulating data (oversample {cfg.oversample}) ...")
        clean = simulate_data(
            cfg.phantom, self.system, cfg.oversample, cfg.max_sim_nodes
        )
        spec = NoiseSpec(cfg.noise_level, cfg.counts_scale, seed)
        noisy, raw_l1, info = add_poisson_noise(clean, spec)
        ord = 2 if cfg.gamma_mode == "l2" else 1
        self.raw_deltas = raw_l1 if ord == 1 else realized_deltas(clean, noisy, ord=2)
        self.noisy_blocks = noisy
        self.data = self.system.shift_data([b.values for b in noisy])
        self.deltas = self.system.shifted_deltas(self.raw_deltas)
        self.noise_info = info
        _say(
            quiet,
            f"noise: counts_scale={info['counts_scale']:.6g} realized "
            f"{info['aggregate_error']:.4f} (target {info['target']})",
        )

    def resolve_gamma(self) -> float | None:
        cfg = self.cfg
        if cfg.gamma_mode == "explicit":
            return cfg.gamma
        if cfg.gamma_mode == "l2":
            return None
        bounds = effective_bounds(self.system, self.data)
        return bounds.gamma()


def _write_noise_meta(path: Path, prepared: PreparedRun) -> None:
    with open(path, "w") as fh:
        if prepared.noise_info is None:
            fh.write("noise=none\n")
            return
        info = prepared.noise_info
        fh.write(f"algorithm={info['algorithm']}\n")
        fh.write(f"seed={info['seed']}\n")
        fh.write(f"counts_scale={info['counts_scale']!r}\n")
        fh.write(f"target={info['target']!r}\n")
        fh.write(f"aggregate_error={info['aggregate_error']!r}\n")
        for j, (dr, du) in enumerate(zip(prepared.raw_deltas, prepared.deltas)):
            fh.write(f"delta_raw_{j}={dr!r}\n")
            fh.write(f"delta_shifted_{j}={du!r}\n")


def _write_summary(path: Path, cfg: RunConfig, lines: dict) -> None:
    with open(path, "w") as fh:
        fh.write(f"timestamp={datetime.datetime.now().isoformat()}\n")
        fh.write(f"mode={cfg.mode}\n")
        fh.write(
            f"n_t={cfg.n_t}\nn_r={cfg.n_r}\nn_angle={cfg.n_angle}\n"
            f"n_blocks={cfg.n_blocks}\nepsilon={cfg.epsilon!r}\nK={cfg.K}\n"
            f"lambda={cfg.lam!r}\nnoise_level={cfg.noise_level!r}\n"
        )
        for k, v in lines.items():
            fh.write(f"{k}={v}\n")


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _outdir(args, cfg)
    try:
        if cfg.mode == "compare":
            return _run_compare(cfg, out, args.quiet)
        return _run_single(cfg, out, args.quiet)
    except (NumericalError, FloatingPointError) as e:
        (out / "FAILED").write_text(f"{e}\n")
        raise


def _run_single(cfg: RunConfig, out: Path, quiet: bool) -> int:
    if cfg.mode == "em" and cfg.n_blocks != 1:
        raise ConfigError(
            "mode em is the single-block case; set n_blocks = 1 "
            "(use mode osem for several blocks)"
        )
    prepared = PreparedRun(cfg, cfg.seed, quiet)
    system, x_star, x0 = prepared.system, prepared.x_star, prepared.x0

    x_star.to_pgm(out / "phantom.pgm")
    if prepared.noisy_blocks is not None:
        save_pgm(out / "sinogram.pgm", _stack(prepared.noisy_blocks))
    save_matrix_csv(out / "data.csv", _stack(prepared.data))
    _write_noise_meta(out / "noise_meta.txt", prepared)

    summary: dict = {}
    t0 = time.perf_counter()
    if cfg.mode in ("em", "osem"):
        _say(quiet, f"running {cfg.mode} for {cfg.cycles} cycles ...")
        vals, trace = osem_run(x0, system, prepared.data, cfg.cycles, x_star=x_star)
        report = None
    else:
        tau = cfg.resolved_tau()
        gamma = prepared.resolve_gamma()
        _say(
            quiet,
            f"running loping-osem (tau={tau:.4g}, "
            f"gamma={'adaptive' if gamma is None else format(gamma, '.4g')}) ...",
        )
        solver_cfg = SolverConfig(
            n_blocks=system.n_blocks, tau=tau, gamma_mode=cfg.gamma_mode,
            gamma=cfg.gamma, delta=prepared.deltas, max_cycles=cfg.max_cycles,
        )
        vals, trace, report = loping_osem_run(
            x0, system, prepared.data, solver_cfg, x_star=x_star, gamma=gamma,
        )
        report.write_text(out / "stop_report.txt")
        summary["k_star"] = (
            report.k_star if report.k_star is not None else "max_cycles_reached"
        )
    wall = time.perf_counter() - t0

    trace.write_csv(out / "trace.csv")
    recon = DensityGrid(system.pixel_grid, vals)
    recon.to_pgm(out / "reconstruction.pgm")
    recon.to_csv(out / "reconstruction.csv")
    summary["cycles_run"] = trace.n_cycles
    summary["final_kl_error"] = repr(trace.final_error)
    summary["wall_seconds"] = f"{wall:.3f}"
    _write_summary(out / "summary.txt", cfg, summary)
    _say(
        quiet,
        f"done: cycles={trace.n_cycles} final_kl_error={trace.final_error:.6g} "
        f"({wall:.3f}s) -> {out}",
    )
    return 0


def _run_compare(cfg: RunConfig, out: Path, quiet: bool) -> int:
    """Loping runs against oracle-stopped runs over several block counts.

    One noise realization is drawn on the unsplit angle set and shared by
    every block count, so rows differ only in the grouping.
    """
    if cfg.noise_level == 0.0:
        raise ConfigError("compare mode needs noise_level > 0")
    pixel_grid = cfg.pixel_grid()
    x_star = render_phantom(cfg.phantom, pixel_grid)
    x0 = uniform_density(pixel_grid)
    _say(quiet, f"simulating shared data (oversample {cfg.oversample}) ...")
    hi = PixelGrid(cfg.n_t * cfg.oversample, cfg.epsilon)
    hi_density = render_phantom(cfg.phantom, hi)
    clean_base = simulate_clean_base(
        hi_density, cfg.n_angle, cfg.n_r, cfg.K, cfg.max_sim_nodes
    )
    spec = NoiseSpec(cfg.noise_level, cfg.counts_scale, cfg.seed)
    noisy_bases, _, info = add_poisson_noise([clean_base], spec)
    noisy_base = noisy_bases[0]
    _say(
        quiet,
        f"noise: counts_scale={info['counts_scale']:.6g} realized "
        f"{info['aggregate_error']:.4f} (target {info['target']})",
    )

    x_star.to_pgm(out / "phantom.pgm")
    save_pgm(out / "sinogram.pgm", noisy_base.values)

    rows = []
    summary: dict = {}
    for N in cfg.compare_subsets:
        system = cfg.build_system(n_blocks=N)
        grid_N = system.sino_grid
        clean_blocks = reblock(clean_base, grid_N)
        noisy_blocks = reblock(noisy_base, grid_N)
        ord = 2 if cfg.gamma_mode == "l2" else 1
        raw_deltas = realized_deltas(clean_blocks, noisy_blocks, ord=ord)
        data = system.shift_data([b.values for b in noisy_blocks])
        deltas = system.shifted_deltas(raw_deltas)

        tau = cfg.resolved_tau()
        gamma = None
        if cfg.gamma_mode == "explicit":
            gamma = cfg.gamma
        elif cfg.gamma_mode == "bounds":
            gamma = effective_bounds(system, data).gamma()
        solver_cfg = SolverConfig(
            n_blocks=N, tau=tau, gamma_mode=cfg.gamma_mode, gamma=cfg.gamma,
            delta=deltas, max_cycles=cfg.max_cycles,
        )
        _say(quiet, f"N={N}: loping run ...")
        t0 = time.perf_counter()
        vals, trace, report = loping_osem_run(
            x0, system, data, solver_cfg, x_star=x_star, gamma=gamma,
        )
        wall_loping = time.perf_counter() - t0
        err_loping = trace.final_error
        trace.write_csv(out / f"trace_loping_N{N}.csv")
        report.write_text(out / f"stop_report_N{N}.txt")
        DensityGrid(pixel_grid, vals).to_pgm(out / f"reconstruction_loping_N{N}.pgm")
        rows.append(("loping-osem", N, trace.n_cycles, wall_loping, err_loping))

        _say(quiet, f"N={N}: oracle run ({cfg.max_cycles} cycles) ...")
        t0 = time.perf_counter()
        oracle = oracle_stopped_osem(x0, system, data, x_star, cfg.max_cycles)
        wall_oracle = time.perf_counter() - t0
        err_oracle = float(oracle.errors[oracle.best_cycle])
        DensityGrid(pixel_grid, oracle.values).to_pgm(
            out / f"reconstruction_oracle_N{N}.pgm"
        )
        rows.append(("oracle-osem", N, oracle.best_cycle, wall_oracle, err_oracle))
        _say(
            quiet,
            f"N={N}: loping stopped after {trace.n_cycles} cycles "
            f"(error {err_loping:.6g}), oracle best at {oracle.best_cycle} "
            f"(error {err_oracle:.6g})",
        )

    with open(out / "table.csv", "w") as fh:
        fh.write("method,N,cycles,wall_seconds,final_kl_error\n")
        for method, N, cycles, wall, err in rows:
            fh.write(f"{method},{N},{cycles},{wall:.3f},{err!r}\n")
    summary["subsets"] = " ".join(str(s) for s in cfg.compare_subsets)
    summary["counts_scale"] = repr(info["counts_scale"])
    _write_summary(out / "summary.txt", cfg, summary)
    _say(quiet, f"done -> {out / 'table.csv'}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    quiet = args.quiet

    pixel_grid = cfg.pixel_grid()
    sino_grid = cfg.sino_grid()
    kernel = SmoothingKernel(cfg.n_r, cfg.K)

    # geometry: backprojection of flat data must be flat on the domain
    dev = 0.0
    ones = np.ones(sino_grid.block_shape)
    for j in range(sino_grid.n_blocks):
        op = RadonBlockOperator(pixel_grid, sino_grid, j, kernel, cache_plans=False)
        bp = op.backproject(ones)
        dev = max(dev, float(np.abs(bp[pixel_grid.mask] - 1.0).max()))
        if (~pixel_grid.mask).any():
            dev = max(dev, float(np.abs(bp[~pixel_grid.mask]).max()))
    print(f"adjoint_of_ones_max_dev={dev!r}")
    if dev > 1e-12:
        raise AssumptionError(
            f"backprojection of flat data deviates from flat by {dev}"
        )

    b = sino_grid.block_measure
    m = cfg.lam / (1.0 + cfg.lam * b) if cfg.lam > 0 else 0.0
    print(f"kernel_floor_m={m!r}")
    if not m > 0.0:
        raise AssumptionError(
            "the effective kernel floor is zero at lambda = 0; the "
            "multiplicative iteration needs lambda > 0"
        )

    system = cfg.build_system()
    raw_sup = system.raw_kernel_sup("probe")
    M = system.ops[0].kernel_upper(raw_sup)
    print(f"kernel_sup_M={M!r}")

    prepared = PreparedRun(cfg, cfg.seed, quiet)
    blocks = prepared.noisy_blocks
    if blocks is not None:
        mass_dev = max(abs(bl.mass - 1.0) for bl in blocks)
        print(f"block_mass_max_dev={mass_dev!r}")
    bounds = effective_bounds(system, prepared.data)
    print(f"data_floor_m1={bounds.m1!r}")
    print(f"data_sup_M1={bounds.M1!r}")
    gamma = bounds.gamma()
    print(f"gamma_bounds={gamma!r}")

    tau = cfg.resolved_tau()
    print(f"tau={tau!r}")
    print(f"delta_min={float(prepared.deltas.min())!r}")
    print(f"delta_max={float(prepared.deltas.max())!r}")
    if np.all(prepared.deltas == 0.0):
        print("warning: exact data; loping performs every step and only "
              "max_cycles ends the run")
    elif cfg.gamma_mode != "l2":
        g = cfg.gamma if cfg.gamma_mode == "explicit" else gamma
        x0 = prepared.x0
        thresholds = tau * g * prepared.deltas
        residuals = np.array([
            kl_distance(prepared.data[j], system.forward(x0.values, j),
                        system.block_weight)
            for j in range(system.n_blocks)
        ])
        print(f"threshold_max={float(thresholds.max())!r}")
        print(f"initial_residual_min={float(residuals.min())!r}")
        if np.all(thresholds >= residuals):
            print("warning: every threshold exceeds its initial residual; "
                  "the loping run would stop immediately")
    print("verify: ok")
    return 0


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args, cfg)
    x = render_phantom(cfg.phantom, cfg.pixel_grid())
    x.to_pgm(out / "phantom.pgm")
    x.to_csv(out / "phantom.csv")
    _say(
        args.quiet,
        f"phantom: {len(cfg.phantom.discs)} discs on {cfg.n_t + 1}x{cfg.n_t + 1} "
        f"nodes, mass={x.mass!r} -> {out}",
    )
    return 0


# ---------------------------------------------------------------------------
# entry


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="losem",
        description="EM-type iteration with block skipping for circular-mean data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("run", cmd_run, "simulate data and run the configured solver"),
        ("verify", cmd_verify, "check the method's preconditions on this setup"),
        ("phantom", cmd_phantom, "render the configured phantom"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("config", help="path to a key = value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.set_defaults(func=fn)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except AssumptionError as e:
        print(f"assumption violated: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


def entry() -> int:
    return main()


if __name__ == "__main__":
    sys.exit(main())
