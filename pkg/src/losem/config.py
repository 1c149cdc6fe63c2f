"""Experiment configuration: flat key=value files and their validation.

A config file is plain text, one ``key = value`` per line, with ``#``
starting a comment.  The phantom comes either from a ``phantom = <path>``
reference (resolved relative to the config file) or from inline ``disc =``
lines, one per disc, never both.

Angles can be given either as ``n_angle`` (total, must split evenly over
the blocks) or ``n_phi`` (per block), not both.  The support margin and the
smoothing half-width are tied by margin = 2*K/n_r; give either one and the
other is derived, or give both and the margin must cover the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .experiment import Disc, PhantomSpec
from .kl_core import PixelGrid, SinogramGrid
from .operators import RadonSystem
from .solvers import tau_schedule

__all__ = [
    "ConfigError",
    "AssumptionError",
    "NumericalError",
    "RunConfig",
    "load_config",
    "parse_config_text",
    "parse_phantom_file",
]

MODES = ("em", "osem", "loping-osem", "compare")
GAMMA_MODES = ("bounds", "explicit", "l2")
TAU_MODES = ("fixed", "scheduled")


class ConfigError(Exception):
    """Invalid configuration or command line (exit code 2)."""


class AssumptionError(Exception):
    """A mathematical precondition of the method fails (exit code 3)."""


class NumericalError(Exception):
    """The computation degenerated numerically (exit code 4)."""


@dataclass
class RunConfig:
    mode: str
    n_t: int
    n_r: int
    n_phi: int
    n_blocks: int = 1
    epsilon: float = 0.0          # derived from K when left at 0
    K: int = 0                    # derived from epsilon when left at 0
    lam: float = 0.01
    oversample: int = 4
    tau: float = 1.5
    tau_mode: str = "fixed"
    gamma_mode: str = "bounds"
    gamma: float | None = None
    max_cycles: int = 200
    cycles: int = 25
    noise_level: float = 0.05
    counts_scale: float | None = None
    seed: int = 0
    out: str | None = None
    compare_subsets: tuple[int, ...] = ()
    max_sim_nodes: int = 16_000_000
    phantom: PhantomSpec | None = None

    # -- derived builders ---------------------------------------------------

    @property
    def n_angle(self) -> int:
        return self.n_blocks * self.n_phi

    def pixel_grid(self) -> PixelGrid:
        return PixelGrid(self.n_t, self.epsilon)

    def sino_grid(self, n_blocks: int | None = None) -> SinogramGrid:
        N = self.n_blocks if n_blocks is None else n_blocks
        if self.n_angle % N:
            raise ConfigError(
                f"{self.n_angle} angles do not split into {N} equal blocks"
            )
        return SinogramGrid(n_blocks=N, n_phi=self.n_angle // N, n_r=self.n_r)

    def build_system(self, n_blocks: int | None = None,
                     cache_plans: bool = True) -> RadonSystem:
        if not self.lam > 0.0:
            raise ConfigError(
                "lambda must be positive to run the solver; the unshifted "
                "kernel touches zero (run 'verify' to see the violation)"
            )
        return RadonSystem(
            self.pixel_grid(), self.sino_grid(n_blocks), self.lam, self.K,
            cache_plans=cache_plans,
        )

    def resolved_tau(self) -> float:
        if self.tau_mode == "scheduled":
            return tau_schedule(self.noise_level, self.tau)
        return self.tau


# ---------------------------------------------------------------------------
# parsing


_INT_KEYS = {
    "n_t", "n_r", "n_angle", "n_phi", "n_blocks", "K", "oversample",
    "max_cycles", "cycles", "seed", "max_sim_nodes",
}
_FLOAT_KEYS = {"epsilon", "lambda", "tau", "gamma", "noise_level", "counts_scale"}
_STR_KEYS = {"mode", "tau_mode", "gamma_mode", "out", "phantom"}
_LIST_KEYS = {"compare_subsets"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _LIST_KEYS | {"disc"}


def _parse_disc(text: str, where: str) -> Disc:
    parts = text.replace(",", " ").split()
    if len(parts) != 4:
        raise ConfigError(
            f"{where}: disc needs 'cx cy radius amplitude', got {text!r}"
        )
    try:
        cx, cy, r, a = (float(p) for p in parts)
        return Disc(cx, cy, r, a)
    except ValueError as e:
        raise ConfigError(f"{where}: bad disc: {e}") from e


def parse_phantom_file(path) -> PhantomSpec:
    """Phantom file: one 'cx cy radius amplitude' line per disc."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read phantom file {path}: {e}") from e
    discs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        discs.append(_parse_disc(line, f"{path}:{lineno}"))
    if not discs:
        raise ConfigError(f"phantom file {path} defines no discs")
    return PhantomSpec(tuple(discs))


def parse_config_text(text: str, path: str = "<config>",
                      base_dir: Path | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    where: dict[str, str] = {}
    discs: list[Disc] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{k}'")
        if k == "disc":
            discs.append(_parse_disc(v, f"{path}:{lineno}"))
            continue
        if k in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{k}'")
        raw[k] = v
        where[k] = f"{path}:{lineno}"

    def take(k, conv):
        v = raw.pop(k, None)
        if v is None:
            return None
        try:
            return conv(v)
        except ValueError as e:
            raise ConfigError(f"{where[k]}: bad value for '{k}': {e}") from e

    def require(k, conv):
        v = take(k, conv)
        if v is None:
            raise ConfigError(f"{path}: missing required key '{k}'")
        return v

    mode = require("mode", str)
    if mode not in MODES:
        raise ConfigError(f"{where['mode']}: mode must be one of {', '.join(MODES)}")
    n_t = require("n_t", int)
    n_r = require("n_r", int)

    n_angle = take("n_angle", int)
    n_phi = take("n_phi", int)
    if (n_angle is None) == (n_phi is None):
        raise ConfigError(f"{path}: give exactly one of 'n_angle' or 'n_phi'")
    n_blocks = take("n_blocks", int)
    if n_blocks is None:
        n_blocks = 1
    if n_blocks < 1:
        raise ConfigError(f"{where['n_blocks']}: n_blocks must be >= 1")
    if n_phi is None:
        if n_angle % n_blocks:
            raise ConfigError(
                f"{where['n_angle']}: n_angle = {n_angle} is not divisible by "
                f"n_blocks = {n_blocks}"
            )
        n_phi = n_angle // n_blocks

    epsilon = take("epsilon", float)
    K = take("K", int)
    if K is None and epsilon is None:
        K = 1
    if K is None:
        # the margin must correspond to a whole smoothing half-width
        k_real = epsilon * n_r / 2.0
        K = round(k_real)
        if K < 1 or abs(k_real - K) > 1e-9:
            raise ConfigError(
                f"{where['epsilon']}: epsilon = {epsilon} does not equal 2K/n_r "
                f"for any integer half-width K >= 1 at n_r = {n_r}"
            )
    if epsilon is None:
        epsilon = 2.0 * K / n_r
    if epsilon + 1e-12 < 2.0 * K / n_r:
        raise ConfigError(
            f"{path}: support margin epsilon = {epsilon} is smaller than the "
            f"smoothing width 2K/n_r = {2.0 * K / n_r}"
        )

    phantom_ref = take("phantom", str)
    if phantom_ref is not None and discs:
        raise ConfigError(
            f"{path}: give either a phantom file or inline 'disc =' lines, not both"
        )
    if phantom_ref is not None:
        ref = Path(phantom_ref)
        if not ref.is_absolute() and base_dir is not None:
            ref = base_dir / ref
        phantom = parse_phantom_file(ref)
    elif discs:
        phantom = PhantomSpec(tuple(discs))
    else:
        raise ConfigError(
            f"{path}: no phantom given (use 'phantom = <file>' or 'disc =' lines)"
        )

    subsets: tuple[int, ...] = ()
    if "compare_subsets" in raw:
        items = raw.pop("compare_subsets").replace(",", " ").split()
        try:
            subsets = tuple(int(s) for s in items)
        except ValueError as e:
            raise ConfigError(
                f"{where['compare_subsets']}: bad value for 'compare_subsets': {e}"
            ) from e
        if not subsets or any(s < 1 for s in subsets):
            raise ConfigError(
                f"{where['compare_subsets']}: compare_subsets needs positive "
                "block counts"
            )

    cfg = RunConfig(
        mode=mode, n_t=n_t, n_r=n_r, n_phi=n_phi, n_blocks=n_blocks,
        epsilon=epsilon, K=K, phantom=phantom, compare_subsets=subsets,
    )
    for key, attr, conv in (
        ("lambda", "lam", float),
        ("oversample", "oversample", int),
        ("tau", "tau", float),
        ("tau_mode", "tau_mode", str),
        ("gamma_mode", "gamma_mode", str),
        ("gamma", "gamma", float),
        ("max_cycles", "max_cycles", int),
        ("cycles", "cycles", int),
        ("noise_level", "noise_level", float),
        ("counts_scale", "counts_scale", float),
        ("seed", "seed", int),
        ("out", "out", str),
        ("max_sim_nodes", "max_sim_nodes", int),
    ):
        v = take(key, conv)
        if v is not None:
            setattr(cfg, attr, v)
    assert not raw, f"unconsumed keys: {sorted(raw)}"
    _validate(cfg, path)
    return cfg


def _validate(cfg: RunConfig, path: str) -> None:
    def bad(msg):
        raise ConfigError(f"{path}: {msg}")

    if cfg.n_t < 2:
        bad(f"n_t must be >= 2, got {cfg.n_t}")
    if cfg.n_r < 2:
        bad(f"n_r must be >= 2, got {cfg.n_r}")
    if cfg.n_phi < 1:
        bad(f"n_phi must be >= 1, got {cfg.n_phi}")
    if not 0.0 < cfg.epsilon < 1.0:
        bad(f"epsilon must be in (0, 1), got {cfg.epsilon}")
    if cfg.lam < 0.0:
        bad(f"lambda must be nonnegative, got {cfg.lam}")
    if cfg.oversample < 1:
        bad(f"oversample must be >= 1, got {cfg.oversample}")
    if cfg.tau_mode not in TAU_MODES:
        bad(f"tau_mode must be one of {', '.join(TAU_MODES)}")
    if cfg.gamma_mode not in GAMMA_MODES:
        bad(f"gamma_mode must be one of {', '.join(GAMMA_MODES)}")
    if cfg.gamma_mode == "explicit" and (cfg.gamma is None or cfg.gamma <= 0):
        bad("gamma_mode = explicit requires a positive gamma")
    if cfg.tau_mode == "fixed" and cfg.tau <= 0:
        bad(f"tau must be positive, got {cfg.tau}")
    if cfg.tau_mode == "scheduled" and cfg.tau <= 1.0:
        bad("scheduled tau_mode interprets tau as the zero-noise limit, "
            "which must exceed 1")
    if cfg.max_cycles < 1 or cfg.cycles < 1:
        bad("max_cycles and cycles must be >= 1")
    if cfg.noise_level < 0.0 or cfg.noise_level >= 1.0:
        bad(f"noise_level must be in [0, 1), got {cfg.noise_level}")
    if cfg.counts_scale is not None and cfg.counts_scale <= 0:
        bad("counts_scale must be positive")
    if cfg.mode == "compare":
        if not cfg.compare_subsets:
            bad("compare mode needs 'compare_subsets' (e.g. 'compare_subsets = 10 20')")
        for s in cfg.compare_subsets:
            if cfg.n_angle % s:
                bad(f"compare subset {s} does not divide n_angle = {cfg.n_angle}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, str(path), base_dir=path.parent)
