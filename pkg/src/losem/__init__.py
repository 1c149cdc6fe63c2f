"""Multiplicative EM-type iterations with block skipping for systems of
integral equations with nonnegative kernels, instantiated on circular-mean
(photoacoustic) tomography.

The package splits into:

  kl_core     grids, the weighted KL distance, serialization
  operators   circular-mean block operators, smoothing, kernel shift, bounds
  solvers     full, cyclic and loping iterations, stopping, audits
  experiment  phantoms, data simulation, Poisson noise, oracle stopping
  config/cli  config files and the ``losem`` command
"""

from .config import AssumptionError, ConfigError, NumericalError, RunConfig, load_config
from .experiment import (
    Disc,
    NoiseSpec,
    PhantomSpec,
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
    SinogramBlock,
    SinogramGrid,
    kl_distance,
    kl_residual,
    normalize_to_simplex,
    uniform_density,
)
from .operators import (
    EffectiveBounds,
    RadonBlockOperator,
    RadonSystem,
    ShiftedBlockOperator,
    SmoothingKernel,
    effective_bounds,
    smooth_radial,
)
from .solvers import (
    AuditReport,
    IterationTrace,
    SolverConfig,
    StopReport,
    em_step,
    loping_osem_run,
    monotonicity_audit,
    osem_run,
    tau_schedule,
)

__version__ = "0.1.0"
