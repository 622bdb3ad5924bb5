"""Numerical laboratory for relativistic N-particle Langevin dynamics with
singular repulsive interactions and its classical (Newtonian) limit."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    ConfiningSpec,
    ModelSpec,
    SingularSpec,
    State,
    default_state,
    kinetic_energy,
    relativistic_velocity,
    validate_assumptions,
)
from .dynamics import (  # noqa: F401
    DriftKind,
    Observable,
    drift,
    generator_apply,
    hamiltonian,
    log_stationary_density,
)
from .integrate import (  # noqa: F401
    CoupledRun,
    Scheme,
    Trajectory,
    simulate,
    simulate_coupled,
    simulate_ensemble,
    step,
)
from .limits import (  # noqa: F401
    CutoffSpec,
    RateFit,
    moment_monitor,
    newtonian_rate_experiment,
    prob_convergence_experiment,
    truncate_model,
)
from .lyapunov import (  # noqa: F401
    DriftReport,
    LyapunovParams1,
    LyapunovParamsN,
    drift_scan,
    tune_constants,
    v1,
    vN,
)
from .ergodicity import (  # noqa: F401
    ControlPath,
    StationarySample,
    control_path,
    hypoellipticity_check,
    lemma_a1_check,
    lemma_a2_fit,
    mixing_curve,
    sample_stationary,
    stationarity_check,
)
