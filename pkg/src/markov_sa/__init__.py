"""Stochastic approximation with Markovian noise: off-policy TD learners,
their expected-update matrices and ODE-method diagnostics."""

__version__ = "0.1.0"

from .mdp import (  # noqa: E402
    FiniteMdp,
    InducedChain,
    LambdaBellman,
    MdpError,
    Policy,
    apply_bellman,
    induce_chain,
    lambda_bellman,
    stationary_distribution,
    value_function,
)
from .spectral import (  # noqa: E402
    etd_expected_system,
    gtd_expected_system,
    probe_horizon_estimate,
    spectral_report,
    td_mean_field,
)
from .learners import LearnerConfig, Schedule, Trajectory, run  # noqa: E402
from .environments import EnvironmentBundle, builtin_environment, check_assumptions  # noqa: E402
from .ode import (  # noqa: E402
    AT_INFINITY,
    LinearField,
    build_partition,
    discretization_error,
    interpolate,
    ode_at_infinity_probe,
    scaled_field,
    scaled_segment,
    solve_ode,
)
from .diagnostics import lln_check, rate_of_change, stability_monitor, trace_statistics  # noqa: E402

__all__ = [
    "FiniteMdp", "InducedChain", "LambdaBellman", "MdpError", "Policy", "apply_bellman", "induce_chain",
    "lambda_bellman", "stationary_distribution", "value_function",
    "etd_expected_system", "gtd_expected_system", "probe_horizon_estimate", "spectral_report", "td_mean_field",
    "LearnerConfig", "Schedule", "Trajectory", "run",
    "EnvironmentBundle", "builtin_environment", "check_assumptions",
    "AT_INFINITY", "LinearField", "build_partition", "discretization_error", "interpolate",
    "ode_at_infinity_probe", "scaled_field", "scaled_segment", "solve_ode",
    "lln_check", "rate_of_change", "stability_monitor", "trace_statistics",
]
