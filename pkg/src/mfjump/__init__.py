"""Controlled mean-field jump chains on a truncated integer state space.

Builds moment-coupled birth/death intensity models, solves the nonlinear
forward equation by Picard iteration, prices risk-sensitive payoffs three
independent ways (backward ODE, direct Monte Carlo, Girsanov-weighted Monte
Carlo), and computes candidate optimal feedback controls and zero-sum saddle
points by pointwise Hamiltonian optimization inside a mean-field consistency
loop.
"""
from ._kernel import HAVE_COMPILED
from .backward import (BsdeSolution, CostSpec, balanced_decomposition,
                       balanced_weights, comparison_check, entropic_backward,
                       feynman_kac_backward, tau)
from .flows import (FeedbackControl, Flow, TimeGrid, flow_diagnostics,
                    linear_forward, picard_fixed_point)
from .games import (GameResult, isaacs_check, lower_upper_hamiltonians,
                    solve_game, verify_saddle)
from .model import (ControlGrid, Dist, IntensityModel, QMatrix, StateSpace,
                    autocatalytic, band_background, constant_model, moments,
                    schlogl_first, schlogl_second, validate_assumptions,
                    wasserstein1, wasserstein2)
from .optimal import (OptimalControlResult, hamiltonian, hamiltonian_min,
                      solve_optimal, verify_optimality)
from .sampling import (martingale_diagnostic, particle_system,
                       payoff_mc_direct, payoff_mc_girsanov,
                       girsanov_logweight, sample_path)

__version__ = "0.1.0"

__all__ = [
    "HAVE_COMPILED", "__version__",
    "StateSpace", "Dist", "QMatrix", "ControlGrid", "IntensityModel",
    "moments", "wasserstein1", "wasserstein2", "band_background",
    "schlogl_first", "schlogl_second", "autocatalytic", "constant_model",
    "validate_assumptions",
    "TimeGrid", "Flow", "FeedbackControl", "linear_forward",
    "picard_fixed_point", "flow_diagnostics",
    "BsdeSolution", "CostSpec", "tau", "feynman_kac_backward",
    "entropic_backward", "balanced_decomposition", "balanced_weights",
    "comparison_check",
    "sample_path", "girsanov_logweight", "payoff_mc_direct",
    "payoff_mc_girsanov", "martingale_diagnostic", "particle_system",
    "hamiltonian", "hamiltonian_min", "solve_optimal", "verify_optimality",
    "OptimalControlResult",
    "lower_upper_hamiltonians", "isaacs_check", "solve_game", "verify_saddle",
    "GameResult",
]
