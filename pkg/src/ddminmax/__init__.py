"""Data-driven min-max MPC for unknown linear systems from noisy state data."""

__version__ = "0.1.0"

from .numerics import CostWeights, min_eigenvalue, is_psd, sqrt_factor, weighted_norm_sq
from .plant import (ConfigError, ConstraintSet, DataRecord, LtiPlant, NoiseDistribution,
                    NoiseSampler, builtin_scenario, collect_offline, simulate)
from .consistency import (ConsistencySet, MultiplierMode, build_offline, is_member,
                          push_online, sample_members)
from .sdp import (Certificate, SdpProblem, SdpSolution, SolveStatus, SolverOptions,
                  assemble_adaptive, assemble_robust, extract_certificate, solve,
                  verify_solution)
from .controller import (ControllerState, InitialInfeasible, MpcConfig, RunLog, Scheme,
                         SolverFailed, adaptive_step, robust_step, run_closed_loop)
