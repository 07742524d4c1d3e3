"""Rough-path particle filtering.

Observation paths are lifted to level-2 rough paths; signal and weight
dynamics are solved by Davie-type one-step schemes; particle ensembles
estimate the unnormalized and normalized filters, and residual ladders
certify the local expansions of the forward, normalized, and backward
equations.
"""

from .backward import (BackwardSolution, DualityReport, SpaceBox,
                       backward_davie_residual, duality_check, grid_axes,
                       pilot_box, solve_backward_fk, write_backward_csv)
from .classical import (ClassicalSample, ClassicalScenario, InitialLaw,
                        KalmanResult, LinearGaussianParams, PrimitiveSystem,
                        RandomizationReport, conditional_mc_filter,
                        kalman_bucy, primitives_from_reduced, probe_k,
                        randomization_harness, reduce_to_nondegenerate,
                        riccati_fixed_point, simulate_system)
from .coeffs import CoefficientSet, fd_check
from .config import RunReport, ScenarioConfig, config_from_dict, load_config
from .controlled import (ControlledPath, RateTable, refine_convergence,
                         rough_integral, young_integral)
from .degenerate import (CollapseReport, DegenerateRun, HatStructure,
                         build_hat_lift, build_hat_path, collapse_gap,
                         degenerate_filter, extend_coefficients, kernel_leak,
                         moore_penrose, penrose_defects)
from .errors import (BlowUpError, CapabilityError, ConfigurationError,
                     DegenerateMassError, DimensionError, InvalidRunError,
                     RoughFilterError)
from .models import BUILTIN, get_model
from .operators import (KSStack, OperatorContext, ResidualReport,
                        TotalMassReport, apply_A, apply_Gamma,
                        apply_Gamma_prime, build_ks_stack, gamma_second_order,
                        ks_davie_residual, psd_probe, solve_mass_rde,
                        strato_equivalence_probe, total_mass_rde,
                        write_residual_csv, zakai_davie_residual)
from .particle import (ParticleEnsemble, Perturbation, RobustnessReport,
                       mc_stderr, mu, perturb_driver, robustness_probe,
                       run_filter, sigma, write_filter_csv)
from .roughpath import (PathValidationReport, RoughPath, TimeGrid, chen_extend,
                        geometrify, homogeneous_norm, lift_ito,
                        lift_piecewise_linear, load_rough_path, rho_alpha,
                        save_rough_path, validate)
from .rsde import (SolutionPath, propagate, solve_from, solve_signal,
                   solve_weight_davie, solve_weight_exponential,
                   stratonovich_transform, write_paths_csv)
from .testfuncs import (TestFunction, clipped_identity, clipped_square,
                        cos_mode, gauss_bump, library, one, tanh_ramp)

__version__ = "0.1.0"
