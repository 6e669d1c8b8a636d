"""Numerical toolkit for stochastic zero-sum differential games with state- and control-path dependence."""
from .paths import (CadlagPath, ControlSet, HolderBall, Path, concat, d_infty, d_infty_prime, flat_extend,
                    holder_modulus, in_holder_ball, perturb_path, sample_holder_ball, skorohod_d,
                    vertical_control_sub, vertical_extend)
from .functional import (FunctionalDerivatives, PathFunctional, check_predictable_dependence, derivatives,
                         holder_seminorm_estimate, horizontal_derivative, verify_functional_ito,
                         vertical_gradient, vertical_hessian)
from .dynamics import (BrownianBatch, GameCoefficients, NumericalFailure, estimate_moment_bounds, simulate_sde,
                       validate_assumption1)
from .bsde import (BudgetExceeded, ScenarioTree, build_tree, check_comparison, objective_J, objective_J_lsmc,
                   semigroup_pi, solve_bsde_lsmc, solve_bsde_tree)
from .game import (check_dpp, lower_value_lsmc, lower_value_tree, tree_value, upper_value_lsmc, upper_value_tree,
                   value_regularity_probe)
from .hji import (CandidateSolution, HamiltonianInput, classical_comparison_check, hamiltonian, isaacs_gap,
                  lower_hamiltonian, phji_residual, upper_hamiltonian, viscosity_spot_check)
from .riccati import LQParams, solve_riccati
from .catalog import CATALOG, make_instance

__version__ = "0.1.0"
