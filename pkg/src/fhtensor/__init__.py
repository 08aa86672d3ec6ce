"""Low-rank PARAFAC solvers for finite-horizon tabular MDPs."""
from fhtensor.tensor_core import (
    DenseTensor,
    FactorSet,
    cp_als,
    khatri_rao,
    nfe,
    normalize_factors,
    reconstruct_entry,
    reconstruct_full,
)
from fhtensor.mdp import (
    DPTable,
    NonstationaryPolicy,
    TabularMDP,
    Transition,
    exact_optimal_values,
    exact_policy_evaluation,
    optimal_return,
    policy_improvement,
    policy_return,
    uniform_policy_return,
)
from fhtensor.exact_solver import (
    BCPolicyEvaluator,
    PESettings,
    bc_pe,
    bcd_update,
    bcgd_update,
    build_bellman_system,
    loss,
    policy_iteration,
)
from fhtensor.stochastic import StochSettings, fhql, lfhql, online_pi, stoch_bc_pe, time_agnostic_ql
from fhtensor.environments import make_env
from fhtensor.kernels import BACKEND

__version__ = "0.1.0"
