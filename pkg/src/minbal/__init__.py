"""Minimal-dispersion approximately balancing weights.

Solves for the least-dispersed weights that bring weighted respondent
covariate means within a tolerance band of a target profile, estimates
means and treatment effects with a plug-in asymptotic variance, and tunes
the tolerance by bootstrapped covariate balance.
"""

from minbal.balance import BalanceTarget, BasisMatrix, Estimand, expand_basis, imbalance, target_profile
from minbal.dispersion import (
    ConjugacyReport,
    Dispersion,
    DispersionSpec,
    check_conjugacy,
    primal_f,
    rho,
    rho_prime,
)
from minbal.estimator import EstimateReport, Form, estimate_effect, estimate_mean, variance_estimate, weighted_mean
from minbal.simgen import DataError, Dataset, gen_kang_schafer, gen_wong_chan, load_csv, write_csv
from minbal.solver import (
    DualProblem,
    SolveResult,
    SolverOptions,
    kkt_residual,
    objective,
    prox_weighted_l1,
    smooth_gradient,
    solve_dual,
)
from minbal.tuning import TuneConfig, TuneResult, bootstrap_balance, default_grid, tune_delta

__all__ = [
    "BalanceTarget",
    "BasisMatrix",
    "ConjugacyReport",
    "DataError",
    "Dataset",
    "Dispersion",
    "DispersionSpec",
    "DualProblem",
    "Estimand",
    "EstimateReport",
    "Form",
    "SolveResult",
    "SolverOptions",
    "TuneConfig",
    "TuneResult",
    "bootstrap_balance",
    "check_conjugacy",
    "default_grid",
    "estimate_effect",
    "estimate_mean",
    "expand_basis",
    "gen_kang_schafer",
    "gen_wong_chan",
    "imbalance",
    "kkt_residual",
    "load_csv",
    "objective",
    "primal_f",
    "prox_weighted_l1",
    "rho",
    "rho_prime",
    "smooth_gradient",
    "solve_dual",
    "target_profile",
    "tune_delta",
    "variance_estimate",
    "weighted_mean",
    "write_csv",
]
