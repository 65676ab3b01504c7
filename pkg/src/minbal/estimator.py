"""Weighted point estimates, plug-in variance, and effect composition.

The point estimate of a mean is the weighted respondent sum
``sum_i w_i z_i y_i`` (Horvitz-Thompson form) or its ratio form
normalized by ``sum_i w_i z_i`` (Hajek form); with an intercept in the
basis the two coincide because the weights sum to one.

The variance estimate approximates the asymptotic variance of the
weighted mean by squaring an estimated influence function: a weighted
least-squares fit of the outcome on the basis supplies the outcome-model
piece, and ``n * z_i * w_i`` stands in for the inverse propensity.
Concretely, with ``beta`` solving the respondent-weighted normal
equations,

    V = (1/n) * sum_i [ n z_i w_i y_i - sum_j w_j z_j y_j
                        - b_i' beta * (n z_i w_i - 1) ]**2,

and a two-sided CI uses ``point +/- 1.959964 * sqrt(V / n)``.  ``V`` is
reported on this per-observation asymptotic scale throughout.

Treatment-effect composition: ATT subtracts a Hajek-weighted control
mean from the raw treated mean; ATE differences two arms that were each
reweighted toward the full-sample covariate profile.  Effect variances
add the per-arm variance estimates, ignoring the cross-arm covariance
(the arms share no units; the covariance through the common covariate
distribution is dropped, which is conservative in the usual direction
but an approximation nonetheless).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import LinAlgError, solve as linalg_solve

from minbal.balance import BasisMatrix, Estimand
from minbal.solver import SolveResult

Z_CRIT_95 = 1.959964


class Form(str, Enum):
    HT = "ht"
    HAJEK = "hajek"


class EstimationError(RuntimeError):
    pass


class CollinearColumnsError(EstimationError):
    """The respondent-weighted Gram matrix is singular beyond repair."""


class RidgeFallbackWarning(UserWarning):
    """The Gram matrix needed a ridge bump to factor."""


@dataclass(frozen=True)
class EstimateReport:
    """A point estimate with its variance and confidence interval.

    ``variance`` is on the asymptotic (per-observation) scale; the
    interval half-width is ``z * sqrt(variance / n)``.
    """

    estimand: Estimand
    point: float
    variance: float
    ci_low: float
    ci_high: float
    form: Form
    n: int
    r: int
    diagnostics: dict

    def __post_init__(self) -> None:
        if not (self.ci_low <= self.point <= self.ci_high):
            raise ValueError("confidence interval must contain the point estimate")
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand.value,
            "point": self.point,
            "variance": self.variance,
            "ci": [self.ci_low, self.ci_high],
            "form": self.form.value,
            "n": self.n,
            "r": self.r,
            "diagnostics": self.diagnostics,
        }


def weighted_mean(weights, z, y, form: Form = Form.HT) -> float:
    """Weighted respondent mean of the outcome.

    HT: ``sum w_i z_i y_i``.  Hajek: the same divided by
    ``sum w_i z_i`` (invariant to rescaling all weights), which requires
    positive total weight mass.
    """
    w, z, y = _check_wzy(weights, z, y)
    # Mask before multiplying: a NaN outcome on a non-respondent must not
    # poison the sum through 0 * nan.
    total = float(np.sum(w * z * np.where(z == 1, y, 0.0)))
    if Form(form) is Form.HT:
        return total
    mass = float(np.sum(w * z))
    if mass <= 0:
        raise EstimationError("Hajek form needs positive respondent weight mass")
    return total / mass


def variance_estimate(weights, z, y, basis: BasisMatrix) -> float:
    """Plug-in asymptotic variance of the weighted mean (see module doc)."""
    w, z, y = _check_wzy(weights, z, y)
    n, k = basis.n, basis.k
    if w.shape != (n,):
        raise ValueError("weights length does not match basis rows")
    b = basis.values
    wz = w * z
    y_safe = np.where(z == 1, y, 0.0)

    gram = (b * wz[:, None]).T @ b / n
    moment = b.T @ (wz * y_safe) / n
    beta = _solve_gram(gram, moment, basis)

    y_hat_w = float(np.sum(wz * y_safe))
    resid = n * wz * y_safe - y_hat_w - (b @ beta) * (n * wz - 1.0)
    return float(np.mean(resid**2))


def estimate_mean(
    result: SolveResult, z, y, basis: BasisMatrix, form: Form = Form.HAJEK
) -> EstimateReport:
    """Mean-outcome estimate from a converged balancing solve."""
    if not result.converged:
        raise EstimationError(f"solver did not converge (status={result.status})")
    form = Form(form)
    point = weighted_mean(result.weights, z, y, form)
    v = variance_estimate(result.weights, z, y, basis)
    half = Z_CRIT_95 * np.sqrt(v / basis.n)
    return EstimateReport(
        estimand=Estimand.POPULATION_MEAN,
        point=point,
        variance=v,
        ci_low=point - half,
        ci_high=point + half,
        form=form,
        n=basis.n,
        r=int(np.asarray(z).sum()),
        diagnostics={"solver_status": result.status},
    )


def estimate_effect(
    treatment,
    y,
    basis: BasisMatrix,
    estimand: Estimand,
    control_result: SolveResult,
    treated_result: SolveResult | None = None,
) -> EstimateReport:
    """Compose a treatment-effect estimate from per-arm solves.

    ATT: raw treated mean minus the Hajek-weighted control mean, using
    ``control_result`` solved over controls against the treated profile;
    ``treated_result`` is ignored.  ATE: difference of the two reweighted
    arms (both targeted at the full-sample profile), requiring both
    results.  Solver failures propagate as :class:`EstimationError`.
    """
    estimand = Estimand(estimand)
    t = np.asarray(treatment)
    y = np.asarray(y, dtype=float)
    n = basis.n
    if t.shape != (n,) or y.shape != (n,):
        raise ValueError("treatment and outcome must match basis rows")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("treatment entries must be 0 or 1")
    if not control_result.converged:
        raise EstimationError(f"control solve failed (status={control_result.status})")
    z_control = (1 - t).astype(np.int8)

    if estimand is Estimand.ATT:
        n_t = int(t.sum())
        if n_t == 0:
            raise EstimationError("ATT needs at least one treated unit")
        treated_mean = float(y[t == 1].mean())
        control_mean = weighted_mean(control_result.weights, z_control, y, Form.HAJEK)
        point = treated_mean - control_mean
        # Treated arm contributes its raw sampling variance; the weighted
        # control arm contributes the plug-in variance.  Both are put on
        # the common per-observation scale so ci = point +/- z*sqrt(V/n).
        var_t = float(y[t == 1].var(ddof=1)) if n_t > 1 else 0.0
        v_control = variance_estimate(control_result.weights, z_control, y, basis)
        v = n * var_t / n_t + v_control
        r = int(z_control.sum())
        form = Form.HAJEK
    elif estimand is Estimand.ATE:
        if treated_result is None:
            raise ValueError("ATE needs a treated-arm solve")
        if not treated_result.converged:
            raise EstimationError(f"treated solve failed (status={treated_result.status})")
        mean_t = weighted_mean(treated_result.weights, t, y, Form.HAJEK)
        mean_c = weighted_mean(control_result.weights, z_control, y, Form.HAJEK)
        point = mean_t - mean_c
        v = variance_estimate(treated_result.weights, t, y, basis) + variance_estimate(
            control_result.weights, z_control, y, basis
        )
        r = n
        form = Form.HAJEK
    else:
        raise ValueError("use estimate_mean for the population mean")

    half = Z_CRIT_95 * np.sqrt(v / n)
    return EstimateReport(
        estimand=estimand,
        point=point,
        variance=v,
        ci_low=point - half,
        ci_high=point + half,
        form=form,
        n=n,
        r=r,
        diagnostics={"cross_arm_covariance": "ignored"},
    )


def _check_wzy(weights, z, y):
    w = np.asarray(weights, dtype=float)
    z = np.asarray(z)
    y = np.asarray(y, dtype=float)
    if not (w.shape == z.shape == y.shape) or w.ndim != 1:
        raise ValueError("weights, z, and y must be 1-D with equal length")
    if not np.isin(z, (0, 1)).all():
        raise ValueError("z entries must be 0 or 1")
    z = z.astype(np.int8)
    if not np.all(np.isfinite(y[z == 1])):
        raise ValueError("outcomes must be finite on respondents")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w, z, y


def _solve_gram(gram: np.ndarray, moment: np.ndarray, basis: BasisMatrix) -> np.ndarray:
    # Symmetric indefinite factorization: the respondent-weighted Gram is
    # symmetric but need not be positive definite when weights go
    # negative (variance dispersion).
    try:
        return linalg_solve(gram, moment, assume_a="sym")
    except LinAlgError:
        pass
    k = gram.shape[0]
    ridge = 1e-10 * abs(np.trace(gram)) / k
    if ridge <= 0:
        ridge = 1e-10
    warnings.warn(
        f"singular weighted Gram matrix; retrying with ridge {ridge:.3e}",
        RidgeFallbackWarning,
        stacklevel=3,
    )
    try:
        return linalg_solve(gram + ridge * np.eye(k), moment, assume_a="sym")
    except LinAlgError as exc:
        raise CollinearColumnsError(
            f"weighted Gram matrix is singular even after ridge; "
            f"suspect collinear columns among {_suspect_columns(gram, basis)}"
        ) from exc


def _suspect_columns(gram: np.ndarray, basis: BasisMatrix) -> list[str]:
    d = np.sqrt(np.clip(np.diag(gram), 1e-300, None))
    corr = gram / np.outer(d, d)
    names = basis.names
    pairs = []
    k = gram.shape[0]
    for i in range(k):
        for j in range(i + 1, k):
            if abs(corr[i, j]) > 1.0 - 1e-8:
                pairs.append(f"{names[i]}~{names[j]}")
    return pairs or list(names)
