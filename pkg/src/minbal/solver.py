"""Accelerated proximal-gradient solver for the balancing-weights dual.

The weights of minimum dispersion subject to per-column balance
tolerances ``delta_k`` are recovered from the unconstrained dual

    minimize_over_lambda  -sum_{i: z_i=1} rho(b_i' lambda)
                          + target' lambda + sum_k delta_k |lambda_k|,

whose minimizer ``lambda`` yields ``w_i = rho_prime(b_i' lambda)`` on
respondents and 0 elsewhere.  The smooth part's gradient is the negated
signed imbalance of those weights, so first-order optimality is exactly
the complementary-slackness picture: a coordinate with positive
``lambda_k`` sits on the upper tolerance boundary, a negative one on the
lower boundary, and a zero one strictly inside the band.

The objective is smooth-plus-weighted-L1, so we run FISTA with weighted
soft-thresholding, a backtracking line search (initial step 1, halved
until sufficient decrease; no global Lipschitz constant exists for the
entropy link), and function-value adaptive restart, which keeps accepted
objective values non-increasing.  A solve is declared converged only
when the composite gradient mapping is small *and* the stationarity
certificate below holds at ``kkt_tol``, because callers rely on the
certificate whenever ``converged`` is set.

A sum-to-one constraint is expressed as an intercept basis column with
zero tolerance, so it needs no special handling here.  Weight positivity
is deliberately not enforced: the entropy link is positive by
construction, while the variance and smoothed-absolute-deviation links
may produce negative weights, which are counted in the diagnostics
rather than clipped (clipping would invalidate the optimality
certificate).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from minbal.balance import BalanceTarget, BasisMatrix, Estimand, imbalance
from minbal.dispersion import DispersionSpec, rho, rho_prime


class SolverError(RuntimeError):
    pass


class NonFiniteIterateError(SolverError):
    """An iterate or gradient became NaN; the problem data is suspect."""


class CollinearBasisWarning(UserWarning):
    """The respondent basis is numerically rank deficient; the dual
    minimizer need not be unique (the weights typically still are)."""


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for :func:`solve_dual`.

    ``tol`` bounds the composite gradient-mapping norm relative to
    ``1 + |objective|``; ``kkt_tol`` is the absolute stationarity
    tolerance a converged solve must certify.  ``objective_floor`` turns
    an unbounded dual (infeasible primal) into a clean ``diverged``
    status instead of an overflow.
    """

    tol: float = 1e-8
    max_iters: int = 50_000
    kkt_tol: float = 1e-6
    initial_step: float = 1.0
    step_shrink: float = 0.5
    objective_floor: float = -1e9
    track_objective: bool = False


@dataclass(frozen=True)
class DualProblem:
    """Data of one balancing solve.

    ``delta`` is the per-column tolerance vector (use
    ``BasisMatrix.delta_vector`` for sd-unit scaling); it must be zero on
    the intercept column.  ``target`` defaults to the full-sample column
    means.
    """

    basis: BasisMatrix
    z: np.ndarray
    delta: np.ndarray
    spec: DispersionSpec
    target: BalanceTarget | None = None

    def __post_init__(self) -> None:
        z = np.asarray(self.z)
        if z.shape != (self.basis.n,):
            raise ValueError(f"z must have length {self.basis.n}")
        if not np.isin(z, (0, 1)).all():
            raise ValueError("z entries must be 0 or 1")
        z = z.astype(np.int8)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        if int(z.sum()) == 0:
            raise ValueError("no respondents: every z entry is 0")

        delta = np.asarray(self.delta, dtype=float)
        if delta.shape != (self.basis.k,):
            raise ValueError(f"delta must have length {self.basis.k}")
        if not np.all(np.isfinite(delta)) or np.any(delta < 0):
            raise ValueError("delta entries must be finite and nonnegative")
        if self.basis.has_intercept and delta[0] != 0.0:
            raise ValueError("intercept tolerance must be 0")
        delta = delta.copy()
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)

        if self.target is None:
            object.__setattr__(
                self,
                "target",
                BalanceTarget(self.basis.values.mean(axis=0), Estimand.POPULATION_MEAN),
            )
        if self.target.values.shape != (self.basis.k,):
            raise ValueError("target length does not match basis width")

        if self.spec.r != int(z.sum()) or self.spec.n != self.basis.n:
            raise ValueError("dispersion spec (r, n) must match the problem data")

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def r(self) -> int:
        return int(self.z.sum())

    def respondent_basis(self) -> np.ndarray:
        return self.basis.values[np.asarray(self.z) == 1]


@dataclass(frozen=True)
class KKTEntry:
    """Optimality record for one balance constraint."""

    index: int
    name: str
    imbalance: float
    delta: float
    lam: float
    active: bool
    sign: int

    def to_dict(self) -> dict:
        return {
            "k": self.index,
            "name": self.name,
            "imbalance": self.imbalance,
            "delta": self.delta,
            "lambda": self.lam,
            "active": self.active,
            "sign": self.sign,
        }


@dataclass
class SolveResult:
    """Dual solution, recovered weights, and diagnostics."""

    lam: np.ndarray
    weights: np.ndarray
    iterations: int
    converged: bool
    kkt: list[KKTEntry]
    objective_value: float
    status: str
    diagnostics: dict = field(default_factory=dict)
    objective_trace: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "lambda": [float(v) for v in self.lam],
            "weights": [float(v) for v in self.weights],
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective_value,
            "status": self.status,
            "kkt": [e.to_dict() for e in self.kkt],
            "diagnostics": self.diagnostics,
        }


def prox_weighted_l1(v: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Coordinatewise ``sign(v) * max(|v| - threshold, 0)``."""
    v = np.asarray(v, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    if v.shape != thresholds.shape:
        raise ValueError("v and thresholds must have the same shape")
    if np.any(thresholds < 0):
        raise ValueError("thresholds must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - thresholds, 0.0)


def objective(problem: DualProblem, lam: np.ndarray) -> float:
    """Full dual objective (smooth part plus weighted L1 penalty)."""
    lam = _check_lambda(problem, lam)
    return _smooth_value(problem, lam) + float(problem.delta @ np.abs(lam))


def smooth_gradient(problem: DualProblem, lam: np.ndarray) -> np.ndarray:
    """Gradient of the smooth part; the negated signed imbalance at the
    weights ``rho_prime(b_i' lam)``."""
    lam = _check_lambda(problem, lam)
    b_resp = problem.respondent_basis()
    w_resp = rho_prime(b_resp @ lam, problem.spec)
    return problem.target.values - b_resp.T @ w_resp


def _check_lambda(problem: DualProblem, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (problem.basis.k,):
        raise ValueError(f"lambda must have length {problem.basis.k}")
    return lam


def _smooth_value(problem: DualProblem, lam: np.ndarray, b_resp=None) -> float:
    if b_resp is None:
        b_resp = problem.respondent_basis()
    with np.errstate(over="ignore"):
        val = -np.sum(rho(b_resp @ lam, problem.spec)) + float(problem.target.values @ lam)
    return float(val)


def recover_weights(problem: DualProblem, lam: np.ndarray) -> np.ndarray:
    """Full-length weight vector implied by dual scores; zero off-respondents."""
    lam = _check_lambda(problem, lam)
    w = np.zeros(problem.n)
    mask = np.asarray(problem.z) == 1
    w[mask] = rho_prime(problem.basis.values[mask] @ lam, problem.spec)
    return w


def kkt_residual(result: SolveResult, problem: DualProblem) -> list[KKTEntry]:
    """Per-constraint optimality report for a solve's weights.

    Activity means the constraint binds: a nonzero multiplier, or a zero
    tolerance (equality constraint).
    """
    return _kkt_entries(problem, result.lam, result.weights)


def _kkt_entries(problem: DualProblem, lam: np.ndarray, weights: np.ndarray) -> list[KKTEntry]:
    imb = imbalance(weights, problem.z, problem.basis, problem.target)
    entries = []
    for k in range(problem.basis.k):
        lam_k = float(lam[k])
        entries.append(
            KKTEntry(
                index=k,
                name=problem.basis.columns[k].name,
                imbalance=float(imb[k]),
                delta=float(problem.delta[k]),
                lam=lam_k,
                active=bool(lam_k != 0.0 or problem.delta[k] == 0.0),
                sign=int(np.sign(lam_k)),
            )
        )
    return entries


def _stationarity_ok(lam: np.ndarray, imb: np.ndarray, delta: np.ndarray, tol: float) -> bool:
    pos = lam > 0
    neg = lam < 0
    zero = lam == 0
    if np.any(np.abs(imb[pos] - delta[pos]) > tol):
        return False
    if np.any(np.abs(imb[neg] + delta[neg]) > tol):
        return False
    return not np.any(np.abs(imb[zero]) > delta[zero] + tol)


def solve_dual(problem: DualProblem, opts: SolverOptions | None = None) -> SolveResult:
    """Minimize the dual and recover the balancing weights.

    Returns a :class:`SolveResult` whose ``status`` is one of
    ``converged`` (gradient mapping below tolerance and stationarity
    certified), ``max_iters``, or ``diverged`` (objective fell through
    ``opts.objective_floor``, the signature of an infeasible primal).

    Raises:
        NonFiniteIterateError: if an accepted iterate goes NaN.
    """
    opts = opts or SolverOptions()
    delta = problem.delta
    k = problem.basis.k

    _warn_if_collinear(problem.respondent_basis())

    # Internal preconditioning, mapped back before anything is reported.
    #
    # With an intercept present, shifting every other column by a
    # multiple of the constant column is a change of dual coordinates
    # that only remixes the unpenalized intercept coefficient, so the
    # weighted-L1 structure and the objective value are untouched.
    # Centering on the full-sample column means removes the
    # mean/intercept collinearity that otherwise dominates the smooth
    # part's curvature.
    #
    # When every tolerance is zero there is no L1 term at all, so any
    # invertible reparametrization is legal: whitening the respondent
    # columns makes the curvature isotropic, which matters for nearly
    # collinear bases (e.g. a covariate next to its square).
    center = np.zeros(k)
    if problem.basis.has_intercept:
        center = problem.basis.values.mean(axis=0)
        center[0] = 0.0
    values_c = problem.basis.values - center
    target_c = problem.target.values - center * (
        problem.target.values[0] if problem.basis.has_intercept else 0.0
    )
    b_resp_c = values_c[np.asarray(problem.z) == 1]

    whiten = None  # lower-triangular L with G = L L', lambda_c = L^{-T} lambda_w
    if not np.any(delta > 0):
        try:
            whiten = cholesky(b_resp_c.T @ b_resp_c, lower=True)
        except LinAlgError:
            whiten = None  # rank deficient; fall back to centered coordinates
    if whiten is not None:
        b_resp = solve_triangular(whiten, b_resp_c.T, lower=True).T
        target = solve_triangular(whiten, target_c, lower=True)
    else:
        b_resp = b_resp_c
        target = target_c

    def smooth(lam: np.ndarray) -> float:
        with np.errstate(over="ignore"):
            return float(-np.sum(rho(b_resp @ lam, problem.spec)) + target @ lam)

    def grad(lam: np.ndarray) -> np.ndarray:
        return target - b_resp.T @ rho_prime(b_resp @ lam, problem.spec)

    def original_imbalance(g: np.ndarray) -> np.ndarray:
        imb_c = -g
        if whiten is not None:
            imb_c = whiten @ imb_c
        return imb_c + center * imb_c[0]

    x = np.zeros(k)
    y = x
    fx = smooth(x)
    gx = float(fx + delta @ np.abs(x))
    momentum = 1.0
    step = opts.initial_step
    restarts = 0
    trace = [gx] if opts.track_objective else None

    status = "max_iters"
    iterations = 0
    grad_map_norm = np.inf

    for iterations in range(1, opts.max_iters + 1):
        cand, f_cand, step = _backtrack(smooth, grad, y, step, delta, opts)
        g_cand = float(f_cand + delta @ np.abs(cand))

        if g_cand > gx:
            # Momentum overshot: restart from the best point.
            restarts += 1
            momentum = 1.0
            cand, f_cand, step = _backtrack(smooth, grad, x, step, delta, opts)
            g_cand = float(f_cand + delta @ np.abs(cand))

        if not np.all(np.isfinite(cand)):
            raise NonFiniteIterateError("solver produced a non-finite iterate")

        if trace is not None:
            trace.append(g_cand)

        if g_cand < opts.objective_floor:
            x, gx = cand, g_cand
            status = "diverged"
            break

        # Convergence test on the plain proximal step from the candidate.
        g_at_cand = grad(cand)
        plain = prox_weighted_l1(cand - step * g_at_cand, step * delta)
        grad_map_norm = float(np.linalg.norm((cand - plain) / step))
        if grad_map_norm <= opts.tol * (1.0 + abs(g_cand)) and _stationarity_ok(
            cand, original_imbalance(g_at_cand), delta, opts.kkt_tol
        ):
            x, gx = cand, g_cand
            status = "converged"
            break

        momentum_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
        y = cand + ((momentum - 1.0) / momentum_next) * (cand - x)
        x, gx = cand, g_cand
        momentum = momentum_next

    lam = x.copy()
    if whiten is not None:
        lam = solve_triangular(whiten.T, lam, lower=False)
    if problem.basis.has_intercept:
        lam_c = lam.copy()
        lam[0] = lam_c[0] - float(center @ lam_c)
    weights = recover_weights(problem, lam)
    kkt = _kkt_entries(problem, lam, weights)
    converged = status == "converged" and _stationarity_ok(
        lam, np.array([e.imbalance for e in kkt]), delta, opts.kkt_tol
    )
    if status == "converged" and not converged:
        status = "max_iters"

    negative = int(np.sum(weights < 0))
    result = SolveResult(
        lam=lam,
        weights=weights,
        iterations=iterations,
        converged=converged,
        kkt=kkt,
        objective_value=gx,
        status=status,
        diagnostics={
            "gradient_map_norm": grad_map_norm,
            "step": step,
            "restarts": restarts,
            "negative_weights": negative,
            "min_weight": float(weights.min()) if problem.n else 0.0,
        },
        objective_trace=np.asarray(trace) if trace is not None else None,
    )
    return result


def _backtrack(smooth, grad, base: np.ndarray, step: float, delta: np.ndarray, opts: SolverOptions):
    """One proximal-gradient step from ``base`` with step halving.

    The step only ever shrinks over the course of a solve: regrowing it
    would eventually accept an unstable step near the optimum, where the
    sufficient-decrease test loses resolution, and the iteration would
    cycle instead of converging.  The tiny slack below absorbs honest
    floating-point noise in the test without masking real violations.
    """
    f_base = smooth(base)
    g_base = grad(base)
    if not np.all(np.isfinite(g_base)):
        raise NonFiniteIterateError("gradient is non-finite at an accepted point")
    for _ in range(120):
        cand = prox_weighted_l1(base - step * g_base, step * delta)
        f_cand = smooth(cand)
        if np.isfinite(f_cand):
            diff = cand - base
            model = f_base + float(g_base @ diff) + float(diff @ diff) / (2.0 * step)
            if f_cand <= model + 1e-12 * max(1.0, abs(f_base)):
                return cand, f_cand, step
        step *= opts.step_shrink
    raise SolverError("line search failed to find a finite decrease step")


def _warn_if_collinear(b_resp: np.ndarray) -> None:
    gram = b_resp.T @ b_resp
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] < 1e-10 * max(eigs[-1], 1e-300):
        warnings.warn(
            "respondent basis is numerically rank deficient; dual solution may not be unique",
            CollinearBasisWarning,
            stacklevel=3,
        )
