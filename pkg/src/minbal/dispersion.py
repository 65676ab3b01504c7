"""Weight-dispersion penalties and their dual link transforms.

A balancing-weights problem penalizes each respondent weight ``w`` with a
convex dispersion ``f(w)``.  The dual solver never works with ``f``
directly: it works with a concave transform ``rho`` and its derivative
``rho_prime``, which map a unit's dual score ``t = b(x)' lambda`` to its
primal weight via ``w = rho_prime(t)``.  Three penalties ship:

``Dispersion.VARIANCE``
    ``f(w) = (w - 1/r)**2`` with ``rho(t) = t/r - t**2/4``.  Weights are
    affine in the score and may go negative.

``Dispersion.NEGATIVE_ENTROPY``
    ``f(w) = w*log(w)`` with ``rho(t) = -exp(-t-1)``.  Weights are
    exponential in the score, hence strictly positive.

``Dispersion.SMOOTHED_ABSOLUTE_DEVIATION``
    An absolute deviation ``|w - 1/r|`` whose kink is replaced by an
    epsilon-Huber segment plus an ``(epsilon/2)*(w - 1/r)**2`` curvature
    term.  The extra curvature keeps ``f`` strictly convex with an
    unbounded derivative, so the score-to-weight map is defined on the
    whole real line; without it the dual scores would be confined to
    ``[-1, 1]``.  Small ``epsilon`` is faithful to the L1 penalty but
    makes the dual poorly conditioned.

``check_conjugacy`` re-derives ``rho`` from its definition by numerically
inverting ``h'`` (with ``h(x) = f(1/n - x)``) and reports the worst
disagreement with the closed forms above; it is the correctness oracle
for everything else in this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Dispersion(str, Enum):
    """Supported dispersion penalties, keyed by their CLI tag."""

    VARIANCE = "variance"
    NEGATIVE_ENTROPY = "entropy"
    SMOOTHED_ABSOLUTE_DEVIATION = "absdev"


class DomainError(ValueError):
    """Raised when an argument is outside a transform's domain."""


class BracketingError(RuntimeError):
    """Raised when the conjugacy oracle cannot bracket an inverse."""


@dataclass(frozen=True)
class DispersionSpec:
    """A dispersion penalty bound to a concrete problem size.

    Attributes:
        kind: Which penalty to use.
        r: Number of respondents; the centering ``1/r`` of the variance
            and smoothed-absolute-deviation penalties.
        n: Total sample size; only enters the definitional pipeline
            ``h(x) = f(1/n - x)`` used by :func:`check_conjugacy`.
        epsilon: Huber half-width and tail curvature for
            ``SMOOTHED_ABSOLUTE_DEVIATION``; ignored otherwise.
    """

    kind: Dispersion
    r: int
    n: int
    epsilon: float = 1e-4

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError(f"need at least one respondent, got r={self.r}")
        if self.r > self.n:
            raise ValueError(f"r={self.r} exceeds sample size n={self.n}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _as_checked_array(t, name: str = "t") -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


def _maybe_scalar(values: np.ndarray, like) -> float | np.ndarray:
    if np.isscalar(like) or np.ndim(like) == 0:
        return float(values)
    return values


def rho(t, spec: DispersionSpec):
    """Concave transform of the dispersion at dual score(s) ``t``.

    Accepts a scalar or array and returns the same shape.
    """
    arr = _as_checked_array(t)
    if spec.kind is Dispersion.VARIANCE:
        out = arr / spec.r - arr**2 / 4.0
    elif spec.kind is Dispersion.NEGATIVE_ENTROPY:
        out = -np.exp(-arr - 1.0)
    else:
        out = _sad_rho(arr, spec)
    return _maybe_scalar(out, t)


def rho_prime(t, spec: DispersionSpec):
    """Derivative of :func:`rho`; the weight implied by dual score ``t``.

    For ``VARIANCE`` the value can be negative (weights are unrestricted
    in sign); for ``NEGATIVE_ENTROPY`` it is strictly positive.
    """
    arr = _as_checked_array(t)
    if spec.kind is Dispersion.VARIANCE:
        out = 1.0 / spec.r - arr / 2.0
    elif spec.kind is Dispersion.NEGATIVE_ENTROPY:
        out = np.exp(-arr - 1.0)
    else:
        out = _sad_rho_prime(arr, spec)
    return _maybe_scalar(out, t)


def primal_f(w, spec: DispersionSpec):
    """Dispersion contribution of a single weight (vectorized)."""
    arr = _as_checked_array(w, "w")
    if spec.kind is Dispersion.VARIANCE:
        out = (arr - 1.0 / spec.r) ** 2
    elif spec.kind is Dispersion.NEGATIVE_ENTROPY:
        if np.any(arr <= 0):
            raise DomainError("negative-entropy dispersion needs w > 0")
        out = arr * np.log(arr)
    else:
        u = arr - 1.0 / spec.r
        eps = spec.epsilon
        huber = np.where(np.abs(u) <= eps, u**2 / (2.0 * eps), np.abs(u) - eps / 2.0)
        out = huber + 0.5 * eps * u**2
    return _maybe_scalar(out, w)


def _sad_rho(t: np.ndarray, spec: DispersionSpec) -> np.ndarray:
    eps = spec.epsilon
    brk = 1.0 + eps**2  # |f'| at the Huber/linear junction
    core = t / spec.r - t**2 * eps / (2.0 * brk)
    hi = t / spec.r - (t - 1.0) ** 2 / (2.0 * eps) - eps / 2.0
    lo = t / spec.r - (t + 1.0) ** 2 / (2.0 * eps) - eps / 2.0
    return np.where(t > brk, hi, np.where(t < -brk, lo, core))


def _sad_rho_prime(t: np.ndarray, spec: DispersionSpec) -> np.ndarray:
    eps = spec.epsilon
    brk = 1.0 + eps**2
    core = 1.0 / spec.r - t * eps / brk
    hi = 1.0 / spec.r - (t - 1.0) / eps
    lo = 1.0 / spec.r - (t + 1.0) / eps
    return np.where(t > brk, hi, np.where(t < -brk, lo, core))


def _f_prime(w: np.ndarray, spec: DispersionSpec) -> np.ndarray:
    """Derivative of the primal dispersion; used only by the oracle."""
    if spec.kind is Dispersion.VARIANCE:
        return 2.0 * (w - 1.0 / spec.r)
    if spec.kind is Dispersion.NEGATIVE_ENTROPY:
        return np.log(w) + 1.0
    u = w - 1.0 / spec.r
    eps = spec.epsilon
    return np.clip(u / eps, -1.0, 1.0) + eps * u


@dataclass(frozen=True)
class ConjugacyReport:
    """Worst-case disagreement between closed forms and the definition."""

    max_value_error: float
    max_derivative_error: float
    grid_size: int

    @property
    def max_discrepancy(self) -> float:
        return max(self.max_value_error, self.max_derivative_error)


def check_conjugacy(spec: DispersionSpec, grid) -> ConjugacyReport:
    """Re-derive ``rho`` pointwise by bisection and compare to closed forms.

    For each ``t`` in ``grid`` the definitional pipeline solves
    ``h'(x) = t`` by bracketing + bisection with ``h(x) = f(1/n - x)``,
    then evaluates ``t/n - t*x + h(x)`` and ``1/n - x``.  These must agree
    with :func:`rho` and :func:`rho_prime`.

    Raises:
        BracketingError: if no bracket containing the inverse is found,
            naming the offending grid point.
    """
    pts = _as_checked_array(grid, "grid").ravel()
    if pts.size == 0:
        raise ValueError("grid must be nonempty")

    def h(x: float) -> float:
        return float(primal_f(1.0 / spec.n - x, spec))

    def h_prime(x: float) -> float:
        return -float(_f_prime(np.asarray(1.0 / spec.n - x), spec))

    # h is defined on x < 1/n for the entropy penalty, all reals otherwise.
    open_upper = spec.kind is Dispersion.NEGATIVE_ENTROPY

    worst_val = 0.0
    worst_der = 0.0
    for t in pts:
        x = _invert_h_prime(h_prime, float(t), spec, open_upper)
        definition_rho = t / spec.n - t * x + h(x)
        definition_rho_prime = 1.0 / spec.n - x
        worst_val = max(worst_val, abs(definition_rho - float(rho(t, spec))))
        worst_der = max(worst_der, abs(definition_rho_prime - float(rho_prime(t, spec))))
    return ConjugacyReport(worst_val, worst_der, pts.size)


def _invert_h_prime(h_prime, t: float, spec: DispersionSpec, open_upper: bool) -> float:
    """Solve ``h'(x) = t`` by geometric bracket expansion and bisection."""
    boundary = 1.0 / spec.n
    if open_upper:
        # Approach the pole at x = 1/n from below and extend left.
        hi = boundary - 1.0
        for _ in range(200):
            if h_prime(hi) >= t:
                break
            hi = boundary - (boundary - hi) / 4.0
        else:
            raise BracketingError(f"no upper bracket for t={t!r}")
        lo = boundary - 2.0
        for _ in range(200):
            if h_prime(lo) <= t:
                break
            lo = boundary - (boundary - lo) * 4.0
        else:
            raise BracketingError(f"no lower bracket for t={t!r}")
    else:
        lo, hi = -1.0, 1.0
        for _ in range(200):
            if h_prime(lo) <= t:
                break
            lo *= 4.0
        else:
            raise BracketingError(f"no lower bracket for t={t!r}")
        for _ in range(200):
            if h_prime(hi) >= t:
                break
            hi *= 4.0
        else:
            raise BracketingError(f"no upper bracket for t={t!r}")

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * max(1.0, abs(lo), abs(hi)):
            break
        if h_prime(mid) < t:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
