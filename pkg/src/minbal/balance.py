"""Basis expansion, balance targets, and weighted imbalance.

The solver constrains, for every basis column ``k``, the gap between the
weighted respondent mean of ``B_k`` and a target value.  This module owns
how those columns are built (moments of the covariates, optionally
rescaled to unit standard deviation), what the target is for each
estimand, and the one imbalance computation shared by the solver's
optimality report and any external balance check.

Standardization divides a column by its sample standard deviation without
centering it, so the constraint semantics are unchanged up to a known
per-column scale; tolerance bands stated "in standard-deviation units"
then become literal column tolerances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

_ZERO_SD = 1e-12


class Estimand(str, Enum):
    POPULATION_MEAN = "mean"
    ATT = "att"
    ATE = "ate"


@dataclass(frozen=True)
class BasisColumn:
    """Metadata for one basis column.

    ``sd`` and ``mean`` describe the column as stored (after any
    rescaling); ``scale`` is the divisor applied to the raw values, so
    ``stored * scale`` recovers the raw column.
    """

    name: str
    standardized: bool
    sd: float
    mean: float
    scale: float = 1.0


@dataclass(frozen=True)
class BasisMatrix:
    """An ``n x K`` basis with per-column metadata.

    When ``has_intercept`` is true, column 0 is constantly one; its sd is
    recorded as 1 so tolerance scaling is well defined, and
    :meth:`delta_vector` always assigns it a zero tolerance.
    """

    values: np.ndarray
    columns: tuple[BasisColumn, ...]
    has_intercept: bool

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("basis values must be a 2-D array")
        if not np.all(np.isfinite(values)):
            raise ValueError("basis values must be finite")
        if values.shape[1] != len(self.columns):
            raise ValueError("column metadata does not match basis width")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def sds(self) -> np.ndarray:
        return np.array([c.sd for c in self.columns])

    def non_intercept(self) -> np.ndarray:
        """Boolean mask selecting the non-intercept columns."""
        mask = np.ones(self.k, dtype=bool)
        if self.has_intercept:
            mask[0] = False
        return mask

    def delta_vector(self, delta: float) -> np.ndarray:
        """Per-column tolerances for a scalar ``delta`` in sd units."""
        if delta < 0:
            raise ValueError(f"delta must be nonnegative, got {delta}")
        out = delta * self.sds
        if self.has_intercept:
            out[0] = 0.0
        return out


@dataclass(frozen=True)
class BalanceTarget:
    """Target column means the weighted respondent profile should match."""

    values: np.ndarray
    estimand: Estimand

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("target must be a finite 1-D vector")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def expand_basis(
    covariates: np.ndarray,
    *,
    moments: int = 1,
    standardize: bool = True,
    intercept: bool = True,
    names: list[str] | None = None,
) -> BasisMatrix:
    """Build the basis ``[intercept?] + raw covariates + squares?``.

    Args:
        covariates: ``n x d`` matrix of raw covariates, finite, ``n >= 2``.
        moments: 1 balances first moments only; 2 appends the square of
            each covariate (no cross products).
        standardize: divide every non-intercept column by its sample sd.
        intercept: prepend a constant-one column with zero tolerance.
        names: optional covariate names; defaults to ``x1..xd``.

    Columns with (numerically) zero variance cannot be standardized and
    carry no information beyond the intercept; they are dropped with a
    warning.
    """
    x = np.asarray(covariates, dtype=float)
    if x.ndim != 2:
        raise ValueError("covariates must be a 2-D array")
    n, d = x.shape
    if n < 2 or d < 1:
        raise ValueError(f"need n >= 2 and d >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates must be finite")
    if moments not in (1, 2):
        raise ValueError(f"moments must be 1 or 2, got {moments}")
    if names is None:
        names = [f"x{j + 1}" for j in range(d)]
    elif len(names) != d:
        raise ValueError("names length does not match covariate count")

    candidates: list[tuple[str, np.ndarray]] = [(names[j], x[:, j]) for j in range(d)]
    if moments == 2:
        candidates += [(f"{names[j]}^2", x[:, j] ** 2) for j in range(d)]

    cols: list[np.ndarray] = []
    meta: list[BasisColumn] = []
    if intercept:
        cols.append(np.ones(n))
        meta.append(BasisColumn("intercept", standardized=False, sd=1.0, mean=1.0))
    for name, col in candidates:
        sd = float(np.std(col, ddof=1))
        if sd <= _ZERO_SD * max(1.0, float(np.abs(col).max())):
            warnings.warn(f"dropping zero-variance basis column {name!r}", UserWarning, stacklevel=2)
            continue
        if standardize:
            scaled = col / sd
            cols.append(scaled)
            meta.append(
                BasisColumn(name, standardized=True, sd=1.0, mean=float(scaled.mean()), scale=sd)
            )
        else:
            cols.append(col)
            meta.append(BasisColumn(name, standardized=False, sd=sd, mean=float(col.mean())))
    if all(c.name == "intercept" for c in meta):
        raise ValueError("no usable basis columns after dropping constants")
    return BasisMatrix(np.column_stack(cols), tuple(meta), has_intercept=intercept)


def target_profile(basis: BasisMatrix, z: np.ndarray, estimand: Estimand) -> BalanceTarget:
    """Target means for the requested estimand.

    ``POPULATION_MEAN`` targets the full-sample column means.  ``ATT``
    targets the treated-group column means; the weights are then solved
    over the control group by flipping the indicator.
    """
    z = _check_indicator(z, basis.n)
    estimand = Estimand(estimand)
    if estimand is Estimand.POPULATION_MEAN:
        return BalanceTarget(basis.values.mean(axis=0), estimand)
    if estimand is Estimand.ATT:
        if not np.any(z == 1):
            raise ValueError("ATT target needs at least one treated unit")
        return BalanceTarget(basis.values[z == 1].mean(axis=0), estimand)
    raise ValueError("ATE has no single target; build one per arm with POPULATION_MEAN")


def imbalance(
    weights: np.ndarray, z: np.ndarray, basis: BasisMatrix, target: BalanceTarget
) -> np.ndarray:
    """Signed per-column gap ``sum_i w_i z_i B_k(x_i) - target_k``."""
    w = np.asarray(weights, dtype=float)
    z = _check_indicator(z, basis.n)
    if w.shape != (basis.n,):
        raise ValueError(f"weights must have length {basis.n}")
    if target.values.shape != (basis.k,):
        raise ValueError("target length does not match basis width")
    return (w * z) @ basis.values - target.values


def _check_indicator(z, n: int) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != (n,):
        raise ValueError(f"indicator must have length {n}")
    if not np.isin(z, (0, 1)).all():
        raise ValueError("indicator entries must be 0 or 1")
    return z.astype(np.int8)
