"""Selection of the balance tolerance by bootstrapped covariate balance.

There is no outcome to cross-validate against at the design stage, so
the tolerance scalar ``delta`` is scored by how well the weights —
computed once per candidate on the full data — balance *resampled*
versions of the data: weights close to the true inverse propensities
should balance samples from the population, not just the sample they
were fit on.

For each candidate ``delta`` the solver runs with per-column tolerances
``delta * sd(B_k)`` (zero on the intercept).  Each bootstrap replicate
draws ``ceil(fraction * n)`` rows with replacement from all rows, forms
the Hajek-normalized weighted respondent mean of every non-intercept
column on the replicate, subtracts the full-sample column mean, divides
by the full-sample column sd, and takes the L2 norm of that vector; the
score ``C_S(delta)`` averages the norm over replicates.  The winner is
the converged candidate with the smallest score, ties going to the
smaller ``delta``.

Scores are pure functions of ``(data, config)``: replicate ``b`` of grid
point ``g`` always draws from the stream ``(seed, *path, g, b)`` (see
``minbal.rng``), so serial and parallel runs agree byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from minbal import rng as _rng
from minbal.balance import BalanceTarget, BasisMatrix
from minbal.dispersion import Dispersion, DispersionSpec
from minbal.solver import DualProblem, SolveResult, SolverOptions, solve_dual


class TuningError(RuntimeError):
    pass


def default_grid(k_balanced: int, points: int = 21) -> np.ndarray:
    """Evenly spaced candidates from 0 to ``k_balanced ** -0.5``.

    ``k_balanced`` counts the non-intercept basis columns; tolerances
    above that ceiling stop behaving like balance constraints.
    """
    if k_balanced < 1:
        raise ValueError("need at least one balanced column")
    if points < 1:
        raise ValueError("need at least one grid point")
    return np.linspace(0.0, k_balanced ** -0.5, points)


@dataclass(frozen=True)
class TuneConfig:
    """Grid and bootstrap settings for :func:`tune_delta`."""

    grid: tuple[float, ...]
    replicates: int = 10
    fraction: float = 0.1
    seed: int = 0
    allow_large_delta: bool = False

    def __post_init__(self) -> None:
        grid = tuple(float(g) for g in self.grid)
        if not grid:
            raise ValueError("grid must be nonempty")
        if any(g < 0 for g in grid):
            raise ValueError("grid values must be nonnegative")
        if list(grid) != sorted(grid):
            raise ValueError("grid must be sorted ascending")
        object.__setattr__(self, "grid", grid)
        if self.replicates < 1:
            raise ValueError("need at least one bootstrap replicate")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("fraction must lie in (0, 1]")

    def validate_against(self, k_balanced: int) -> None:
        if k_balanced < 1:
            return  # intercept-only: no balanced columns to cap against
        ceiling = k_balanced ** -0.5
        if not self.allow_large_delta and max(self.grid) > ceiling * (1 + 1e-12):
            raise ValueError(
                f"grid exceeds {ceiling:.6g} for {k_balanced} balanced columns; "
                "pass allow_large_delta=True to override"
            )


@dataclass(frozen=True)
class DeltaScore:
    delta: float
    c_s: float | None
    converged: bool
    status: str
    iterations: int

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "c_s": self.c_s,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class TuneResult:
    """Scores for every grid point and the selected tolerance."""

    per_delta: tuple[DeltaScore, ...]
    selected: float
    selected_index: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "per_delta": [s.to_dict() for s in self.per_delta],
            "selected": self.selected,
            "selected_index": self.selected_index,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def canonical_json(obj) -> str:
    """Stable serialization used for all reports (sorted keys, fixed
    separators); identical inputs give identical bytes."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)


def bootstrap_balance(
    weights,
    z,
    basis: BasisMatrix,
    config: TuneConfig,
    path: tuple[int, ...] = (),
    sampler=None,
    target: BalanceTarget | None = None,
) -> float:
    """Mean bootstrapped standardized imbalance of fixed weights.

    ``weights`` must already be computed on the full data; only the
    evaluation resamples.  The replicate profiles are compared against
    the fixed ``target`` (full-sample column means by default).
    ``sampler(rng, n, m)`` may replace the uniform with-replacement draw
    (a test hook; the identity sampler with ``fraction=1`` reproduces
    the full-sample imbalance).  Replicates whose respondent weight mass
    is zero are redrawn, at most 100 times each.
    """
    w = np.asarray(weights, dtype=float)
    z = np.asarray(z)
    n = basis.n
    if w.shape != (n,) or z.shape != (n,):
        raise ValueError("weights and z must match basis rows")
    m = math.ceil(config.fraction * n)
    wz = w * z
    keep = basis.non_intercept()
    values = basis.values[:, keep]
    if target is None:
        full_means = basis.values.mean(axis=0)[keep]
    else:
        full_means = np.asarray(target.values)[keep]
    sds = basis.sds[keep]
    if sampler is None:
        sampler = _uniform_with_replacement

    total = 0.0
    for b in range(config.replicates):
        gen = _rng.substream(config.seed, *path, b)
        for attempt in range(101):
            idx = sampler(gen, n, m)
            mass = float(np.sum(wz[idx]))
            if mass > 0:
                break
        else:
            raise TuningError(
                f"bootstrap replicate {b} drew zero respondent weight mass 100 times"
            )
        hajek = (wz[idx] @ values[idx]) / mass
        total += float(np.linalg.norm((hajek - full_means) / sds))
    return total / config.replicates


def _uniform_with_replacement(gen: np.random.Generator, n: int, m: int) -> np.ndarray:
    return gen.integers(0, n, size=m)


def tune_delta(
    basis: BasisMatrix,
    z,
    kind: Dispersion,
    config: TuneConfig,
    opts: SolverOptions | None = None,
    epsilon: float = 1e-4,
    jobs: int = 1,
    target: BalanceTarget | None = None,
) -> TuneResult:
    """Score every grid candidate and select the tolerance.

    Grid points are independent; with ``jobs > 1`` they are solved in a
    process pool, and the result is identical to the serial run because
    each point owns its random substream.

    Raises:
        TuningError: if no grid point produced a converged solve.
    """
    z = np.asarray(z)
    k_balanced = int(basis.non_intercept().sum())
    config.validate_against(k_balanced)
    opts = opts or SolverOptions()

    args = [(basis, z, kind, config, opts, epsilon, target, gi) for gi in range(len(config.grid))]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_score_grid_point, args))
    else:
        scores = [_score_grid_point(a) for a in args]

    best = None
    for i, s in enumerate(scores):
        if s.converged and (best is None or s.c_s < scores[best].c_s):
            best = i
    if best is None:
        detail = "; ".join(f"delta={s.delta:.4g}: {s.status}" for s in scores)
        raise TuningError(f"no grid point converged ({detail})")
    return TuneResult(
        per_delta=tuple(scores), selected=scores[best].delta, selected_index=best, seed=config.seed
    )


def _score_grid_point(args) -> DeltaScore:
    basis, z, kind, config, opts, epsilon, target, gi = args
    delta_scalar = config.grid[gi]
    result = solve_for_delta(basis, z, kind, delta_scalar, opts, epsilon, target)
    if not result.converged:
        return DeltaScore(delta_scalar, None, False, result.status, result.iterations)
    c_s = bootstrap_balance(result.weights, z, basis, config, path=(gi,), target=target)
    return DeltaScore(delta_scalar, c_s, True, result.status, result.iterations)


def solve_for_delta(
    basis: BasisMatrix,
    z,
    kind: Dispersion,
    delta_scalar: float,
    opts: SolverOptions | None = None,
    epsilon: float = 1e-4,
    target: BalanceTarget | None = None,
) -> SolveResult:
    """Solve one balancing problem with sd-unit tolerance ``delta_scalar``."""
    z = np.asarray(z)
    spec = DispersionSpec(Dispersion(kind), r=int(z.sum()), n=basis.n, epsilon=epsilon)
    problem = DualProblem(
        basis=basis, z=z, delta=basis.delta_vector(delta_scalar), spec=spec, target=target
    )
    return solve_dual(problem, opts)
