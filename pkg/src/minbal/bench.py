"""Replication harness: generate, weight, estimate, aggregate.

A bench run repeats, for ``replications`` seeded datasets: draw the
data, build the basis, compute weights per requested balance mode
(exact tolerance zero, tolerance tuned by bootstrapped balance, or a
fixed tolerance sweep), estimate the configured target, and score the
estimate against the generator's truth.  Aggregates are the root mean
squared error with a delta-method Monte-Carlo standard error, the bias,
the CI coverage rate, and the count of replications whose exact-balance
problem admitted no solution (reported as a distinct status rather than
an error, since infeasibility of exact balance is itself a finding).

Replication ``i`` derives every random stream from the master seed and
``i`` (see ``minbal.rng``), so reports are byte-identical across runs
and across worker pools; the report is assembled by replication index
regardless of completion order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from minbal.balance import BasisMatrix, Estimand, expand_basis, target_profile
from minbal.dispersion import Dispersion
from minbal.estimator import EstimationError, Form, estimate_effect, estimate_mean
from minbal.simgen import Dataset, gen_kang_schafer, gen_wong_chan
from minbal.solver import SolveResult, SolverOptions
from minbal.tuning import (
    TuneConfig,
    TuningError,
    bootstrap_balance,
    canonical_json,
    default_grid,
    solve_for_delta,
    tune_delta,
)

MODES = ("exact", "tuned", "sweep")


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchSpec:
    """Configuration of one bench run."""

    dgp: str
    n: int
    replications: int
    estimand: Estimand
    dispersions: tuple[Dispersion, ...]
    modes: tuple[str, ...]
    seed: int
    overlap: str = "good"
    outcome_model: str = "A"
    moments: int = 1
    grid_points: int = 21
    tune_replicates: int = 10
    tune_fraction: float = 0.1
    tol: float = 1e-8
    max_iters: int = 50_000
    epsilon: float = 1e-4

    def __post_init__(self) -> None:
        if self.dgp not in ("kang-schafer", "wong-chan"):
            raise ValueError(f"unknown dgp {self.dgp!r}")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        object.__setattr__(self, "estimand", Estimand(self.estimand))
        object.__setattr__(self, "dispersions", tuple(Dispersion(d) for d in self.dispersions))
        modes = tuple(self.modes)
        if not modes or any(m not in MODES for m in modes):
            raise ValueError(f"modes must be drawn from {MODES}")
        object.__setattr__(self, "modes", modes)
        if self.dgp == "kang-schafer" and self.estimand is not Estimand.POPULATION_MEAN:
            raise ValueError("the missing-outcome benchmark estimates the population mean")
        if self.dgp == "wong-chan" and self.estimand is Estimand.POPULATION_MEAN:
            raise ValueError("the treatment benchmark estimates att or ate")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimand"] = self.estimand.value
        out["dispersions"] = [d.value for d in self.dispersions]
        out["modes"] = list(self.modes)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BenchSpec":
        d = dict(d)
        d["estimand"] = Estimand(d["estimand"])
        d["dispersions"] = tuple(Dispersion(v) for v in d["dispersions"])
        d["modes"] = tuple(d["modes"])
        return cls(**d)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol=self.tol, max_iters=self.max_iters)


PRESETS = {
    "ks-good": BenchSpec(
        dgp="kang-schafer", n=1000, replications=1000, estimand=Estimand.POPULATION_MEAN,
        dispersions=tuple(Dispersion), modes=("exact", "tuned"), seed=20_240_501, overlap="good",
    ),
    "ks-bad": BenchSpec(
        dgp="kang-schafer", n=1000, replications=1000, estimand=Estimand.POPULATION_MEAN,
        dispersions=tuple(Dispersion), modes=("exact", "tuned"), seed=20_240_502, overlap="bad",
    ),
    "wc-a": BenchSpec(
        dgp="wong-chan", n=5000, replications=1000, estimand=Estimand.ATE,
        dispersions=tuple(Dispersion), modes=("exact", "tuned"), seed=20_240_503,
        outcome_model="A", moments=2,
    ),
    "wc-b": BenchSpec(
        dgp="wong-chan", n=5000, replications=1000, estimand=Estimand.ATE,
        dispersions=tuple(Dispersion), modes=("exact", "tuned"), seed=20_240_504,
        outcome_model="B", moments=2,
    ),
}


def child_seed(master: int, *path: int) -> int:
    """64-bit integer seed derived from ``(master, *path)``."""
    seq = np.random.SeedSequence(entropy=master, spawn_key=tuple(path))
    return int(seq.generate_state(1, np.uint64)[0])


def run_bench(spec: BenchSpec, jobs: int = 1) -> dict:
    """Execute the configured replications and aggregate.

    Per-replication failures are recorded in the log with a status and
    never abort the run.
    """
    args = [(spec, i) for i in range(spec.replications)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(_replicate, args))
    else:
        reps = [_replicate(a) for a in args]

    report = {
        "spec": spec.to_dict(),
        "k_balanced": reps[0]["k_balanced"],
        "replications": reps,
        "aggregates": _aggregate(spec, reps),
    }
    if "sweep" in spec.modes:
        report["sweep_summary"] = _aggregate_sweep(spec, reps)
    return report


def aggregate_rmse(errors: list[float]) -> dict:
    """RMSE, bias, and the Monte-Carlo se of the RMSE from raw errors."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return {"rmse": None, "bias": None, "rmse_mc_se": None}
    sq = e**2
    rmse = float(np.sqrt(sq.mean()))
    if rmse > 0 and e.size > 1:
        mc_se = float(sq.std(ddof=1) / (2.0 * rmse * np.sqrt(e.size)))
    else:
        mc_se = 0.0
    return {"rmse": rmse, "bias": float(e.mean()), "rmse_mc_se": mc_se}


def _aggregate(spec: BenchSpec, reps: list[dict]) -> dict:
    out = {}
    for disp in spec.dispersions:
        for mode in spec.modes:
            if mode == "sweep":
                continue
            key = f"{disp.value}/{mode}"
            errors, covered, deltas = [], [], []
            failed = 0
            for rep in reps:
                cell = rep["results"].get(key)
                if cell is None or cell["estimate"] is None:
                    failed += 1
                    continue
                errors.append(cell["estimate"] - rep["truth"])
                covered.append(cell["covered"])
                if cell.get("selected_delta") is not None:
                    deltas.append(cell["selected_delta"])
            agg = aggregate_rmse(errors)
            agg["coverage"] = float(np.mean(covered)) if covered else None
            agg["n_ok"] = len(errors)
            agg["n_failed"] = failed
            if deltas:
                agg["mean_selected_delta"] = float(np.mean(deltas))
            out[key] = agg
    return out


def _aggregate_sweep(spec: BenchSpec, reps: list[dict]) -> dict:
    out = {}
    grid = None
    for disp in spec.dispersions:
        rows = []
        for rep in reps:
            cell = rep["results"].get(f"{disp.value}/sweep")
            if cell is not None:
                rows.append(cell)
                grid = cell["delta"]
        if not rows or grid is None:
            continue
        per_delta = []
        for j, delta in enumerate(grid):
            errs = [
                r["estimate"][j] - rep["truth"]
                for r, rep in zip(rows, reps)
                if r["estimate"][j] is not None
            ]
            cs = [r["c_s"][j] for r in rows if r["c_s"][j] is not None]
            per_delta.append(
                {
                    "delta": delta,
                    "mse": float(np.mean(np.square(errs))) if errs else None,
                    "c_s": float(np.mean(cs)) if cs else None,
                    "n_ok": len(errs),
                }
            )
        out[disp.value] = per_delta
    return out


def _generate(spec: BenchSpec, i: int) -> Dataset:
    seed = child_seed(spec.seed, i)
    if spec.dgp == "kang-schafer":
        return gen_kang_schafer(spec.n, overlap=spec.overlap, seed=seed)
    return gen_wong_chan(spec.n, outcome_model=spec.outcome_model, seed=seed)


def _truth(spec: BenchSpec, ds: Dataset) -> float:
    if spec.estimand is Estimand.POPULATION_MEAN:
        return float(ds.truth.mean)
    gap = ds.truth.y1 - ds.truth.y0
    if spec.estimand is Estimand.ATT:
        return float(gap[np.asarray(ds.z) == 1].mean())
    return float(gap.mean())


def _replicate(args) -> dict:
    spec, i = args
    ds = _generate(spec, i)
    basis = expand_basis(ds.x, moments=spec.moments, standardize=True, intercept=True)
    truth = _truth(spec, ds)
    record = {"rep": i, "truth": truth, "k_balanced": int(basis.non_intercept().sum()), "results": {}}
    for disp in spec.dispersions:
        for mode in spec.modes:
            key = f"{disp.value}/{mode}"
            try:
                if mode == "sweep":
                    record["results"][key] = _sweep_cell(spec, ds, basis, disp, i)
                else:
                    record["results"][key] = _point_cell(spec, ds, basis, disp, mode, i)
            except (EstimationError, TuningError, BenchError) as exc:
                record["results"][key] = _failed_cell(f"error: {exc}")
    return record


def _failed_cell(status: str) -> dict:
    return {"estimate": None, "ci": None, "covered": None, "status": status, "selected_delta": None}


def _tune_config(spec: BenchSpec, basis: BasisMatrix, seed: int) -> TuneConfig:
    k_balanced = int(basis.non_intercept().sum())
    return TuneConfig(
        grid=tuple(default_grid(k_balanced, spec.grid_points)),
        replicates=spec.tune_replicates,
        fraction=spec.tune_fraction,
        seed=seed,
    )


def _point_cell(spec, ds, basis, disp, mode, i) -> dict:
    opts = spec.solver_options()
    cell = {"selected_delta": None}

    def weights_for(z, target, arm: int):
        if mode == "exact":
            delta = 0.0
        else:
            config = _tune_config(spec, basis, child_seed(spec.seed, i, arm))
            tuned = tune_delta(basis, z, disp, config, opts, spec.epsilon, target=target)
            delta = tuned.selected
        result = solve_for_delta(basis, z, disp, delta, opts, spec.epsilon, target=target)
        return result, delta

    if spec.estimand is Estimand.POPULATION_MEAN:
        result, delta = weights_for(ds.z, None, 0)
        cell["selected_delta"] = delta if mode == "tuned" else None
        if not result.converged:
            return {**_failed_cell(_solver_status(result, mode)), "selected_delta": cell["selected_delta"]}
        est = estimate_mean(result, ds.z, ds.y, basis, Form.HAJEK)
    else:
        t = np.asarray(ds.z)
        if spec.estimand is Estimand.ATT:
            target = target_profile(basis, t, Estimand.ATT)
            control, delta = weights_for(1 - t, target, 0)
            cell["selected_delta"] = delta if mode == "tuned" else None
            if not control.converged:
                return {**_failed_cell(_solver_status(control, mode)), "selected_delta": cell["selected_delta"]}
            est = estimate_effect(t, ds.y, basis, Estimand.ATT, control_result=control)
        else:
            control, d_c = weights_for(1 - t, None, 0)
            treated, d_t = weights_for(t, None, 1)
            cell["selected_delta"] = (
                float(np.mean([d_c, d_t])) if mode == "tuned" else None
            )
            if not (control.converged and treated.converged):
                bad = control if not control.converged else treated
                return {**_failed_cell(_solver_status(bad, mode)), "selected_delta": cell["selected_delta"]}
            est = estimate_effect(
                t, ds.y, basis, Estimand.ATE, control_result=control, treated_result=treated
            )
    cell.update(
        {
            "estimate": est.point,
            "ci": [est.ci_low, est.ci_high],
            "covered": bool(est.ci_low <= _truth(spec, ds) <= est.ci_high),
            "status": "ok",
        }
    )
    return cell


def _solver_status(result: SolveResult, mode: str) -> str:
    # Exact balance admitting no solution shows up as a diverging dual or
    # as iteration exhaustion with materially violated constraints.
    if mode == "exact":
        worst = max(abs(e.imbalance) for e in result.kkt)
        if result.status == "diverged" or worst > 1e-4:
            return f"infeasible-exact:{result.status}"
    return f"solver:{result.status}"


def _sweep_cell(spec, ds, basis, disp, i) -> dict:
    opts = spec.solver_options()
    k_balanced = int(basis.non_intercept().sum())
    grid = default_grid(k_balanced, spec.grid_points)
    config = _tune_config(spec, basis, child_seed(spec.seed, i, 0))
    t = np.asarray(ds.z)

    def solve_and_score(z, target, gi, arm):
        result = solve_for_delta(basis, z, disp, float(grid[gi]), opts, spec.epsilon, target=target)
        if not result.converged:
            return result, None
        score = bootstrap_balance(
            result.weights, z, basis, config, path=(gi, arm), target=target
        )
        return result, score

    estimates, scores, statuses = [], [], []
    for gi in range(len(grid)):
        try:
            if spec.estimand is Estimand.POPULATION_MEAN:
                result, score = solve_and_score(ds.z, None, gi, 0)
                if not result.converged:
                    raise _SweepPointFailed(result.status)
                point = estimate_mean(result, ds.z, ds.y, basis, Form.HAJEK).point
            elif spec.estimand is Estimand.ATT:
                target = target_profile(basis, t, Estimand.ATT)
                control, score = solve_and_score(1 - t, target, gi, 0)
                if not control.converged:
                    raise _SweepPointFailed(control.status)
                point = estimate_effect(t, ds.y, basis, Estimand.ATT, control_result=control).point
            else:
                control, s_c = solve_and_score(1 - t, None, gi, 0)
                treated, s_t = solve_and_score(t, None, gi, 1)
                if not (control.converged and treated.converged):
                    bad = control if not control.converged else treated
                    raise _SweepPointFailed(bad.status)
                point = estimate_effect(
                    t, ds.y, basis, Estimand.ATE, control_result=control, treated_result=treated
                ).point
                score = 0.5 * (s_c + s_t)
        except _SweepPointFailed as stop:
            estimates.append(None)
            scores.append(None)
            statuses.append(str(stop))
            continue
        estimates.append(point)
        scores.append(score)
        statuses.append("ok")
    return {"delta": [float(d) for d in grid], "estimate": estimates, "c_s": scores, "status": statuses}


class _SweepPointFailed(Exception):
    pass


def emit_curves(report: dict, out_prefix: str) -> dict:
    """Write the sweep's tidy CSV and SVG curve plot.

    The CSV has one row per (dispersion, delta) with the mean squared
    error and mean bootstrapped balance; the SVG plots both against
    delta with a vertical dotted marker at ``k_balanced ** -0.5``.
    """
    sweep = report.get("sweep_summary")
    if not sweep:
        raise BenchError("report has no sweep data; run with mode 'sweep'")
    k_balanced = report["k_balanced"]
    marker = k_balanced ** -0.5

    csv_path = f"{out_prefix}.csv"
    lines = ["dispersion,delta,mse,c_s"]
    for disp in sorted(sweep):
        for row in sweep[disp]:
            mse = "" if row["mse"] is None else repr(row["mse"])
            cs = "" if row["c_s"] is None else repr(row["c_s"])
            lines.append(f"{disp},{row['delta']!r},{mse},{cs}")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    svg_path = f"{out_prefix}.svg"
    _plot_curves(sweep, marker, svg_path)
    return {"csv": csv_path, "svg": svg_path, "marker": marker}


def _plot_curves(sweep: dict, marker: float, svg_path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "minbal"}):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
        for disp in sorted(sweep):
            rows = sweep[disp]
            deltas = [r["delta"] for r in rows]
            ax1.plot(deltas, [r["mse"] for r in rows], marker="o", ms=3, label=disp)
            ax2.plot(deltas, [r["c_s"] for r in rows], marker="o", ms=3, label=disp)
        for ax, ylab in ((ax1, "mse"), (ax2, "mean bootstrapped imbalance")):
            ax.axvline(marker, ls=":", color="gray")
            ax.set_xlabel("delta (sd units)")
            ax.set_ylabel(ylab)
        ax1.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(svg_path, metadata={"Date": None})
        plt.close(fig)


def report_json(report: dict) -> str:
    return canonical_json(_pyify(report))


def _pyify(obj):
    if isinstance(obj, dict):
        return {k: _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if np.isnan(v) else v
    return obj
