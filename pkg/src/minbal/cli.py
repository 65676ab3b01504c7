"""Command-line entry point.

Subcommands: ``weights`` (solve one balancing problem), ``estimate``
(solve and estimate a mean or effect), ``tune`` (select the balance
tolerance), ``simulate`` (write a benchmark dataset), ``bench`` (run a
replication study), and ``check`` (verify the dispersion transforms
against their definitional oracle).

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver
non-convergence under ``--strict``.  Every failure prints a one-line
``error:<class>: message`` to stderr.  Reports are JSON validated
against the schemas shipped in ``minbal/schemas`` and embed the resolved
configuration; ``--deterministic`` omits the timestamp so reruns with
the same seed are byte-identical.
"""

from __future__ import annotations

import json
import os
import sys
from datetime import datetime, timezone
from importlib import resources

import click
import jsonschema
import numpy as np

from minbal.balance import Estimand, expand_basis, target_profile
from minbal.bench import PRESETS, BenchSpec, emit_curves, report_json, run_bench
from minbal.dispersion import Dispersion, DispersionSpec, check_conjugacy
from minbal.estimator import EstimationError, Form, estimate_effect, estimate_mean
from minbal.simgen import DataError, gen_kang_schafer, gen_wong_chan, load_csv, write_csv
from minbal.solver import SolverOptions
from minbal.tuning import TuneConfig, TuningError, canonical_json, default_grid, solve_for_delta, tune_delta

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3


class SolverNotConverged(RuntimeError):
    pass


def _load_schema(name: str) -> dict:
    with resources.files("minbal.schemas").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_report(report: dict, schema_name: str, out: str, deterministic: bool) -> None:
    if not deterministic:
        report["timestamp"] = datetime.now(timezone.utc).isoformat()
    jsonschema.validate(report, _load_schema(schema_name))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(report) + "\n")


def _resolve_jobs(jobs: int | None) -> int:
    if jobs is not None:
        return jobs
    env = os.environ.get("MINBAL_JOBS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _dataset(input_path, z_col, y_col, covariates):
    cols = [c.strip() for c in covariates.split(",")] if covariates else None
    return load_csv(input_path, z_column=z_col, covariate_columns=cols, y_column=y_col)


_common_data = [
    click.option("--input", "input_path", required=True, help="CSV file with a header row."),
    click.option("--z", "z_col", required=True, help="0/1 indicator column."),
    click.option("--covariates", default=None, help="Comma-separated covariate columns (default: all others)."),
]
_common_solver = [
    click.option("--dispersion", type=click.Choice([d.value for d in Dispersion]), default="entropy"),
    click.option("--delta", type=float, default=0.0, help="Balance tolerance in sd units."),
    click.option("--epsilon", type=float, default=1e-4, help="Smoothing for absdev dispersion."),
    click.option("--moments", type=click.Choice(["1", "2"]), default="1"),
    click.option("--no-standardize", is_flag=True, default=False),
    click.option("--no-intercept", is_flag=True, default=False),
    click.option("--tol", type=float, default=1e-8),
    click.option("--max-iters", type=int, default=50_000),
    click.option("--strict", is_flag=True, default=False, help="Exit 3 if the solver does not converge."),
]
_common_out = [
    click.option("--out", required=True, help="Output report path."),
    click.option("--deterministic", is_flag=True, default=False, help="Omit the timestamp from the report."),
]


def _add_options(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return wrap


@click.group()
def cli() -> None:
    """Minimal-dispersion approximately balancing weights."""


@cli.command()
@_add_options(_common_data)
@click.option("--y", "y_col", default=None, help="Optional outcome column (ignored by this command).")
@_add_options(_common_solver)
@_add_options(_common_out)
def weights(input_path, z_col, covariates, y_col, dispersion, delta, epsilon, moments,
            no_standardize, no_intercept, tol, max_iters, strict, out, deterministic):
    """Solve one balancing problem and write weights plus diagnostics."""
    ds = _dataset(input_path, z_col, y_col, covariates)
    basis = expand_basis(
        ds.x, moments=int(moments), standardize=not no_standardize,
        intercept=not no_intercept, names=list(ds.names),
    )
    opts = SolverOptions(tol=tol, max_iters=max_iters)
    result = solve_for_delta(basis, ds.z, Dispersion(dispersion), delta, opts, epsilon)
    if strict and not result.converged:
        raise SolverNotConverged(f"status={result.status} after {result.iterations} iterations")
    report = {
        "kind": "weights",
        "config": {
            "input": input_path, "z": z_col, "covariates": list(ds.names),
            "dispersion": dispersion, "delta": delta, "epsilon": epsilon,
            "moments": int(moments), "standardize": not no_standardize,
            "intercept": not no_intercept, "tol": tol, "max_iters": max_iters,
        },
        "basis_columns": list(basis.names),
        "weights_scaled": [float(v) * ds.n for v in result.weights],
        **result.to_dict(),
    }
    _write_report(report, "weights_report.schema.json", out, deterministic)
    click.echo(f"wrote {out} ({result.status}, {result.iterations} iterations)")


@cli.command()
@_add_options(_common_data)
@click.option("--y", "y_col", required=True, help="Outcome column.")
@click.option("--estimand", type=click.Choice(["mean", "att", "ate"]), default="mean")
@click.option("--form", type=click.Choice(["ht", "hajek"]), default="hajek")
@click.option("--tune/--no-tune", "do_tune", default=False, help="Select delta by bootstrapped balance.")
@click.option("--replicates", type=int, default=10)
@click.option("--fraction", type=float, default=0.1)
@click.option("--grid-points", type=int, default=21)
@click.option("--seed", type=int, default=0)
@_add_options(_common_solver)
@_add_options(_common_out)
def estimate(input_path, z_col, covariates, y_col, estimand, form, do_tune, replicates,
             fraction, grid_points, seed, dispersion, delta, epsilon, moments,
             no_standardize, no_intercept, tol, max_iters, strict, out, deterministic):
    """Estimate a population mean or treatment effect from solved weights."""
    ds = _dataset(input_path, z_col, y_col, covariates)
    if ds.outcome_free:
        raise DataError("missing-column", "estimation needs an outcome column")
    basis = expand_basis(
        ds.x, moments=int(moments), standardize=not no_standardize,
        intercept=not no_intercept, names=list(ds.names),
    )
    opts = SolverOptions(tol=tol, max_iters=max_iters)
    kind = Dispersion(dispersion)
    estimand = Estimand(estimand)
    k_bal = int(basis.non_intercept().sum())

    def pick_delta(z, target, arm):
        if not do_tune:
            return delta
        config = TuneConfig(
            grid=tuple(default_grid(k_bal, grid_points)),
            replicates=replicates, fraction=fraction, seed=seed + arm,
        )
        return tune_delta(basis, z, kind, config, opts, epsilon, target=target).selected

    def arm_solve(z, target, arm):
        d = pick_delta(z, target, arm)
        result = solve_for_delta(basis, z, kind, d, opts, epsilon, target=target)
        if strict and not result.converged:
            raise SolverNotConverged(f"status={result.status}")
        return result, d

    if estimand is Estimand.POPULATION_MEAN:
        result, used_delta = arm_solve(ds.z, None, 0)
        est = estimate_mean(result, ds.z, ds.y, basis, Form(form))
    elif estimand is Estimand.ATT:
        t = np.asarray(ds.z)
        target = target_profile(basis, t, Estimand.ATT)
        control, used_delta = arm_solve(1 - t, target, 0)
        est = estimate_effect(t, ds.y, basis, Estimand.ATT, control_result=control)
    else:
        t = np.asarray(ds.z)
        control, d_c = arm_solve(1 - t, None, 0)
        treated, d_t = arm_solve(t, None, 1)
        used_delta = float(np.mean([d_c, d_t]))
        est = estimate_effect(t, ds.y, basis, Estimand.ATE, control_result=control, treated_result=treated)

    report = {
        "kind": "estimate",
        "config": {
            "input": input_path, "z": z_col, "y": y_col, "estimand": estimand.value,
            "dispersion": dispersion, "tuned": do_tune, "delta": delta, "seed": seed,
            "moments": int(moments), "form": form,
        },
        "selected_delta": used_delta,
        **est.to_dict(),
    }
    _write_report(report, "estimate_report.schema.json", out, deterministic)
    click.echo(f"wrote {out} (point={est.point:.6g}, ci=[{est.ci_low:.6g}, {est.ci_high:.6g}])")


@cli.command()
@_add_options(_common_data)
@click.option("--y", "y_col", default=None, help="Optional outcome column (unused in tuning).")
@click.option("--dispersion", type=click.Choice([d.value for d in Dispersion]), default="entropy")
@click.option("--grid-points", type=int, default=21)
@click.option("--grid-max", default="auto", help="'auto' for k**-0.5, or a float ceiling.")
@click.option("--replicates", type=int, default=10)
@click.option("--fraction", type=float, default=0.1)
@click.option("--seed", type=int, default=0)
@click.option("--allow-large-delta", is_flag=True, default=False)
@click.option("--epsilon", type=float, default=1e-4)
@click.option("--moments", type=click.Choice(["1", "2"]), default="1")
@click.option("--tol", type=float, default=1e-8)
@click.option("--max-iters", type=int, default=50_000)
@click.option("--strict", is_flag=True, default=False)
@_add_options(_common_out)
def tune(input_path, z_col, covariates, y_col, dispersion, grid_points, grid_max, replicates,
         fraction, seed, allow_large_delta, epsilon, moments, tol, max_iters, strict, out,
         deterministic):
    """Select the balance tolerance by bootstrapped covariate balance."""
    ds = _dataset(input_path, z_col, y_col, covariates)
    basis = expand_basis(ds.x, moments=int(moments), names=list(ds.names))
    k_bal = int(basis.non_intercept().sum())
    if grid_max == "auto":
        grid = default_grid(k_bal, grid_points)
    else:
        grid = np.linspace(0.0, float(grid_max), grid_points)
    config = TuneConfig(
        grid=tuple(grid), replicates=replicates, fraction=fraction, seed=seed,
        allow_large_delta=allow_large_delta,
    )
    opts = SolverOptions(tol=tol, max_iters=max_iters)
    try:
        result = tune_delta(basis, ds.z, Dispersion(dispersion), config, opts, epsilon)
    except TuningError as exc:
        if strict:
            raise SolverNotConverged(str(exc)) from exc
        raise
    report = {
        "kind": "tune",
        "config": {
            "input": input_path, "z": z_col, "dispersion": dispersion,
            "grid_points": grid_points, "grid_max": grid_max, "replicates": replicates,
            "fraction": fraction, "seed": seed, "moments": int(moments),
        },
        **result.to_dict(),
    }
    _write_report(report, "tune_report.schema.json", out, deterministic)
    click.echo(f"wrote {out} (selected delta={result.selected:.6g})")


@cli.command()
@click.option("--dgp", type=click.Choice(["kang-schafer", "wong-chan"]), required=True)
@click.option("--n", type=int, required=True)
@click.option("--overlap", type=click.Choice(["good", "bad"]), default="good")
@click.option("--outcome-model", type=click.Choice(["A", "B"]), default="A")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True)
def simulate(dgp, n, overlap, outcome_model, seed, out):
    """Generate a benchmark dataset and write it as CSV."""
    if dgp == "kang-schafer":
        ds = gen_kang_schafer(n, overlap=overlap, seed=seed)
    else:
        ds = gen_wong_chan(n, outcome_model=outcome_model, seed=seed)
    write_csv(ds, out)
    click.echo(f"wrote {out} (n={ds.n}, d={ds.d}, respondents={int(np.asarray(ds.z).sum())})")


@cli.command()
@click.option("--spec", "spec_path", default=None, help="Bench spec JSON file.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--replications", type=int, default=None, help="Override the replication count.")
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--dispersions", default=None, help="Override dispersions (comma-separated tags).")
@click.option("--jobs", type=int, default=None, help="Worker count (default: MINBAL_JOBS or all cores).")
@click.option("--out-dir", required=True)
@click.option("--deterministic", is_flag=True, default=False)
def bench(spec_path, preset, replications, seed, dispersions, jobs, out_dir, deterministic):
    """Run a replication study and write report JSON (+ curves for sweeps)."""
    if (spec_path is None) == (preset is None):
        raise click.UsageError("provide exactly one of --spec or --preset")
    if spec_path is not None:
        try:
            with open(spec_path, encoding="utf-8") as fh:
                spec = BenchSpec.from_dict(json.load(fh))
        except OSError as exc:
            raise DataError("missing-file", f"cannot read {spec_path}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError("parse", f"invalid bench spec: {exc}") from exc
    else:
        spec = PRESETS[preset]
    overrides = {}
    if replications is not None:
        overrides["replications"] = replications
    if seed is not None:
        overrides["seed"] = seed
    if dispersions is not None:
        overrides["dispersions"] = [d.strip() for d in dispersions.split(",")]
    if overrides:
        spec = BenchSpec.from_dict({**spec.to_dict(), **overrides})

    report = run_bench(spec, jobs=_resolve_jobs(jobs))
    os.makedirs(out_dir, exist_ok=True)
    report = {"kind": "bench", **json.loads(report_json(report))}
    out_json = os.path.join(out_dir, "bench_report.json")
    _write_report(report, "bench_report.schema.json", out_json, deterministic)
    written = [out_json]
    if "sweep_summary" in report:
        paths = emit_curves(report, os.path.join(out_dir, "sweep"))
        written += [paths["csv"], paths["svg"]]
    for key, agg in sorted(report["aggregates"].items()):
        rmse = "-" if agg["rmse"] is None else f"{agg['rmse']:.4g}"
        click.echo(f"{key}: rmse={rmse} n_ok={agg['n_ok']} n_failed={agg['n_failed']}")
    click.echo("wrote " + ", ".join(written))


@cli.command()
def check():
    """Verify each dispersion's closed forms against the inversion oracle."""
    grids = {
        Dispersion.VARIANCE: np.linspace(-1, 1, 101),
        Dispersion.NEGATIVE_ENTROPY: np.linspace(-3, 1, 101),
        Dispersion.SMOOTHED_ABSOLUTE_DEVIATION: np.linspace(-2, 2, 101),
    }
    failed = False
    for kind, grid in grids.items():
        spec = DispersionSpec(kind, r=10, n=40)
        rep = check_conjugacy(spec, grid)
        ok = rep.max_discrepancy <= 1e-8
        failed |= not ok
        click.echo(f"{kind.value}: {'PASS' if ok else 'FAIL'} (max discrepancy {rep.max_discrepancy:.3e})")
    if failed:
        raise SolverNotConverged("conjugacy check failed")


def main(argv=None) -> int:
    """Run the CLI and map failures to the exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error:usage: {exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return EXIT_USAGE
    except click.Abort:
        click.echo("error:usage: aborted", err=True)
        return EXIT_USAGE
    except DataError as exc:
        click.echo(f"error:data[{exc.code}]: {exc}", err=True)
        return EXIT_DATA
    except (SolverNotConverged, TuningError, EstimationError) as exc:
        click.echo(f"error:solver: {exc}", err=True)
        return EXIT_SOLVER


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
