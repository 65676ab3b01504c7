"""Seeded benchmark data generators and CSV ingestion.

Two classic benchmark designs ship, both driven by latent standard
normal draws that are transformed into skewed observed covariates:

Kang-Schafer (missing outcome):
    ``U ~ N(0, I_4)``;  observed covariates
    ``x1 = exp(U1/2)``, ``x2 = U2/(1+exp(U1)) + 10``,
    ``x3 = (U1*U3/25 + 0.6)**3``, ``x4 = (U2+U4+20)**2``;
    outcome ``y = 210 + 27.4*U1 + 13.7*(U2+U3+U4) + N(0,1)``, observed
    only where the response indicator is 1.  Response is Bernoulli with
    logistic probability ``expit(-U1 - c2*U2 - 0.25*U3 - 0.1*U4)``,
    where ``c2 = 0.5`` under good overlap and ``c2 = 2`` under bad
    overlap.  The population outcome mean is 210 exactly.

Wong-Chan (treatment):
    ``V ~ N(0, I_10)``; the first four observed covariates reuse the
    transformations above (with ``V`` in place of ``U``, and ``x2``
    without the +10 shift), ``x5..x10 = V5..V10``; treatment is
    Bernoulli with probability ``expit(-V1 - 0.1*V4)``.  Outcome model A
    is ``y = 210 + (1.5*T - 0.5)*(27.4*V1 + 13.7*(V2+V3+V4)) + N(0,1)``;
    model B is ``y = V1*V2**3*V3**2*V4 + V4*|V1|**0.5 + N(0,1)``
    (no treatment term).  Both potential outcomes are stored so sample
    effects can be evaluated exactly.

All draws flow through one generator per dataset in a fixed order
(latents, outcome noise, assignment uniforms), with normals produced by
CDF inversion, so a seed pins the dataset bytes exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from minbal import rng as _rng


class DataError(Exception):
    """Ingestion failure with a machine-readable ``code``."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Truth:
    """Generator-side ground truth carried alongside a dataset."""

    pi: np.ndarray | None = None
    mean: float | None = None
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    latent: np.ndarray | None = None


@dataclass(frozen=True)
class Dataset:
    """Covariates, a 0/1 indicator, and (possibly missing) outcomes.

    In missing-outcome data ``y`` is NaN exactly where ``z == 0``.  A
    dataset loaded without an outcome column has ``y is None`` and
    supports weights-only workflows.
    """

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray | None
    names: tuple[str, ...]
    truth: Truth | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z)
        if x.ndim != 2:
            raise ValueError("x must be 2-D")
        if z.shape != (x.shape[0],) or not np.isin(z, (0, 1)).all():
            raise ValueError("z must be a 0/1 vector matching x rows")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z.astype(np.int8))
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            if y.shape != (x.shape[0],):
                raise ValueError("y length must match x rows")
            object.__setattr__(self, "y", y)
        if len(self.names) != x.shape[1]:
            raise ValueError("names must match covariate count")
        if self.truth is not None and self.truth.pi is not None:
            pi = np.asarray(self.truth.pi)
            if np.any(pi <= 0) or np.any(pi >= 1):
                raise ValueError("true propensities must lie strictly in (0, 1)")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def outcome_free(self) -> bool:
        return self.y is None


_KS_COEFS = {"good": np.array([-1.0, -0.5, -0.25, -0.1]), "bad": np.array([-1.0, -2.0, -0.25, -0.1])}


def _ks_transform(u: np.ndarray, shift_x2: float) -> np.ndarray:
    return np.column_stack(
        [
            np.exp(u[:, 0] / 2.0),
            u[:, 1] / (1.0 + np.exp(u[:, 0])) + shift_x2,
            (u[:, 0] * u[:, 2] / 25.0 + 0.6) ** 3,
            (u[:, 1] + u[:, 3] + 20.0) ** 2,
        ]
    )


def gen_kang_schafer(n: int, overlap: str = "good", seed: int = 0) -> Dataset:
    """Missing-outcome benchmark dataset of size ``n`` (see module doc)."""
    if n < 2:
        raise ValueError("need n >= 2")
    if overlap not in _KS_COEFS:
        raise ValueError(f"overlap must be 'good' or 'bad', got {overlap!r}")
    gen = _rng.substream(seed)
    u = _rng.standard_normal(gen, (n, 4))
    noise = _rng.standard_normal(gen, n)
    assign = gen.random(n)

    x = _ks_transform(u, shift_x2=10.0)
    y = 210.0 + u @ np.array([27.4, 13.7, 13.7, 13.7]) + noise
    pi = expit(u @ _KS_COEFS[overlap])
    z = (assign < pi).astype(np.int8)
    y_obs = np.where(z == 1, y, np.nan)
    return Dataset(
        x=x,
        z=z,
        y=y_obs,
        names=("x1", "x2", "x3", "x4"),
        truth=Truth(pi=pi, mean=210.0, latent=u),
    )


def gen_wong_chan(n: int, outcome_model: str = "A", seed: int = 0) -> Dataset:
    """Treatment benchmark dataset of size ``n`` (see module doc)."""
    if n < 2:
        raise ValueError("need n >= 2")
    if outcome_model not in ("A", "B"):
        raise ValueError(f"outcome_model must be 'A' or 'B', got {outcome_model!r}")
    gen = _rng.substream(seed)
    v = _rng.standard_normal(gen, (n, 10))
    noise = _rng.standard_normal(gen, n)
    assign = gen.random(n)

    x = np.column_stack([_ks_transform(v[:, :4], shift_x2=0.0), v[:, 4:]])
    pi = expit(-v[:, 0] - 0.1 * v[:, 3])
    t = (assign < pi).astype(np.int8)
    if outcome_model == "A":
        lin = 27.4 * v[:, 0] + 13.7 * (v[:, 1] + v[:, 2] + v[:, 3])
        y0 = 210.0 - 0.5 * lin + noise
        y1 = 210.0 + 1.0 * lin + noise
    else:
        base = v[:, 0] * v[:, 1] ** 3 * v[:, 2] ** 2 * v[:, 3] + v[:, 3] * np.abs(v[:, 0]) ** 0.5
        y0 = base + noise
        y1 = base + noise
    y = np.where(t == 1, y1, y0)
    return Dataset(
        x=x,
        z=t,
        y=y,
        names=tuple(f"x{j + 1}" for j in range(10)),
        truth=Truth(pi=pi, y0=y0, y1=y1, latent=v),
    )


def load_csv(
    path,
    z_column: str,
    covariate_columns: list[str] | None = None,
    y_column: str | None = None,
) -> Dataset:
    """Load a dataset from a headered, comma-separated, UTF-8 file.

    ``covariate_columns`` defaults to every column other than the
    indicator and outcome.  The indicator must parse to 0/1.  Outcome
    cells may be empty only on rows with ``z == 0`` (missing-outcome
    data).  Rows with non-finite covariates are rejected.

    Raises:
        DataError: with ``code`` in ``{"empty", "missing-column",
            "parse", "non-finite"}``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError("missing-file", f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError("empty", f"{path} is empty")
    header = rows[0]
    body = rows[1:]
    if not body:
        raise DataError("empty", f"{path} has a header but no data rows")

    index = {name: i for i, name in enumerate(header)}
    if z_column not in index:
        raise DataError("missing-column", f"indicator column {z_column!r} not in header {header}")
    if y_column is not None and y_column not in index:
        raise DataError("missing-column", f"outcome column {y_column!r} not in header {header}")
    if covariate_columns is None:
        covariate_columns = [c for c in header if c not in (z_column, y_column)]
    missing = [c for c in covariate_columns if c not in index]
    if missing:
        raise DataError("missing-column", f"covariate columns {missing} not in header {header}")
    if not covariate_columns:
        raise DataError("missing-column", "no covariate columns")

    n = len(body)
    x = np.empty((n, len(covariate_columns)))
    z = np.empty(n, dtype=np.int8)
    y = np.empty(n) if y_column is not None else None
    for i, row in enumerate(body):
        rownum = i + 2  # 1-based, counting the header
        if len(row) != len(header):
            raise DataError("parse", f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        cell = row[index[z_column]].strip()
        if cell not in ("0", "1"):
            raise DataError("parse", f"row {rownum}: indicator must be 0 or 1, got {cell!r}")
        z[i] = int(cell)
        for j, c in enumerate(covariate_columns):
            try:
                x[i, j] = float(row[index[c]])
            except ValueError as exc:
                raise DataError(
                    "parse", f"row {rownum}: covariate {c!r} is not numeric: {row[index[c]]!r}"
                ) from exc
        if not np.all(np.isfinite(x[i])):
            raise DataError("non-finite", f"row {rownum}: non-finite covariate value")
        if y is not None:
            cell = row[index[y_column]].strip()
            if cell == "":
                if z[i] == 1:
                    raise DataError("parse", f"row {rownum}: missing outcome on a respondent")
                y[i] = np.nan
            else:
                try:
                    y[i] = float(cell)
                except ValueError as exc:
                    raise DataError("parse", f"row {rownum}: outcome is not numeric: {cell!r}") from exc
    return Dataset(x=x, z=z, y=y, names=tuple(covariate_columns))


def write_csv(dataset: Dataset, path) -> None:
    """Write a dataset so that :func:`load_csv` round-trips it exactly.

    Floats are rendered with ``repr`` (shortest round-trip form); missing
    outcomes become empty cells.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(dataset.names) + ["z"]
        if dataset.y is not None:
            header.append("y")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.x[i]] + [str(int(dataset.z[i]))]
            if dataset.y is not None:
                yi = dataset.y[i]
                row.append("" if np.isnan(yi) else repr(float(yi)))
            writer.writerow(row)
