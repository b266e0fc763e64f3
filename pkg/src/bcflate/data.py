"""Datasets: CSV ingestion, covariate scaling and observed-data summaries."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
ORDERED = "ordered"
KINDS = (CONTINUOUS, CATEGORICAL, ORDERED)
MAX_LEVELS = 62
MISSING_LEVEL = "<missing>"


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, msg, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.row = row
        self.column = column


class NoncomplianceViolation(DataError):
    """A control subject (a=0) recorded as having received treatment."""


class DegenerateColumnError(DataError):
    pass


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = CONTINUOUS
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown covariate kind {self.kind!r}")
        if self.kind != CONTINUOUS:
            if not self.levels or len(self.levels) < 2:
                raise ValueError(f"covariate {self.name!r} needs at least two declared levels")
            if len(self.levels) > MAX_LEVELS:
                raise ValueError(f"covariate {self.name!r} has more than {MAX_LEVELS} levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class SchemaSpec:
    """Column roles for a CSV file."""

    assignment: str
    receipt: str
    outcome: str
    covariates: tuple[CovariateSpec, ...]
    # what to do with an empty covariate cell: "error", "level" (categoricals
    # gain an explicit missing level) or "drop" (row removed)
    missing_covariates: str = "error"

    def __post_init__(self):
        if self.missing_covariates not in ("error", "level", "drop"):
            raise ValueError(f"missing_covariates must be error|level|drop, got {self.missing_covariates!r}")


def scale_covariate(raw):
    """Min-max scale a vector onto [0, 1]; returns ``(scaled, (min, max))``."""
    raw = np.asarray(raw, dtype=float)
    lo, hi = float(np.min(raw)), float(np.max(raw))
    if not hi > lo:
        raise DegenerateColumnError("cannot scale a constant column")
    scaled = (raw - lo) / (hi - lo)
    return np.clip(scaled, 0.0, 1.0), (lo, hi)


def unscale_covariate(scaled, params):
    lo, hi = params
    return lo + np.asarray(scaled, dtype=float) * (hi - lo)


@dataclass(frozen=True)
class Dataset:
    """Immutable analysis dataset.

    ``X`` holds model-scale covariates: continuous and ordered columns lie in
    [0, 1]; categorical columns hold integer level indices.  ``raw`` keeps the
    original values (level indices for categoricals).  Outcomes use -1 for
    missing.
    """

    X: np.ndarray
    raw: np.ndarray
    a: np.ndarray
    r: np.ndarray
    y: np.ndarray
    covariates: tuple[CovariateSpec, ...]
    scale_params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.X.shape[0]
        for arr in (self.raw, self.a, self.r, self.y):
            if arr.shape[0] != n:
                raise DataError("array lengths disagree")
        if np.any((self.a == 0) & (self.r == 1)):
            raise NoncomplianceViolation("a=0 with r=1 violates one-sided noncompliance")
        for arr in (self.X, self.raw, self.a, self.r, self.y):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, raw_X, a, r, y, covariates: Sequence[CovariateSpec] | None = None,
                    names: Sequence[str] | None = None) -> "Dataset":
        """Build a dataset from raw covariates (continuous unless declared)."""
        raw_X = np.atleast_2d(np.asarray(raw_X, dtype=float))
        if raw_X.shape[0] != len(a) and raw_X.shape[1] == len(a):
            raw_X = raw_X.T
        n, p = raw_X.shape
        if covariates is None:
            names = names or [f"x{j + 1}" for j in range(p)]
            covariates = [CovariateSpec(nm) for nm in names]
        y = np.asarray(y)
        y = np.where(np.isnan(y.astype(float)), -1, y).astype(np.int8) if y.dtype.kind == "f" \
            else y.astype(np.int8)
        return _assemble(raw_X, np.asarray(a, dtype=np.int8), np.asarray(r, dtype=np.int8), y,
                         list(covariates))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.covariates]

    @property
    def is_cat(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.covariates], dtype=np.bool_)

    @property
    def n_levels(self) -> np.ndarray:
        return np.array([len(c.levels) if c.is_categorical else 0 for c in self.covariates],
                        dtype=np.int64)

    @property
    def has_outcome(self) -> np.ndarray:
        return self.y >= 0

    @property
    def c_obs(self) -> np.ndarray:
        """Observed compliance: r for treated subjects, -1 (unknown) for controls."""
        return np.where(self.a == 1, self.r, -1).astype(np.int8)

    def scale_rows(self, raw_rows) -> np.ndarray:
        """Map raw covariate rows onto the model scale used by ``X``."""
        raw_rows = np.atleast_2d(np.asarray(raw_rows, dtype=float))
        out = raw_rows.copy()
        for j, cov in enumerate(self.covariates):
            if cov.kind == CONTINUOUS:
                lo, hi = self.scale_params[cov.name]
                out[:, j] = np.clip((raw_rows[:, j] - lo) / (hi - lo), 0.0, 1.0)
            elif cov.kind == ORDERED:
                out[:, j] = raw_rows[:, j] / (len(cov.levels) - 1)
        return out

    def save_scale_params(self, path) -> None:
        meta = {
            "covariates": [
                {"name": c.name, "kind": c.kind, "levels": list(c.levels) if c.levels else None}
                for c in self.covariates
            ],
            "scale_params": {k: list(v) for k, v in self.scale_params.items()},
        }
        Path(path).write_text(json.dumps(meta, indent=2))


def _assemble(raw_X, a, r, y, covariates: list[CovariateSpec]) -> Dataset:
    keep_cols, X_cols, params = [], [], {}
    for j, cov in enumerate(covariates):
        col = raw_X[:, j]
        if cov.kind == CONTINUOUS:
            try:
                scaled, prm = scale_covariate(col)
            except DegenerateColumnError:
                log.warning("dropping constant continuous covariate %r", cov.name)
                continue
            params[cov.name] = prm
            X_cols.append(scaled)
        elif cov.kind == ORDERED:
            X_cols.append(col / (len(cov.levels) - 1))
        else:
            if np.any(col >= len(cov.levels)) or np.any(col < 0):
                raise DataError(f"level index out of range for {cov.name!r}")
            X_cols.append(col.copy())
        keep_cols.append(j)
    n = raw_X.shape[0]
    X = np.column_stack(X_cols) if X_cols else np.zeros((n, 0))
    raw = raw_X[:, keep_cols] if keep_cols else np.zeros((n, 0))
    covs = tuple(covariates[j] for j in keep_cols)
    return Dataset(np.ascontiguousarray(X, dtype=np.float64), np.ascontiguousarray(raw), a, r, y,
                   covs, params)


def _parse_binary(cell, row, column, allow_missing):
    cell = cell.strip()
    if cell == "":
        if allow_missing:
            return -1
        raise ParseError("missing value", row, column)
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"cannot parse {cell!r} as 0/1", row, column) from None
    if v not in (0.0, 1.0):
        raise ParseError(f"expected 0/1, got {cell!r}", row, column)
    return int(v)


def _level_key(cell: str) -> str:
    # "1.0" and "1" name the same level
    try:
        v = float(cell)
    except ValueError:
        return cell
    return str(int(v)) if v.is_integer() else cell


def load_csv(path, schema: SchemaSpec) -> Dataset:
    """Read a CSV with a header row into a :class:`Dataset`."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.assignment, schema.receipt, schema.outcome] + [c.name for c in schema.covariates]
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"columns missing from {path.name}: {', '.join(missing)}")

        covs = list(schema.covariates)
        if schema.missing_covariates == "level":
            covs = [
                CovariateSpec(c.name, c.kind, tuple(c.levels) + (MISSING_LEVEL,))
                if c.kind == CATEGORICAL else c
                for c in covs
            ]
        lookups = [
            {_level_key(lv): i for i, lv in enumerate(c.levels)} if c.kind != CONTINUOUS else None
            for c in covs
        ]

        rows_x, rows_a, rows_r, rows_y = [], [], [], []
        dropped = 0
        for lineno, rec in enumerate(reader, start=2):
            a = _parse_binary(rec[schema.assignment], lineno, schema.assignment, False)
            r = _parse_binary(rec[schema.receipt], lineno, schema.receipt, False)
            y = _parse_binary(rec[schema.outcome], lineno, schema.outcome, True)
            if a == 0 and r == 1:
                raise NoncomplianceViolation(
                    f"row {lineno}: a=0 with r=1 violates one-sided noncompliance")
            xs = []
            skip = False
            for cov, lut in zip(covs, lookups):
                cell = (rec[cov.name] or "").strip()
                if cell == "":
                    if schema.missing_covariates == "drop":
                        skip = True
                        break
                    if schema.missing_covariates == "level" and cov.kind == CATEGORICAL:
                        xs.append(float(len(cov.levels) - 1))
                        continue
                    raise ParseError("missing covariate value", lineno, cov.name)
                if lut is None:
                    try:
                        xs.append(float(cell))
                    except ValueError:
                        raise ParseError(f"cannot parse {cell!r} as a number", lineno, cov.name) from None
                else:
                    key = _level_key(cell)
                    if key not in lut:
                        raise ParseError(f"undeclared level {cell!r}", lineno, cov.name)
                    xs.append(float(lut[key]))
            if skip:
                dropped += 1
                continue
            rows_x.append(xs)
            rows_a.append(a)
            rows_r.append(r)
            rows_y.append(y)
    if dropped:
        log.warning("dropped %d rows with missing covariates", dropped)
    if schema.missing_covariates == "level":
        # keep the extra level only where it is actually used
        raw = np.array(rows_x, dtype=float).reshape(len(rows_x), len(covs))
        for j, c in enumerate(covs):
            if c.kind == CATEGORICAL and not np.any(raw[:, j] == len(c.levels) - 1):
                covs[j] = schema.covariates[j]
        rows_x = raw
    raw_X = np.array(rows_x, dtype=float).reshape(len(rows_a), len(covs))
    return _assemble(raw_X, np.array(rows_a, dtype=np.int8), np.array(rows_r, dtype=np.int8),
                     np.array(rows_y, dtype=np.int8), covs)


def clamp_rate(rate: float, n: int) -> float:
    """Pull a 0/1 rate inside [1/(n+2), 1 - 1/(n+2)] so its probit is finite."""
    eps = 1.0 / (n + 2)
    return float(min(max(rate, eps), 1.0 - eps))


def observed_rates(ds: Dataset) -> tuple[float, float]:
    """Mean observed outcome and observed compliance rate among the treated."""
    treated = ds.a == 1
    if not np.any(treated):
        raise DataError("no treated subjects: compliance rate undefined")
    obs = ds.has_outcome
    if not np.any(obs):
        raise DataError("no non-missing outcomes")
    return float(ds.y[obs].mean()), float(ds.r[treated].mean())
