"""Observed-data containers, evaluation time grids, and CSV ingestion.

A subject contributes a follow-up time, an any-event indicator, an event
type (0 means censored), and a covariate vector. Datasets store these as
column arrays and are immutable after construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EstimationError, ParameterError, ParseError, SchemaError, ValidationError


@dataclass(frozen=True)
class ObservedRecord:
    """One subject: follow-up time, event indicator, event type, covariates."""

    time_tilde: float
    delta: int
    event_type: int
    covariates: np.ndarray

    def __post_init__(self):
        if not (self.time_tilde > 0 and math.isfinite(self.time_tilde)):
            raise ValidationError(f"follow-up time must be positive and finite, got {self.time_tilde}")
        if (self.event_type == 0) != (self.delta == 0):
            raise ValidationError("event_type must be 0 exactly when delta is 0")
        if self.delta not in (0, 1):
            raise ValidationError(f"delta must be 0 or 1, got {self.delta}")


@dataclass(frozen=True)
class Dataset:
    """Immutable column-array container for n observed subjects."""

    times: np.ndarray
    event_type: np.ndarray
    covariates: np.ndarray
    k_causes: int
    covariate_names: tuple[str, ...] | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        event = np.asarray(self.event_type, dtype=int)
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "event_type", event)
        object.__setattr__(self, "covariates", cov)
        if times.ndim != 1 or times.shape[0] < 1:
            raise ValidationError("need at least one record")
        if not (cov.shape[0] == times.shape[0] == event.shape[0]):
            raise ValidationError("times, event_type and covariates must have matching length")
        bad = np.flatnonzero(~(np.isfinite(times) & (times > 0)))
        if bad.size:
            raise ValidationError(f"non-positive or non-finite time at row {bad[0]}")
        if event.min() < 0 or event.max() > self.k_causes:
            raise ValidationError(f"event types must lie in 0..{self.k_causes}")
        if self.covariate_names is not None and len(self.covariate_names) != cov.shape[1]:
            raise SchemaError("covariate_names length does not match covariate dimension")

    @classmethod
    def from_arrays(cls, times, event_type, covariates, k_causes: int | None = None,
                    covariate_names=None) -> "Dataset":
        event = np.asarray(event_type, dtype=int)
        if k_causes is None:
            k_causes = max(int(event.max(initial=0)), 1)
        names = tuple(covariate_names) if covariate_names is not None else None
        return cls(np.asarray(times, dtype=float), event,
                   np.asarray(covariates, dtype=float), k_causes, names)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return (self.event_type > 0).astype(int)

    def record(self, i: int) -> ObservedRecord:
        return ObservedRecord(float(self.times[i]), int(self.event_type[i] > 0),
                              int(self.event_type[i]), self.covariates[i])

    def __iter__(self):
        return (self.record(i) for i in range(self.n))

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing evaluation times with positive weights summing to 1.

    The diagonal loss matrix entries are n / weight_j; splitting and error
    computations use the normalized weights directly.
    """

    times: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if self.weights is None:
            weights = np.full(times.shape[0], 1.0 / times.shape[0])
        else:
            weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", weights)
        if times.ndim != 1 or times.shape[0] < 1:
            raise ParameterError("grid needs at least one time")
        if not np.all(times > 0) or not np.all(np.diff(times) > 0):
            raise ParameterError("grid times must be positive and strictly increasing")
        if weights.shape != times.shape or not np.all(weights > 0):
            raise ParameterError("grid weights must be positive, one per time")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError(f"grid weights must sum to 1, got {weights.sum()!r}")

    @property
    def n_times(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for dataset CSV files."""

    time_col: str = "time"
    status_col: str = "status"
    covariate_cols: tuple[str, ...] | None = None  # None: every other column
    k_causes: int | None = None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Read a dataset from a headered CSV file.

    The status column holds 0 for censored rows and the cause index
    (1..K) for events; the censoring indicator is derived from it.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    for col in (schema.time_col, schema.status_col):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    if schema.covariate_cols is None:
        cov_cols = [c for c in header if c not in (schema.time_col, schema.status_col)]
    else:
        cov_cols = list(schema.covariate_cols)
        for col in cov_cols:
            if col not in header:
                raise SchemaError(f"{path}: missing covariate column {col!r}")
    idx = {c: header.index(c) for c in header}

    n = len(rows)
    if n == 0:
        raise ValidationError(f"{path}: no data rows")
    times = np.empty(n)
    event = np.empty(n, dtype=int)
    cov = np.empty((n, len(cov_cols)))
    for i, row in enumerate(rows):
        try:
            times[i] = float(row[idx[schema.time_col]])
            status = float(row[idx[schema.status_col]])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: row {i}: cannot parse time/status: {exc}") from None
        if status != int(status) or status < 0:
            raise ValidationError(f"{path}: row {i}: status must be a nonnegative integer")
        event[i] = int(status)
        if not (times[i] > 0 and math.isfinite(times[i])):
            raise ValidationError(f"{path}: row {i}: non-positive time {times[i]}")
        for j, c in enumerate(cov_cols):
            try:
                cov[i, j] = float(row[idx[c]])
            except (ValueError, IndexError):
                raise ParseError(f"{path}: row {i}: non-numeric covariate {c!r}") from None
    return Dataset.from_arrays(times, event, cov, k_causes=schema.k_causes,
                               covariate_names=cov_cols)


def write_csv(data: Dataset, path, schema: CsvSchema = CsvSchema()) -> None:
    """Write a dataset back to CSV with round-trip float precision."""
    names = list(data.covariate_names) if data.covariate_names is not None \
        else [f"w{j + 1}" for j in range(data.p)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.time_col, schema.status_col, *names])
        for i in range(data.n):
            writer.writerow([repr(float(data.times[i])), int(data.event_type[i]),
                             *(repr(float(v)) for v in data.covariates[i])])


def marginal_event_quantiles(data: Dataset, probs) -> np.ndarray:
    """Empirical quantiles of follow-up time among uncensored records.

    Uses the lower order statistic (type-1) convention: the q-th quantile of
    x_(1) <= ... <= x_(k) is x_(ceil(q*k)).
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or probs.size == 0:
        raise ParameterError("probs must be a nonempty 1-d sequence")
    if not np.all((probs > 0) & (probs < 1)):
        raise ParameterError("probs must lie strictly inside (0, 1)")
    if not np.all(np.diff(probs) > 0):
        raise ParameterError("probs must be strictly increasing")
    observed = np.sort(data.times[data.event_type > 0], kind="stable")
    if observed.size == 0:
        raise EstimationError("no uncensored records to take quantiles over")
    ranks = np.ceil(probs * observed.size).astype(int) - 1
    return observed[np.clip(ranks, 0, observed.size - 1)]
