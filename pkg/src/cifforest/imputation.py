"""Imputed regression responses for censored competing-risks data.

Each subject and grid time receives a response H that replaces the
unobservable event indicator Z_m(t) = 1{T <= t, M = m}:

* ``ipcw``  -- the censoring-weighted observed indicator,
* ``bj``    -- Buckley-James: observed indicator for events, conditional
  event probability for censored subjects,
* ``dr``    -- doubly robust: IPCW term plus the censoring-martingale
  augmentation,
* ``dr_xi`` -- the randomized variant replacing the martingale integral by
  a single mean-zero multiple of the censored-subject term.

Trees and forests fit squared-error loss to these responses; minimizing
that imputed loss is equivalent to minimizing the corresponding
censored-data Brier loss, whose direct evaluation is also provided here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .censoring import CensoringModel, GDiagnostics
from .cif_models import CifModel, YDiagnostics
from .data import Dataset, ObservedRecord, TimeGrid
from .errors import ConfigurationError, ParameterError

METHODS = ("ipcw", "bj", "dr", "dr_xi")

# Gauss-Legendre rule for martingale integrals against continuous censoring
# models, applied after substituting s = 1/G(u) (the integrand is then the
# bounded conditional event probability).
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def ipcw_event_term(record: ObservedRecord, t: float, G: CensoringModel, cause: int,
                    g_diag: GDiagnostics | None = None) -> float:
    """Censoring-weighted observed event indicator.

    1{T~ <= t, M = cause} / G(T~- | w) for events, zero for censored rows.
    """
    if record.delta == 0:
        return 0.0
    if not (record.time_tilde <= t and record.event_type == cause):
        return 0.0
    return 1.0 / float(G.survivor_at(record.time_tilde, record.covariates, g_diag))


def _continuous_augmentation_integral(record, t, G, Psi, cause, y_diag):
    """Integral of y against dLambda_G / G for a continuous censoring model.

    Substituting s = 1/G(u) turns the integral over [0, min(T~, t)] into the
    integral of y(G^{-1}(1/s)) over [1, 1/G(min(T~, t))].
    """
    upper = min(record.time_tilde, t)
    if upper <= 0:
        return 0.0
    s_hi = 1.0 / float(G.survivor_at(upper, record.covariates))
    if s_hi <= 1.0:
        return 0.0
    half = 0.5 * (s_hi - 1.0)
    s = 1.0 + half * (_GL_NODES + 1.0)
    u = G.inverse_survivor(1.0 / s, record.covariates)
    y = Psi.event_prob_given_alive(u, t, record.covariates, cause, diag=y_diag)
    return half * float(np.dot(_GL_WEIGHTS, y))


def augmentation_term(record: ObservedRecord, t: float, G: CensoringModel,
                      Psi: CifModel, cause: int,
                      g_diag: GDiagnostics | None = None,
                      y_diag: YDiagnostics | None = None) -> float:
    """Censoring-martingale augmentation of the IPCW term.

    (1 - Delta) y(T~; t, w) / G(T~ | w) minus the integral of
    y(u; t, w) / G(u | w) against the censoring hazard up to T~. Jump-sum
    denominators use post-jump survivor values.
    """
    w = record.covariates
    first = 0.0
    if record.delta == 0:
        y_at_exit = Psi.event_prob_given_alive(record.time_tilde, t, w, cause, diag=y_diag)
        first = float(y_at_exit) / float(G.survivor_post(record.time_tilde, w, g_diag))
    if G.continuous:
        integral = _continuous_augmentation_integral(record, t, G, Psi, cause, y_diag)
    else:
        u, h, g_post = G.hazard_path(w, record.time_tilde, g_diag)
        if u.size == 0:
            integral = 0.0
        else:
            y = Psi.event_prob_given_alive(u, t, w, cause, diag=y_diag)
            integral = float(np.sum(np.asarray(y) * h / g_post))
    return first - integral


def record_mass_terms(record: ObservedRecord, G: CensoringModel,
                      g_diag: GDiagnostics | None = None) -> tuple[float, float]:
    """The event-weight and augmentation-weight pair whose sum telescopes to 1.

    Returns (Delta / G(T~-), (1 - Delta) / G(T~) - sum of h / G over jumps
    up to T~). With an untruncated product-limit model both terms come from
    the same curve and the sum is exactly 1 for tie-free data.
    """
    w = record.covariates
    if G.continuous:
        g = float(G.survivor_at(record.time_tilde, w, g_diag))
        event_w = record.delta / g
        aug_w = (1 - record.delta) / g - (1.0 / g - 1.0)
        return event_w, aug_w
    event_w = 0.0
    if record.delta == 1:
        event_w = 1.0 / float(G.survivor_at(record.time_tilde, w, g_diag))
    aug_w = 0.0
    if record.delta == 0:
        aug_w = 1.0 / float(G.survivor_post(record.time_tilde, w, g_diag))
    _, h, g_post = G.hazard_path(w, record.time_tilde, g_diag)
    if h.size:
        aug_w -= float(np.sum(h / g_post))
    return event_w, aug_w


def imputed_response(record: ObservedRecord, t: float, G: CensoringModel | None,
                     Psi: CifModel | None, cause: int, method: str,
                     xi: float | None = None,
                     g_diag: GDiagnostics | None = None,
                     y_diag: YDiagnostics | None = None) -> float:
    """One H value for one subject at one time; see module docstring."""
    if method not in METHODS:
        raise ParameterError(f"unknown imputation method {method!r}")
    if method == "bj":
        if Psi is None:
            raise ConfigurationError("Buckley-James imputation needs a CIF model")
        if record.delta == 1:
            return float(record.time_tilde <= t and record.event_type == cause)
        return float(Psi.event_prob_given_alive(record.time_tilde, t,
                                                record.covariates, cause, diag=y_diag))
    if G is None:
        raise ConfigurationError(f"method {method!r} needs a censoring model")
    ts1 = ipcw_event_term(record, t, G, cause, g_diag)
    if method == "ipcw":
        return ts1
    if Psi is None:
        raise ConfigurationError(f"method {method!r} needs a CIF model")
    if method == "dr":
        return ts1 + augmentation_term(record, t, G, Psi, cause, g_diag, y_diag)
    # dr_xi: the martingale integral is replaced by xi times the
    # censored-subject term; mean-zero, so the expected loss is unchanged.
    if xi is None:
        raise ParameterError("method 'dr_xi' needs a xi value")
    if record.delta == 1:
        return ts1
    y_at_exit = Psi.event_prob_given_alive(record.time_tilde, t,
                                           record.covariates, cause, diag=y_diag)
    g = float(G.survivor_post(record.time_tilde, record.covariates, g_diag))
    return ts1 + xi * float(y_at_exit) / g


@dataclass
class ImputationDiagnostics:
    """Clamp counts, per-record loss components, and the telescoping residual."""

    g: GDiagnostics = field(default_factory=GDiagnostics)
    y: YDiagnostics = field(default_factory=YDiagnostics)
    ts1: np.ndarray | None = None           # n x J event terms
    ts2: np.ndarray | None = None           # n x J augmentation terms
    mass: np.ndarray | None = None          # n record weights (dr only)
    identity_max_residual: float | None = None  # max |mass - 1| (dr only)

    @property
    def g_clamp_fraction(self) -> float:
        return self.g.clamps / self.g.evals if self.g.evals else 0.0

    @property
    def y_clamp_fraction(self) -> float:
        return self.y.clamps / self.y.evals if self.y.evals else 0.0


@dataclass(frozen=True)
class ImputedMatrix:
    """n x J response matrix plus the grid and build diagnostics."""

    values: np.ndarray
    method: str
    grid: TimeGrid
    diagnostics: ImputationDiagnostics

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("imputed responses must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        """Long-format export: (row, time, method, value, ts1, ts2)."""
        d = self.diagnostics
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "time", "method", "value", "ts1", "ts2"])
            for i in range(self.values.shape[0]):
                for j, t in enumerate(self.grid.times):
                    ts1 = repr(float(d.ts1[i, j])) if d.ts1 is not None else ""
                    ts2 = repr(float(d.ts2[i, j])) if d.ts2 is not None else ""
                    writer.writerow([i, repr(float(t)), self.method,
                                     repr(float(self.values[i, j])), ts1, ts2])


def build_imputed_matrix(data: Dataset, grid: TimeGrid, G: CensoringModel | None,
                         Psi: CifModel | None, cause: int, method: str,
                         xi: np.ndarray | None = None) -> ImputedMatrix:
    """Assemble the full response matrix, one subject per row.

    For ``dr_xi``, ``xi`` must hold one standard-normal draw per subject;
    the draw is shared across all grid times of that subject.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown imputation method {method!r}")
    if method == "dr_xi":
        if xi is None or np.asarray(xi).shape != (data.n,):
            raise ParameterError("dr_xi needs one xi value per subject")
        xi = np.asarray(xi, dtype=float)
    diag = ImputationDiagnostics()
    n, J = data.n, grid.n_times
    values = np.empty((n, J))
    diag.ts1 = np.zeros((n, J))
    diag.ts2 = np.zeros((n, J))
    track_mass = method == "dr"
    if track_mass:
        diag.mass = np.empty(n)
    for i in range(n):
        rec = data.record(i)
        xi_i = float(xi[i]) if method == "dr_xi" else None
        for j, t in enumerate(grid.times):
            h = imputed_response(rec, float(t), G, Psi, cause, method, xi_i,
                                 diag.g, diag.y)
            values[i, j] = h
            if method == "bj":
                diag.ts1[i, j] = h if rec.delta == 1 else 0.0
                diag.ts2[i, j] = h if rec.delta == 0 else 0.0
            else:
                ts1 = ipcw_event_term(rec, float(t), G, cause)
                diag.ts1[i, j] = ts1
                diag.ts2[i, j] = h - ts1
        if track_mass:
            diag.mass[i] = sum(record_mass_terms(rec, G))
    if track_mass:
        diag.identity_max_residual = float(np.max(np.abs(diag.mass - 1.0)))
    return ImputedMatrix(values, method, grid, diag)


def full_data_responses(data: Dataset, grid: TimeGrid, cause: int) -> np.ndarray:
    """Observed event indicators 1{T~ <= t_j, M = cause}; the censoring-free
    responses every method reduces to when all subjects are uncensored."""
    hit = (data.event_type == cause)[:, None]
    return (hit & (data.times[:, None] <= grid.times[None, :])).astype(float)


def imputed_loss(values: np.ndarray, membership: np.ndarray, betas: np.ndarray,
                 weights: np.ndarray) -> float:
    """Weighted squared-error loss of the imputed responses for a fixed
    partition: sum_i sum_j alpha_j (H_ij - beta_{l(i), j})^2."""
    resid = values - betas[membership]
    return float(np.sum(weights[None, :] * resid ** 2))


def direct_dr_loss(matrix: ImputedMatrix, membership: np.ndarray,
                   betas: np.ndarray) -> float:
    """The doubly robust Brier loss evaluated directly from its components.

    sum_i sum_j alpha_j [ H_ij (1 - 2 beta) + beta^2 mass_i ]; differs from
    ``imputed_loss`` by a beta-free constant exactly when every record's
    mass telescopes to 1.
    """
    if matrix.diagnostics.mass is None:
        raise ConfigurationError("direct loss needs a matrix built with method 'dr'")
    beta = betas[membership]
    mass = matrix.diagnostics.mass[:, None]
    per = matrix.values * (1.0 - 2.0 * beta) + beta ** 2 * mass
    return float(np.sum(matrix.grid.weights[None, :] * per))
