"""Nuisance models for cumulative incidence functions.

A CifModel supplies, for every cause m, the cumulative incidence
psi_m(t | w), its left limit, the all-cause survival P(T >= u | w), and the
conditional probability of experiencing cause m by time t given survival to
time u. The augmentation term of the doubly robust transform consumes only
these evaluations.

Implementations: a marginal Aalen-Johansen estimate, the closed-form
two-cause Fine-Gray family used as the simulation oracle, and a wrapper
around fitted forests for iterated nuisance estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ParameterError

Y_FLOOR = 1e-6


@dataclass
class YDiagnostics:
    """Counts conditional-probability evaluations that needed clamping."""

    evals: int = 0
    clamps: int = 0


class CifModel:
    """Interface: cif, cif_before, survival_before, event_prob_given_alive."""

    k_causes: int

    def cif(self, m: int, t, w):
        """psi_m(t | w); t may be an array."""
        raise NotImplementedError

    def cif_before(self, m: int, t, w):
        """psi_m(t- | w), the left limit at t."""
        raise NotImplementedError

    def survival_before(self, u, w):
        """P(T >= u | w) = 1 - sum_m psi_m(u- | w)."""
        total = 0.0
        for m in range(1, self.k_causes + 1):
            total = total + self.cif_before(m, u, w)
        return 1.0 - total

    def event_prob_given_alive(self, u, t, w, m: int, floor: float = Y_FLOOR,
                               diag: YDiagnostics | None = None):
        """P(event of cause m by t | alive at u, w); zero when u > t.

        Computed as (psi_m(t|w) - psi_m(u-|w)) / P(T >= u|w), with the
        denominator floored and the result clamped into [0, 1].
        """
        u = np.asarray(u, dtype=float)
        t = np.asarray(t, dtype=float)
        numer = self.cif(m, t, w) - self.cif_before(m, u, w)
        denom = self.survival_before(u, w)
        raw = numer / np.maximum(denom, floor)
        out = np.where(u > t, 0.0, np.clip(raw, 0.0, 1.0))
        if diag is not None:
            diag.evals += max(u.size, np.asarray(t).size)
            active = ~(u > t)
            clamped = active & ((np.asarray(denom) < floor) | (raw < 0) | (raw > 1))
            diag.clamps += int(np.count_nonzero(clamped))
        if out.ndim == 0:
            return float(out)
        return out


class AalenJohansenCif(CifModel):
    """Marginal Aalen-Johansen CIFs with the matching Kaplan-Meier survival."""

    def __init__(self, event_times, cif_steps, survival_steps, k_causes):
        self.event_times = np.asarray(event_times, dtype=float)
        self.cif_steps = {m: np.asarray(v, dtype=float) for m, v in cif_steps.items()}
        self.survival_steps = np.asarray(survival_steps, dtype=float)
        self.k_causes = k_causes

    def _step(self, values, t, side, start):
        idx = np.searchsorted(self.event_times, t, side=side)
        padded = np.concatenate(([start], values))
        return padded[idx]

    def cif(self, m, t, w=None):
        return self._step(self.cif_steps[m], t, "right", 0.0)

    def cif_before(self, m, t, w=None):
        return self._step(self.cif_steps[m], t, "left", 0.0)

    def survival_before(self, u, w=None):
        return self._step(self.survival_steps, u, "left", 1.0)


def fit_aalen_johansen(data: Dataset) -> AalenJohansenCif:
    """Marginal Aalen-Johansen estimate, covariates ignored."""
    order = np.argsort(data.times, kind="stable")
    t_sorted = data.times[order]
    e_sorted = data.event_type[order]
    uniq, start = np.unique(t_sorted, return_index=True)
    counts = np.diff(np.append(start, data.n))
    at_risk = data.n - np.concatenate(([0], np.cumsum(counts)[:-1]))

    surv = np.empty(uniq.size)
    cif = {m: np.zeros(uniq.size) for m in range(1, data.k_causes + 1)}
    s_prev = 1.0
    acc = {m: 0.0 for m in cif}
    for k in range(uniq.size):
        block = slice(start[k], start[k] + counts[k])
        d_all = int(np.count_nonzero(e_sorted[block] > 0))
        for m in cif:
            d_m = int(np.count_nonzero(e_sorted[block] == m))
            if d_m:
                acc[m] += s_prev * d_m / at_risk[k]
            cif[m][k] = acc[m]
        s_prev *= 1.0 - d_all / at_risk[k]
        surv[k] = s_prev
    return AalenJohansenCif(uniq, cif, surv, data.k_causes)


@dataclass(frozen=True)
class FineGrayParams:
    """Mass parameter and regression coefficients of the two-cause family."""

    p: float
    beta1: np.ndarray
    beta2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta1", np.asarray(self.beta1, dtype=float))
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float))
        if not (0.0 < self.p < 1.0):
            raise ParameterError(f"mass parameter p must lie in (0, 1), got {self.p}")
        if self.beta1.shape != (6,) or self.beta2.shape != (6,):
            raise ParameterError("beta1 and beta2 must each have 6 coefficients")


# Coefficients from the simulation design; the mass parameter is calibrated
# so the full pipeline reproduces the reported ~28.1% censoring rate.
DEFAULT_FG_PARAMS = FineGrayParams(
    p=0.5,
    beta1=np.array([0.5, 0.5, 0.5, 0.5, 0.6, -0.3]),
    beta2=np.array([0.0, -0.5, -0.5, -0.5, 0.5, 0.1]),
)


def fg_transform(w) -> np.ndarray:
    """Nonlinear feature map feeding both regression indices.

    Maps a covariate vector (length >= 15) to
    (sin(pi w1 w2), w3^2, w10, 1{w11 > 0}, w12, exp(w15)).
    """
    w = np.asarray(w, dtype=float)
    squeeze = w.ndim == 1
    w = np.atleast_2d(w)
    if w.shape[1] < 15:
        raise ParameterError("need at least 15 covariates for the regression transform")
    z = np.column_stack([
        np.sin(np.pi * w[:, 0] * w[:, 1]),
        w[:, 2] ** 2,
        w[:, 9],
        (w[:, 10] > 0).astype(float),
        w[:, 11],
        np.exp(w[:, 14]),
    ])
    return z[0] if squeeze else z


class FineGrayCif(CifModel):
    """Closed-form two-cause CIFs.

    psi_1(t|w) = 1 - (1 - p(1 - e^{-t}))^{eta1}
    psi_2(t|w) = (1 - p)^{eta1} (1 - e^{-t eta2})
    with eta_r = exp(beta_r . z(w)). Continuous, so left limits equal values.
    """

    k_causes = 2

    def __init__(self, params: FineGrayParams = DEFAULT_FG_PARAMS):
        self.params = params

    def linear_predictors(self, w):
        z = fg_transform(w)
        return np.exp(z @ self.params.beta1), np.exp(z @ self.params.beta2)

    def cause1_mass(self, w):
        """pi_1(w) = P(M = 1 | w), the t -> infinity limit of psi_1."""
        eta1, _ = self.linear_predictors(w)
        return 1.0 - (1.0 - self.params.p) ** eta1

    def cif(self, m, t, w):
        t = np.asarray(t, dtype=float)
        eta1, eta2 = self.linear_predictors(w)
        if m == 1:
            return 1.0 - (1.0 - self.params.p * (1.0 - np.exp(-t))) ** eta1
        if m == 2:
            return (1.0 - self.params.p) ** eta1 * (1.0 - np.exp(-t * eta2))
        raise ParameterError(f"cause must be 1 or 2, got {m}")

    cif_before = cif


def parametric_fg_cif(params: FineGrayParams, m: int, t, w):
    """Closed-form CIF of the two-cause family at (t, w) for cause m."""
    return FineGrayCif(params).cif(m, t, w)


class ForestCif(CifModel):
    """CIFs read off fitted per-cause forests, with KM all-cause survival.

    Forest predictions live on the fitted time grid and are extended by
    right-continuous steps. Per-cause values are clipped to [0, 1] and
    jointly rescaled if their sum exceeds 1.
    """

    def __init__(self, grid_times, predictors, survival_curve, k_causes=None):
        self.grid_times = np.asarray(grid_times, dtype=float)
        self.predictors = dict(predictors)
        self.survival_curve = survival_curve  # HazardCurve over the event time
        self.k_causes = k_causes if k_causes is not None else max(self.predictors)
        self._cache: dict[bytes, dict[int, np.ndarray]] = {}

    def _predictions(self, w):
        key = np.asarray(w, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            preds = {m: np.clip(np.asarray(fn(w), dtype=float), 0.0, 1.0)
                     for m, fn in self.predictors.items()}
            total = np.sum(list(preds.values()), axis=0)
            over = total > 1.0
            if np.any(over):
                scale = np.where(over, 1.0 / total, 1.0)
                preds = {m: v * scale for m, v in preds.items()}
            hit = self._cache[key] = preds
        return hit

    def _step(self, values, t, side):
        idx = np.searchsorted(self.grid_times, t, side=side)
        padded = np.concatenate(([0.0], values))
        return padded[idx]

    def cif(self, m, t, w):
        if m not in self.predictors:
            return np.zeros_like(np.asarray(t, dtype=float))
        return self._step(self._predictions(w)[m], t, "right")

    def cif_before(self, m, t, w):
        if m not in self.predictors:
            return np.zeros_like(np.asarray(t, dtype=float))
        return self._step(self._predictions(w)[m], t, "left")

    def survival_before(self, u, w=None):
        return self.survival_curve.survivor_left(u)
