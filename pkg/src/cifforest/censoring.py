"""Censoring-distribution models.

Three model kinds share one evaluation interface:

* ``marginal`` -- reverse Kaplan-Meier (censoring treated as the event),
* ``tree`` -- a binary covariate partition split on exponential-model
  deviance for the censoring indicator, one reverse-KM curve per terminal
  node,
* ``lognormal`` -- a closed-form lognormal survivor used as the known
  censoring oracle in simulation studies.

Evaluation conventions for step estimators: ``survivor_at`` returns
P(C >= u | w), the value *before* any jump at u; ``survivor_post`` returns
the post-jump value, which is what belongs in the denominators of the
censoring-martingale sums. All survivor values returned to callers are
floored at ``epsilon``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .data import Dataset
from .errors import ParameterError

DEFAULT_EPSILON = 0.05


@dataclass
class GDiagnostics:
    """Counts survivor evaluations clamped at the truncation floor."""

    evals: int = 0
    clamps: int = 0

    def record(self, raw, epsilon):
        raw = np.asarray(raw)
        self.evals += raw.size
        self.clamps += int(np.count_nonzero(raw < epsilon))


@dataclass(frozen=True)
class HazardCurve:
    """Jump times, hazard increments and product-limit survivor values."""

    jump_times: np.ndarray
    hazard_increments: np.ndarray
    survivor_after: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.jump_times, dtype=float)
        h = np.asarray(self.hazard_increments, dtype=float)
        s = np.asarray(self.survivor_after, dtype=float)
        object.__setattr__(self, "jump_times", u)
        object.__setattr__(self, "hazard_increments", h)
        object.__setattr__(self, "survivor_after", s)
        if not (u.shape == h.shape == s.shape):
            raise ParameterError("hazard curve arrays must share one shape")
        if u.size and not np.all(np.diff(u) > 0):
            raise ParameterError("jump times must be strictly increasing")
        if u.size and (h.min() < 0 or h.max() > 1):
            raise ParameterError("hazard increments must lie in [0, 1]")

    def survivor_left(self, u):
        """Product over jumps strictly before u: P(C >= u)."""
        idx = np.searchsorted(self.jump_times, u, side="left")
        padded = np.concatenate(([1.0], self.survivor_after))
        return padded[idx]

    def survivor_right(self, u):
        """Product over jumps at or before u: P(C > u)."""
        idx = np.searchsorted(self.jump_times, u, side="right")
        padded = np.concatenate(([1.0], self.survivor_after))
        return padded[idx]

    def path(self, horizon: float):
        """All jumps with time <= horizon, as (times, hazards, survivors)."""
        stop = int(np.searchsorted(self.jump_times, horizon, side="right"))
        return (self.jump_times[:stop], self.hazard_increments[:stop],
                self.survivor_after[:stop])


def reverse_km_curve(times, event_type) -> HazardCurve:
    """Product-limit curve for the censoring time.

    Censorings are the events here. At tied follow-up times, true events are
    processed first, so the risk set for a censoring jump excludes subjects
    whose event occurred at the same time.
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(event_type) > 0
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    d_sorted = delta[order]
    uniq, start = np.unique(t_sorted, return_index=True)
    n = times.shape[0]
    counts = np.diff(np.append(start, n))
    events = np.add.reduceat(d_sorted.astype(int), start)
    censorings = counts - events
    at_risk = n - np.concatenate(([0], np.cumsum(counts)[:-1]))
    has_jump = censorings > 0
    risk_after_events = at_risk[has_jump] - events[has_jump]
    hazards = censorings[has_jump] / risk_after_events
    survivors = np.cumprod(1.0 - hazards)
    return HazardCurve(uniq[has_jump], hazards, survivors)


def km_event_curve(times, event_type) -> HazardCurve:
    """Standard product-limit curve for the all-cause event time.

    Here events are the jumps; subjects censored at a tied time remain in
    the risk set for that jump (the usual KM tie convention).
    """
    times = np.asarray(times, dtype=float)
    delta = np.asarray(event_type) > 0
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    d_sorted = delta[order]
    uniq, start = np.unique(t_sorted, return_index=True)
    n = times.shape[0]
    counts = np.diff(np.append(start, n))
    events = np.add.reduceat(d_sorted.astype(int), start)
    at_risk = n - np.concatenate(([0], np.cumsum(counts)[:-1]))
    has_jump = events > 0
    hazards = events[has_jump] / at_risk[has_jump]
    survivors = np.cumprod(1.0 - hazards)
    return HazardCurve(uniq[has_jump], hazards, survivors)


class CensoringModel:
    """Shared evaluation interface; see module docstring for conventions."""

    kind: str
    continuous = False

    def __init__(self, epsilon: float = DEFAULT_EPSILON):
        if not epsilon > 0:
            raise ParameterError("epsilon must be positive")
        self.epsilon = float(epsilon)

    def _curve(self, w) -> HazardCurve:
        raise NotImplementedError

    def _clamp(self, raw, diag: GDiagnostics | None):
        if diag is not None:
            diag.record(raw, self.epsilon)
        return np.maximum(raw, self.epsilon)

    def survivor_at(self, u, w=None, diag: GDiagnostics | None = None):
        """P(C >= u | w), floored at epsilon. Excludes a jump exactly at u."""
        return self._clamp(self._curve(w).survivor_left(u), diag)

    def survivor_post(self, u, w=None, diag: GDiagnostics | None = None):
        """P(C > u | w), floored at epsilon. Includes a jump exactly at u."""
        return self._clamp(self._curve(w).survivor_right(u), diag)

    def hazard_path(self, w, horizon: float, diag: GDiagnostics | None = None):
        """Jumps (times, hazards, floored survivors) up to and including horizon."""
        u, h, s = self._curve(w).path(horizon)
        return u, h, self._clamp(s, diag)

    def to_json(self) -> str:
        raise NotImplementedError(f"{self.kind} censoring models are not serializable")


class MarginalCensoringModel(CensoringModel):
    kind = "marginal"

    def __init__(self, curve: HazardCurve, epsilon: float = DEFAULT_EPSILON):
        super().__init__(epsilon)
        self.curve = curve

    def _curve(self, w):
        return self.curve

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "epsilon": self.epsilon,
            "curve": _curve_dict(self.curve),
        })


class _CensTreeNode:
    __slots__ = ("variable", "threshold", "left", "right", "curve", "count")

    def __init__(self, variable=None, threshold=None, left=None, right=None,
                 curve=None, count=0):
        self.variable = variable
        self.threshold = threshold
        self.left = left
        self.right = right
        self.curve = curve
        self.count = count

    @property
    def is_leaf(self):
        return self.curve is not None


class TreeCensoringModel(CensoringModel):
    kind = "tree"

    def __init__(self, root: _CensTreeNode, epsilon: float = DEFAULT_EPSILON):
        super().__init__(epsilon)
        self.root = root

    def _curve(self, w):
        node = self.root
        while not node.is_leaf:
            node = node.left if w[node.variable] <= node.threshold else node.right
        return node.curve

    def terminal_nodes(self):
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend((node.right, node.left))
        return out

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "epsilon": self.epsilon,
            "tree": _cens_node_dict(self.root),
        })


class LognormalCensoringModel(CensoringModel):
    """Closed-form censoring oracle: log C | w ~ N(log_mean(w), sigma^2).

    Continuous, so the left and right survivor evaluations coincide and
    martingale integrals are computed by quadrature rather than jump sums.
    """

    kind = "lognormal"
    continuous = True

    def __init__(self, log_mean, sigma: float = 1.0, epsilon: float = 1e-12):
        super().__init__(epsilon)
        self.log_mean = log_mean
        self.sigma = float(sigma)

    def _survivor_raw(self, u, w):
        u = np.asarray(u, dtype=float)
        mu = float(self.log_mean(np.asarray(w, dtype=float)))
        with np.errstate(divide="ignore"):
            z = np.where(u > 0, (mu - np.log(np.maximum(u, 1e-300))) / self.sigma, np.inf)
        return ndtr(z)

    def survivor_at(self, u, w=None, diag=None):
        return self._clamp(self._survivor_raw(u, w), diag)

    survivor_post = survivor_at

    def inverse_survivor(self, q, w):
        """The time u with P(C >= u | w) = q."""
        mu = float(self.log_mean(np.asarray(w, dtype=float)))
        return np.exp(mu - self.sigma * ndtri(np.asarray(q, dtype=float)))

    def hazard_path(self, w, horizon, diag=None):
        raise NotImplementedError("continuous censoring model has no jump path")


def fit_reverse_km(data: Dataset, epsilon: float = DEFAULT_EPSILON) -> MarginalCensoringModel:
    """Marginal reverse Kaplan-Meier estimate of the censoring survivor."""
    return MarginalCensoringModel(reverse_km_curve(data.times, data.event_type), epsilon)


def _exp_loglik(n_events, total_time):
    # Profile exponential log likelihood d*log(d/R) - d, with 0 log 0 = 0.
    if n_events <= 0 or total_time <= 0:
        return 0.0
    return n_events * math.log(n_events / total_time) - n_events


def _best_deviance_split(times, censored, covariates, min_node):
    """Exhaustive scan over (variable, midpoint) cutpoints.

    Scores a split by the exponential-model deviance reduction for the
    censoring indicator; ties broken by lower variable then lower threshold.
    """
    n, p = covariates.shape
    parent_ll = _exp_loglik(censored.sum(), times.sum())
    best = None
    for v in range(p):
        x = covariates[:, v]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cum_c = np.cumsum(censored[order])
        cum_t = np.cumsum(times[order])
        # prefix of size k forms the left child; boundaries at distinct values
        ks = np.arange(1, n)
        valid = (xs[ks] > xs[ks - 1]) & (ks >= min_node) & (n - ks >= min_node)
        for k in ks[valid]:
            ll = (_exp_loglik(cum_c[k - 1], cum_t[k - 1])
                  + _exp_loglik(cum_c[-1] - cum_c[k - 1], cum_t[-1] - cum_t[k - 1]))
            gain = 2.0 * (ll - parent_ll)
            if gain > 0 and (best is None or gain > best[0] + 1e-12):
                best = (gain, v, 0.5 * (xs[k - 1] + xs[k]))
    return best


def fit_censoring_tree(data: Dataset, min_node: int = 30,
                       epsilon: float = DEFAULT_EPSILON) -> TreeCensoringModel:
    """Covariate-dependent censoring model: deviance-split survival tree.

    Each terminal node carries a reverse-KM curve fitted on its own records.
    Splitting stops when no admissible split (both children >= min_node)
    reduces the exponential deviance.
    """
    if min_node < 1:
        raise ParameterError("min_node must be at least 1")
    censored = (data.event_type == 0).astype(float)

    def build(rows):
        node = _CensTreeNode(count=rows.size)
        best = None
        if rows.size >= 2 * min_node:
            best = _best_deviance_split(data.times[rows], censored[rows],
                                        data.covariates[rows], min_node)
        if best is None:
            node.curve = reverse_km_curve(data.times[rows], data.event_type[rows])
            return node
        _, node.variable, node.threshold = best
        mask = data.covariates[rows, node.variable] <= node.threshold
        node.left = build(rows[mask])
        node.right = build(rows[~mask])
        return node

    return TreeCensoringModel(build(np.arange(data.n)), epsilon)


def _curve_dict(curve: HazardCurve):
    return {
        "jump_times": [float(v) for v in curve.jump_times],
        "hazard_increments": [float(v) for v in curve.hazard_increments],
        "survivor_after": [float(v) for v in curve.survivor_after],
    }


def _cens_node_dict(node: _CensTreeNode):
    if node.is_leaf:
        return {"count": node.count, "curve": _curve_dict(node.curve)}
    return {
        "variable": node.variable,
        "threshold": node.threshold,
        "left": _cens_node_dict(node.left),
        "right": _cens_node_dict(node.right),
    }


def censoring_model_from_json(text: str) -> CensoringModel:
    payload = json.loads(text)
    eps = payload["epsilon"]
    if payload["kind"] == "marginal":
        return MarginalCensoringModel(_curve_from_dict(payload["curve"]), eps)
    if payload["kind"] == "tree":
        return TreeCensoringModel(_cens_node_from_dict(payload["tree"]), eps)
    raise ParameterError(f"unknown censoring model kind {payload['kind']!r}")


def _curve_from_dict(d) -> HazardCurve:
    return HazardCurve(np.asarray(d["jump_times"]), np.asarray(d["hazard_increments"]),
                       np.asarray(d["survivor_after"]))


def _cens_node_from_dict(d) -> _CensTreeNode:
    if "curve" in d:
        return _CensTreeNode(curve=_curve_from_dict(d["curve"]), count=d["count"])
    return _CensTreeNode(variable=d["variable"], threshold=d["threshold"],
                         left=_cens_node_from_dict(d["left"]),
                         right=_cens_node_from_dict(d["right"]))
