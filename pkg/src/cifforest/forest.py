"""Bootstrap ensembles over imputed responses.

Two fitting algorithms:

* ``fit_forest`` imputes the response matrix once and bags unpruned trees
  over bootstrap resamples (methods ipcw / bj / dr).
* ``fit_randomized_forest`` repeats the randomized doubly-robust imputation
  R times, fits a B-tree ensemble per replicate, and averages all R*B trees
  with equal weights.

All randomness derives from the caller's seed: replicate r, tree b uses the
entropy tuple (seed, r, b, *) and the per-replicate noise draws use
(seed, 0, r), so fits are reproducible and independent of scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .censoring import CensoringModel, km_event_curve
from .cif_models import CifModel, ForestCif, fit_aalen_johansen
from .data import Dataset, TimeGrid
from .errors import ConfigurationError, EstimationError, ParameterError
from .imputation import ImputedMatrix, build_imputed_matrix
from .tree import TreeModel, grow_tree, _as_entropy


@dataclass
class ForestModel:
    """Equal-weight ensemble of trees on one grid for one cause."""

    trees: list
    grid: TimeGrid
    cause: int
    method: str
    in_bag: np.ndarray                 # trees x n resample counts
    train_covariates: np.ndarray | None
    meta: dict = field(default_factory=dict)

    def predict(self, w, clamp: bool = True) -> np.ndarray:
        """Mean of per-tree predictions; optionally clipped into [0, 1].

        Accepts a single covariate vector or a matrix of rows.
        """
        w = np.asarray(w, dtype=float)
        single = w.ndim == 1
        W = np.atleast_2d(w)
        out = np.zeros((W.shape[0], self.grid.n_times))
        for tree in self.trees:
            out += tree.predict_batch(W)
        out /= len(self.trees)
        if clamp:
            out = np.clip(out, 0.0, 1.0)
        return out[0] if single else out


def predict_forest(model: ForestModel, w, clamp: bool = True) -> np.ndarray:
    return model.predict(w, clamp=clamp)


def default_mtry(p: int) -> int:
    return max(1, int(np.floor(np.sqrt(p))))


def _fit_ensemble(responses, covariates, grid, n_trees, nodesize, mtry,
                  entropy: tuple, bootstrap: bool):
    n = responses.shape[0]
    trees, in_bag = [], np.empty((n_trees, n), dtype=np.int32)
    for b in range(1, n_trees + 1):
        if bootstrap:
            rng = np.random.default_rng(np.random.SeedSequence(entropy + (b, 0)))
            idx = rng.integers(0, n, size=n)
        else:
            idx = np.arange(n)
        in_bag[b - 1] = np.bincount(idx, minlength=n)
        trees.append(grow_tree(responses[idx], covariates[idx], grid,
                               nodesize, mtry, entropy + (b, 1)))
    return trees, in_bag


def fit_response_forest(responses, covariates, grid: TimeGrid, n_trees: int = 500,
                        nodesize: int = 20, mtry: int | None = None, seed=0,
                        bootstrap: bool = True, cause: int = 0,
                        method: str = "direct") -> ForestModel:
    """Bag trees directly on a given response matrix (no imputation step)."""
    responses = np.asarray(responses, dtype=float)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if n_trees < 1:
        raise ParameterError("need at least one tree")
    if mtry is None:
        mtry = default_mtry(covariates.shape[1])
    entropy = _as_entropy(seed)
    trees, in_bag = _fit_ensemble(responses, covariates, grid, n_trees,
                                  nodesize, mtry, entropy + (1,), bootstrap)
    meta = {"n_trees": n_trees, "n_replicates": 1, "nodesize": nodesize,
            "mtry": mtry, "seed": list(entropy), "nuisance": None,
            "bootstrap": bootstrap}
    return ForestModel(trees, grid, cause, method, in_bag, covariates, meta)


def fit_forest(data: Dataset, grid: TimeGrid, cause: int, method: str,
               G: CensoringModel | None = None, Psi: CifModel | None = None,
               n_trees: int = 500, nodesize: int = 20, mtry: int | None = None,
               seed=0, bootstrap: bool = True,
               nuisance_label: str | None = None) -> ForestModel:
    """Impute once, then bag unpruned trees over bootstrap resamples."""
    if method not in ("ipcw", "bj", "dr"):
        raise ParameterError(f"fit_forest handles ipcw/bj/dr, got {method!r}")
    matrix = build_imputed_matrix(data, grid, G, Psi, cause, method)
    model = fit_response_forest(matrix.values, data.covariates, grid, n_trees,
                                nodesize, mtry, seed, bootstrap, cause, method)
    model.meta["nuisance"] = nuisance_label
    model.meta["imputation_diagnostics"] = _diag_summary(matrix)
    return model


def fit_randomized_forest(data: Dataset, grid: TimeGrid, cause: int,
                          G: CensoringModel, Psi: CifModel,
                          n_replicates: int = 1, n_trees: int = 500,
                          nodesize: int = 20, mtry: int | None = None, seed=0,
                          xi_override: np.ndarray | None = None,
                          nuisance_label: str | None = None) -> ForestModel:
    """Randomized doubly-robust ensembles, averaged over R noise replicates.

    Per replicate r, one standard-normal draw per subject multiplies the
    censored-subject augmentation term, and a fresh B-tree bootstrap
    ensemble is fitted to the resulting responses. ``xi_override`` (an
    (R, n) or (n,) array) replaces the draws for testing.
    """
    if n_replicates < 1 or n_trees < 1:
        raise ParameterError("need at least one replicate and one tree")
    if G is None or Psi is None:
        raise ConfigurationError("randomized doubly-robust fits need G and Psi")
    if mtry is None:
        mtry = default_mtry(data.p)
    entropy = _as_entropy(seed)
    if xi_override is not None:
        xi_override = np.atleast_2d(np.asarray(xi_override, dtype=float))
        if xi_override.shape not in ((1, data.n), (n_replicates, data.n)):
            raise ParameterError("xi_override must have shape (n,) or (R, n)")
        if xi_override.shape[0] == 1:
            xi_override = np.repeat(xi_override, n_replicates, axis=0)

    trees, bags = [], []
    for r in range(1, n_replicates + 1):
        if xi_override is not None:
            xi = xi_override[r - 1]
        else:
            rng = np.random.default_rng(np.random.SeedSequence(entropy + (0, r)))
            xi = rng.standard_normal(data.n)
        matrix = build_imputed_matrix(data, grid, G, Psi, cause, "dr_xi", xi=xi)
        t_r, bag_r = _fit_ensemble(matrix.values, data.covariates, grid, n_trees,
                                   nodesize, mtry, entropy + (r,), True)
        trees.extend(t_r)
        bags.append(bag_r)
    meta = {"n_trees": n_trees, "n_replicates": n_replicates, "nodesize": nodesize,
            "mtry": mtry, "seed": list(entropy), "nuisance": nuisance_label,
            "bootstrap": True}
    return ForestModel(trees, grid, cause, "dr_xi", np.vstack(bags),
                       data.covariates.copy(), meta)


def oob_error(model: ForestModel, imputed: ImputedMatrix,
              return_detail: bool = False):
    """Out-of-bag weighted squared error against the imputed responses.

    Each row is predicted by the trees whose bootstrap sample excluded it;
    rows that are in-bag everywhere are skipped (their count is reported in
    the detail tuple).
    """
    if model.train_covariates is None:
        raise ConfigurationError("model does not retain its training covariates")
    n = model.in_bag.shape[1]
    if imputed.values.shape[0] != n:
        raise ConfigurationError("imputed matrix does not match the training set")
    oob_mask = model.in_bag == 0
    counts = oob_mask.sum(axis=0)
    used = counts > 0
    if not np.any(used):
        raise EstimationError("no out-of-bag rows; increase the number of trees")
    acc = np.zeros((n, model.grid.n_times))
    for b, tree in enumerate(model.trees):
        rows = np.flatnonzero(oob_mask[b])
        if rows.size:
            acc[rows] += tree.predict_batch(model.train_covariates[rows])
    pred = acc[used] / counts[used, None]
    err = float(np.mean(((pred - imputed.values[used]) ** 2) @ model.grid.weights))
    if return_detail:
        return err, int(np.count_nonzero(~used))
    return err


@dataclass(frozen=True)
class TuneResult:
    nodesize: int
    mtry: int
    table: list


def tune_forest(data: Dataset, grid: TimeGrid, cause: int, method: str,
                G: CensoringModel | None, Psi: CifModel | None,
                nodesize_grid, mtry_grid, n_trees: int = 100, seed=0) -> TuneResult:
    """Grid search over (nodesize, mtry) minimizing out-of-bag error.

    Every cell shares the same seed derivation so bootstrap draws match
    across cells. Ties prefer the larger nodesize, then the smaller mtry.
    For the randomized method the out-of-bag error is measured against the
    single replicate's own responses (R = 1).
    """
    nodesize_grid = list(nodesize_grid)
    mtry_grid = list(mtry_grid)
    if not nodesize_grid or not mtry_grid:
        raise ParameterError("tuning grids must be nonempty")
    entropy = _as_entropy(seed)
    if method == "dr_xi":
        rng = np.random.default_rng(np.random.SeedSequence(entropy + (0, 1)))
        xi = rng.standard_normal(data.n)
        matrix = build_imputed_matrix(data, grid, G, Psi, cause, method, xi=xi)
    else:
        matrix = build_imputed_matrix(data, grid, G, Psi, cause, method)
    table = []
    for ns in nodesize_grid:
        for mt in mtry_grid:
            trees, in_bag = _fit_ensemble(matrix.values, data.covariates, grid,
                                          n_trees, ns, mt, entropy + (1,), True)
            model = ForestModel(trees, grid, cause, method, in_bag,
                                data.covariates, {})
            err = oob_error(model, matrix)
            table.append({"nodesize": ns, "mtry": mt, "oob": err})
    best = min(table, key=lambda row: (row["oob"], -row["nodesize"], row["mtry"]))
    return TuneResult(best["nodesize"], best["mtry"], table)


def fit_iterated_cif(data: Dataset, grid: TimeGrid, n_trees: int = 100,
                     nodesize: int = 20, mtry: int | None = None,
                     seed=0) -> ForestCif:
    """First-pass nuisance: Buckley-James forests seeded by the marginal
    Aalen-Johansen estimate, one per cause, with Kaplan-Meier survival."""
    aj = fit_aalen_johansen(data)
    entropy = _as_entropy(seed)
    predictors = {}
    for m in range(1, data.k_causes + 1):
        forest = fit_forest(data, grid, m, "bj", G=None, Psi=aj, n_trees=n_trees,
                            nodesize=nodesize, mtry=mtry, seed=entropy + (100 + m,))
        predictors[m] = lambda w, f=forest: f.predict(w, clamp=True)
    survival = km_event_curve(data.times, data.event_type)
    return ForestCif(grid.times, predictors, survival, data.k_causes)


def _diag_summary(matrix: ImputedMatrix) -> dict:
    d = matrix.diagnostics
    out = {"g_clamp_fraction": d.g_clamp_fraction,
           "y_clamp_fraction": d.y_clamp_fraction}
    if d.identity_max_residual is not None:
        out["identity_max_residual"] = d.identity_max_residual
    return out


def forest_to_json(model: ForestModel) -> str:
    payload = {
        "format": "cifforest-model-v1",
        "cause": model.cause,
        "method": model.method,
        "grid": {"times": [float(t) for t in model.grid.times],
                 "weights": [float(w) for w in model.grid.weights]},
        "meta": model.meta,
        "in_bag": model.in_bag.tolist(),
        "trees": [tree.to_json_dict() for tree in model.trees],
    }
    return json.dumps(payload)


def forest_from_json(text: str) -> ForestModel:
    payload = json.loads(text)
    if payload.get("format") != "cifforest-model-v1":
        raise ConfigurationError("not a forest model file")
    grid = TimeGrid(np.asarray(payload["grid"]["times"]),
                    np.asarray(payload["grid"]["weights"]))
    trees = [TreeModel.from_json_dict(t, grid) for t in payload["trees"]]
    return ForestModel(trees, grid, payload["cause"], payload["method"],
                       np.asarray(payload["in_bag"], dtype=np.int32),
                       None, payload["meta"])
