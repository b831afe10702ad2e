"""Regression trees on multivariate responses under weighted squared error.

Responses are n x J matrices (one column per grid time); node loss is the
per-column sum of squared errors combined with the grid weights, i.e. the
diagonally weighted squared-error loss. Splits scan midpoints between
consecutive distinct covariate values; leaves store coordinate means.

Candidate-variable draws at each node come from a generator seeded by
(tree seed, node path index), so a tree is reproducible regardless of the
order in which nodes are expanded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TimeGrid
from .errors import ParameterError

# Reductions below this relative tolerance (of the raw second moment) are
# treated as zero so float noise cannot split a pure node.
_REDUCTION_RTOL = 1e-12


@dataclass(frozen=True)
class SplitRule:
    """Send rows with covariate[variable_index] <= threshold to the left."""

    variable_index: int
    threshold: float


class TreeNode:
    __slots__ = ("variable", "threshold", "left", "right", "value", "count")

    def __init__(self, variable=None, threshold=None, left=None, right=None,
                 value=None, count=0):
        self.variable = variable
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self.count = count

    @property
    def is_leaf(self):
        return self.value is not None


@dataclass
class TreeModel:
    """A fitted tree plus the growth parameters needed to re-grow it."""

    root: TreeNode
    grid: TimeGrid
    nodesize: int
    mtry: int
    seed_entropy: tuple
    n_features: int

    def predict(self, w) -> np.ndarray:
        node = self.root
        while not node.is_leaf:
            node = node.left if w[node.variable] <= node.threshold else node.right
        return node.value.copy()

    def predict_batch(self, W) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        out = np.empty((W.shape[0], self.grid.n_times))
        stack = [(self.root, np.arange(W.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if rows.size == 0:
                continue
            if node.is_leaf:
                out[rows] = node.value
                continue
            mask = W[rows, node.variable] <= node.threshold
            stack.append((node.left, rows[mask]))
            stack.append((node.right, rows[~mask]))
        return out

    def n_leaves(self) -> int:
        count, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                count += 1
            else:
                stack.extend((node.left, node.right))
        return count

    def to_json_dict(self) -> dict:
        nodes = []

        def visit(node):
            if node.is_leaf:
                nodes.append({"leaf": [float(v) for v in node.value], "n": node.count})
            else:
                nodes.append({"v": node.variable, "t": node.threshold})
                visit(node.left)
                visit(node.right)

        visit(self.root)
        return {
            "nodes": nodes,
            "nodesize": self.nodesize,
            "mtry": self.mtry,
            "seed_entropy": list(self.seed_entropy),
            "n_features": self.n_features,
        }

    @classmethod
    def from_json_dict(cls, payload: dict, grid: TimeGrid) -> "TreeModel":
        nodes = payload["nodes"]
        pos = [0]

        def build():
            spec = nodes[pos[0]]
            pos[0] += 1
            if "leaf" in spec:
                return TreeNode(value=np.asarray(spec["leaf"], dtype=float),
                                count=spec["n"])
            node = TreeNode(variable=spec["v"], threshold=spec["t"])
            node.left = build()
            node.right = build()
            return node

        return cls(build(), grid, payload["nodesize"], payload["mtry"],
                   tuple(payload["seed_entropy"]), payload["n_features"])


def predict_tree(tree: TreeModel, w) -> np.ndarray:
    """Route one covariate vector to its leaf value (ties go left)."""
    return tree.predict(np.asarray(w, dtype=float))


def weighted_node_sse(responses: np.ndarray, weights: np.ndarray) -> float:
    """sum_j alpha_j * within-node SSE of column j; nonnegative."""
    if responses.shape[0] == 0:
        return 0.0
    total = responses.sum(axis=0)
    total_sq = (responses ** 2).sum(axis=0)
    sse = np.maximum(total_sq - total ** 2 / responses.shape[0], 0.0)
    return float(np.dot(weights, sse))


def best_split(rows: np.ndarray, responses: np.ndarray, covariates: np.ndarray,
               candidate_vars, grid: TimeGrid, nodesize: int):
    """Exhaustive search for the loss-minimizing (variable, cutpoint).

    Returns (SplitRule, reduction) for the admissible split with the largest
    weighted-SSE reduction, or None when no split with both children of at
    least ``nodesize`` rows strictly reduces the loss. Ties break toward the
    lower variable index, then the lower threshold.
    """
    rows = np.asarray(rows)
    H = responses[rows]
    k = H.shape[0]
    if k < 2 * nodesize:
        return None
    weights = grid.weights
    total = H.sum(axis=0)
    total_sq = (H ** 2).sum(axis=0)
    parent = float(np.dot(weights, np.maximum(total_sq - total ** 2 / k, 0.0)))
    tol = _REDUCTION_RTOL * float(np.dot(weights, total_sq))

    best_rule, best_red = None, tol
    for v in sorted(int(v) for v in candidate_vars):
        x = covariates[rows, v]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        Hs = H[order]
        cum = np.cumsum(Hs, axis=0)
        cum_sq = np.cumsum(Hs ** 2, axis=0)
        sizes = np.arange(1, k)
        valid = (xs[1:] > xs[:-1]) & (sizes >= nodesize) & (k - sizes >= nodesize)
        if not np.any(valid):
            continue
        left_sse = np.maximum(cum_sq[:-1] - cum[:-1] ** 2 / sizes[:, None], 0.0)
        right_sum = total - cum[:-1]
        right_sse = np.maximum((total_sq - cum_sq[:-1])
                               - right_sum ** 2 / (k - sizes)[:, None], 0.0)
        child = (left_sse + right_sse) @ weights
        child[~valid] = np.inf
        pos = int(np.argmin(child))  # first minimum -> lowest threshold
        red = parent - float(child[pos])
        if red > best_red:
            best_red = red
            best_rule = SplitRule(v, 0.5 * (xs[pos] + xs[pos + 1]))
    if best_rule is None:
        return None
    return best_rule, best_red


def _as_entropy(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)


def grow_tree(responses: np.ndarray, covariates: np.ndarray, grid: TimeGrid,
              nodesize: int, mtry: int, rng_seed) -> TreeModel:
    """Recursive partitioning until no admissible split reduces the loss.

    At each node ``mtry`` candidate variables are drawn without replacement
    from a node-indexed stream; leaves store per-column response means.
    """
    responses = np.asarray(responses, dtype=float)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    n, p = covariates.shape
    if responses.ndim != 2 or responses.shape[0] != n:
        raise ParameterError("responses must be an n x J matrix matching covariates")
    if not 1 <= mtry <= p:
        raise ParameterError(f"mtry must lie in 1..{p}, got {mtry}")
    if nodesize < 1:
        raise ParameterError(f"nodesize must be positive, got {nodesize}")
    entropy = _as_entropy(rng_seed)

    root = TreeNode()
    stack = [(root, 1, np.arange(n))]
    while stack:
        node, node_id, rows = stack.pop()
        split = None
        if rows.size >= 2 * nodesize:
            rng = np.random.default_rng(np.random.SeedSequence(entropy + (node_id,)))
            cand = rng.choice(p, size=mtry, replace=False)
            split = best_split(rows, responses, covariates, cand, grid, nodesize)
        if split is None:
            node.value = responses[rows].mean(axis=0)
            node.count = rows.size
            continue
        rule, _ = split
        node.variable = rule.variable_index
        node.threshold = rule.threshold
        node.count = rows.size
        mask = covariates[rows, rule.variable_index] <= rule.threshold
        node.left, node.right = TreeNode(), TreeNode()
        stack.append((node.left, 2 * node_id, rows[mask]))
        stack.append((node.right, 2 * node_id + 1, rows[~mask]))
    return TreeModel(root, grid, nodesize, mtry, entropy, p)


# --- cost-complexity pruning -------------------------------------------------

class _PruneInfo:
    """Per-node bookkeeping for weakest-link pruning."""

    __slots__ = ("node", "rows", "value", "r_node", "left", "right", "parent")

    def __init__(self, node, rows, value, r_node):
        self.node = node
        self.rows = rows
        self.value = value
        self.r_node = r_node
        self.left = None
        self.right = None
        self.parent = None


def _annotate(tree: TreeModel, responses, covariates):
    """Route training rows through the tree; compute node means and losses."""
    weights = tree.grid.weights

    def build(node, rows):
        H = responses[rows]
        info = _PruneInfo(node, rows, H.mean(axis=0) if rows.size else None,
                          weighted_node_sse(H, weights))
        if not node.is_leaf:
            mask = covariates[rows, node.variable] <= node.threshold
            info.left = build(node.left, rows[mask])
            info.right = build(node.right, rows[~mask])
            info.left.parent = info
            info.right.parent = info
        return info

    return build(tree.root, np.arange(responses.shape[0]))


def _cc_sequence(root_info):
    """Nested subtree sequence from weakest-link pruning.

    Returns [(alpha_k, collapsed_ids_k)] with alpha_0 = 0 and collapsed sets
    growing until only the root remains. Node identity is by id().
    """
    collapsed: set[int] = set()
    seq = [(0.0, frozenset())]

    def leaves_below(info):
        if id(info) in collapsed or info.node.is_leaf:
            return 1, info.r_node
        nl, rl = leaves_below(info.left)
        nr, rr = leaves_below(info.right)
        return nl + nr, rl + rr

    def internal_nodes(info, out):
        if id(info) in collapsed or info.node.is_leaf:
            return
        out.append(info)
        internal_nodes(info.left, out)
        internal_nodes(info.right, out)

    while True:
        candidates = []
        internal_nodes(root_info, candidates)
        if not candidates:
            break
        links = []
        for info in candidates:
            n_leaves, r_subtree = leaves_below(info)
            links.append(((info.r_node - r_subtree) / (n_leaves - 1), info))
        alpha = min(g for g, _ in links)
        for g, info in links:
            if g <= alpha * (1 + 1e-12) + 1e-300:
                collapsed.add(id(info))
        # drop collapsed nodes nested inside other collapsed subtrees
        seq.append((max(alpha, seq[-1][0]), frozenset(collapsed)))
    return seq


def _collapsed_for_alpha(seq, alpha):
    best = seq[0][1]
    for a, ids in seq:
        if a <= alpha:
            best = ids
    return best


def _predict_pruned(root_info, collapsed_ids, W, n_times):
    out = np.empty((W.shape[0], n_times))
    for i, w in enumerate(W):
        info = root_info
        while not info.node.is_leaf and id(info) not in collapsed_ids:
            info = info.left if w[info.node.variable] <= info.node.threshold else info.right
        out[i] = info.value
    return out


def prune_tree(tree: TreeModel, responses: np.ndarray, covariates: np.ndarray,
               folds: int = 10, rng_seed=0, one_se: bool = False) -> TreeModel:
    """Cost-complexity pruning with K-fold cross-validated penalty choice.

    The penalty is chosen to minimize cross-validated weighted SSE (the
    one-standard-error rule is available but off by default), then applied
    to the fitted tree by collapsing the corresponding weakest links.
    """
    if folds < 2:
        raise ParameterError("cross-validation needs at least 2 folds")
    responses = np.asarray(responses, dtype=float)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if tree.root.is_leaf:
        return tree

    root_info = _annotate(tree, responses, covariates)
    seq = _cc_sequence(root_info)
    alphas = [a for a, _ in seq]
    candidates = [0.0]
    for k in range(1, len(alphas) - 1):
        candidates.append(math.sqrt(alphas[k] * alphas[k + 1]))
    candidates.append(math.inf)

    entropy = _as_entropy(rng_seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy + (0,)))
    n = responses.shape[0]
    perm = rng.permutation(n)
    fold_rows = np.array_split(perm, folds)
    weights = tree.grid.weights

    fold_err = np.zeros((folds, len(candidates)))
    for f, held in enumerate(fold_rows):
        train = np.setdiff1d(perm, held, assume_unique=True)
        sub = grow_tree(responses[train], covariates[train], tree.grid,
                        tree.nodesize, tree.mtry, entropy + (1 + f,))
        sub_info = _annotate(sub, responses[train], covariates[train])
        sub_seq = _cc_sequence(sub_info)
        W_held, H_held = covariates[held], responses[held]
        for c, alpha in enumerate(candidates):
            ids = _collapsed_for_alpha(sub_seq, alpha)
            pred = _predict_pruned(sub_info, ids, W_held, tree.grid.n_times)
            fold_err[f, c] = float(np.sum(((pred - H_held) ** 2) @ weights))
    cv = fold_err.sum(axis=0) / n
    best = int(np.argmin(cv))
    if one_se:
        se = float(np.std(fold_err[:, best] * folds / n, ddof=1) / math.sqrt(folds))
        for c in range(len(candidates) - 1, best, -1):
            if cv[c] <= cv[best] + se:
                best = c
                break
    chosen_ids = _collapsed_for_alpha(seq, candidates[best])

    def rebuild(info):
        if info.node.is_leaf or id(info) in chosen_ids:
            return TreeNode(value=np.array(info.value), count=info.rows.size)
        out = TreeNode(variable=info.node.variable, threshold=info.node.threshold,
                       count=info.rows.size)
        out.left = rebuild(info.left)
        out.right = rebuild(info.right)
        return out

    return TreeModel(rebuild(root_info), tree.grid, tree.nodesize, tree.mtry,
                     tree.seed_entropy, tree.n_features)
