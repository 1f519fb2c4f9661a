"""Relative-risk tree ensembles for left-truncated right-censored records.

Trees split on the reduction of the one-step full-likelihood deviance

    d_h = sum_l 2 * { d_l * log(d_l / mu_l) - (d_l - mu_l) },

where mu_l = e_l * phi_h, e_l is the cumulative-baseline mass crossed by
record l (P_0(t_{l+1}) - P_0(t_l), computed once from all records), and
phi_h = sum(d) / sum(e) is the node's relative risk. Since phi_h zeroes
the linear term inside each node, the reduction of a candidate split is
the Poisson likelihood-ratio form

    2 * [ D_L log(D_L/E_L) + D_R log(D_R/E_R) - D log(D/E) ],

which histogram accumulation evaluates for every (feature, threshold)
pair of a whole tree level at once. Growth is therefore level-wise over
pre-binned features; stored thresholds are raw feature values so
prediction generalizes off the training grid.

With unit exposure (e_l = 1) the same machinery is a probability forest:
leaves carry event rates in [0, 1], which the discrete-time comparator
uses as per-bin initiation probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._risk import RiskSetEngine
from .errors import ConfigError, DataValidationError

__all__ = ["ForestParams", "LtrcForest", "fit_ltrc_forest", "fit_binary_forest", "node_deviance"]


@dataclass(frozen=True)
class ForestParams:
    """Ensemble hyperparameters (spec defaults; all overridable)."""

    n_trees: int = 200
    mtry: int | None = None  # default ceil(sqrt(p))
    min_node: int = 15
    subsample: float = 0.632
    max_bins: int = 32
    max_depth: int = 40
    honest: bool = True  # leaf values from out-of-subsample rows
    seed: int = 0

    def validate(self, p: int) -> "ForestParams":
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry out of range")  # values above p clamp to p
        if self.min_node < 1:
            raise ConfigError("min_node must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError("subsample fraction must lie in (0, 1]")
        if self.max_bins < 2 or self.max_depth < 1:
            raise ConfigError("max_bins/max_depth out of range")
        return self


def node_deviance(delta: np.ndarray, mu: np.ndarray) -> float:
    """Full-likelihood deviance of one node, with 0*log(0) := 0."""
    delta = np.asarray(delta, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    logterm = np.where(delta > 0, delta * (np.log(np.maximum(delta, 1e-300)) - np.log(np.maximum(mu, 1e-300))), 0.0)
    return float(np.sum(2.0 * (logterm - (delta - mu))))


@dataclass
class _Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray  # deviance reduction of each internal node


@dataclass
class LtrcForest:
    """Fitted ensemble; `predict` returns normalized relative risks (mode
    "risk") or raw leaf rates clipped to [0, 1] (mode "probability")."""

    trees: list[_Tree]
    scale: float
    mode: str
    params: ForestParams
    feature_names: list[str] = field(default_factory=list)
    baseline_times: np.ndarray | None = None
    baseline_increments: np.ndarray | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        acc = np.zeros(x.shape[0])
        for tree in self.trees:
            acc += _predict_tree(tree, x)
        acc /= len(self.trees)
        if self.mode == "risk":
            return acc / self.scale
        return np.clip(acc, 0.0, 1.0)

    def splits(self) -> list[tuple[int, float, float]]:
        """(feature, threshold, deviance reduction) of every recorded split."""
        out = []
        for tree in self.trees:
            for k in range(tree.feature.size):
                if tree.feature[k] >= 0:
                    out.append((int(tree.feature[k]), float(tree.threshold[k]), float(tree.gain[k])))
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "scale": self.scale,
            "feature_names": self.feature_names,
            "params": {
                "n_trees": self.params.n_trees,
                "mtry": self.params.mtry,
                "min_node": self.params.min_node,
                "subsample": self.params.subsample,
                "max_bins": self.params.max_bins,
                "max_depth": self.params.max_depth,
                "seed": self.params.seed,
            },
            "baseline_times": None if self.baseline_times is None else list(map(float, self.baseline_times)),
            "baseline_increments": None
            if self.baseline_increments is None
            else list(map(float, self.baseline_increments)),
            "trees": [
                {
                    "feature": [int(v) for v in t.feature],
                    "threshold": [float(v) for v in t.threshold],
                    "left": [int(v) for v in t.left],
                    "right": [int(v) for v in t.right],
                    "value": [float(v) for v in t.value],
                    "gain": [float(v) for v in t.gain],
                }
                for t in self.trees
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "LtrcForest":
        trees = [
            _Tree(
                feature=np.asarray(t["feature"], dtype=np.int64),
                threshold=np.asarray(t["threshold"], dtype=np.float64),
                left=np.asarray(t["left"], dtype=np.int64),
                right=np.asarray(t["right"], dtype=np.int64),
                value=np.asarray(t["value"], dtype=np.float64),
                gain=np.asarray(t["gain"], dtype=np.float64),
            )
            for t in d["trees"]
        ]
        return LtrcForest(
            trees=trees,
            scale=float(d["scale"]),
            mode=d["mode"],
            params=ForestParams(**d["params"]),
            feature_names=list(d["feature_names"]),
            baseline_times=None if d["baseline_times"] is None else np.asarray(d["baseline_times"]),
            baseline_increments=None
            if d["baseline_increments"] is None
            else np.asarray(d["baseline_increments"]),
        )


def _leaf_ids(tree: _Tree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(x.shape[0], dtype=np.int64)
    while True:
        feat = tree.feature[node]
        internal = feat >= 0
        if not internal.any():
            break
        cols = np.where(internal, feat, 0)
        go_left = x[np.arange(x.shape[0]), cols] <= tree.threshold[node]
        nxt = np.where(go_left, tree.left[node], tree.right[node])
        node = np.where(internal, nxt, node)
    return node


def _predict_tree(tree: _Tree, x: np.ndarray) -> np.ndarray:
    return tree.value[_leaf_ids(tree, x)]


def _bin_features(x: np.ndarray, max_bins: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Candidate cutpoints per feature and the binned matrix; bin b holds
    values v with edges[b-1] < v <= edges[b].

    Cutpoints mix quantiles with a uniform grid over the range, so
    resolution survives both heavy mass concentration and signal that
    lives in a thin tail of the row distribution."""
    p = x.shape[1]
    edges_list: list[np.ndarray] = []
    binned = np.empty_like(x, dtype=np.int64)
    for j in range(p):
        col = x[:, j]
        qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
        lo, hi = float(col.min()), float(col.max())
        uni = np.linspace(lo, hi, max_bins + 1)[1:-1] if hi > lo else np.empty(0)
        edges = np.unique(np.concatenate([qs, uni]))
        if edges.size and edges[-1] >= hi:
            edges = edges[:-1]  # last cutpoint must leave a nonempty right bin
        edges_list.append(edges)
        binned[:, j] = np.searchsorted(edges, col, side="left")
    return edges_list, binned


def _poisson_term(d: np.ndarray, e: np.ndarray) -> np.ndarray:
    # D * log(D/E) with 0 log 0 := 0; E > 0 wherever D > 0 by construction.
    with np.errstate(divide="ignore", invalid="ignore"):
        t = d * (np.log(d) - np.log(e))
    return np.where(d > 0, t, 0.0)


def _grow_tree(
    binned: np.ndarray,
    edges_list: list[np.ndarray],
    delta: np.ndarray,
    e: np.ndarray,
    rng: np.random.Generator,
    params: ForestParams,
    mtry: int,
) -> _Tree:
    n, p = binned.shape
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    value = [0.0]
    gain = [0.0]

    row_node = np.zeros(n, dtype=np.int64)  # frontier position per row, -1 when settled
    frontier = [0]  # tree node id per frontier position

    for _ in range(params.max_depth):
        if not frontier:
            break
        n_act = len(frontier)
        live = row_node >= 0
        rows = np.flatnonzero(live)
        node_pos = row_node[rows]
        d_tot = np.bincount(node_pos, weights=delta[rows], minlength=n_act)
        e_tot = np.bincount(node_pos, weights=e[rows], minlength=n_act)
        n_tot = np.bincount(node_pos, minlength=n_act).astype(np.float64)

        perm = np.argsort(rng.random((n_act, p)), axis=1)
        allowed = np.zeros((n_act, p), dtype=bool)
        np.put_along_axis(allowed, perm[:, :mtry], True, axis=1)
        best_red = np.full(n_act, -np.inf)
        best_feat = np.full(n_act, -1, dtype=np.int64)
        best_bin = np.zeros(n_act, dtype=np.int64)
        parent_term = _poisson_term(d_tot, e_tot)
        for j in range(p):
            n_bins = edges_list[j].size + 1
            if n_bins < 2:
                continue
            key = node_pos * n_bins + binned[rows, j]
            hd = np.bincount(key, weights=delta[rows], minlength=n_act * n_bins).reshape(n_act, n_bins)
            he = np.bincount(key, weights=e[rows], minlength=n_act * n_bins).reshape(n_act, n_bins)
            hn = np.bincount(key, minlength=n_act * n_bins).reshape(n_act, n_bins).astype(np.float64)
            dl = np.cumsum(hd, axis=1)[:, :-1]
            el = np.cumsum(he, axis=1)[:, :-1]
            nl = np.cumsum(hn, axis=1)[:, :-1]
            dr = d_tot[:, None] - dl
            er = e_tot[:, None] - el
            nr = n_tot[:, None] - nl
            red = 2.0 * (_poisson_term(dl, el) + _poisson_term(dr, er) - parent_term[:, None])
            invalid = (nl < params.min_node) | (nr < params.min_node) | ~allowed[:, j, None]
            red = np.where(invalid, -np.inf, red)
            jbest = np.argmax(red, axis=1)
            jred = red[np.arange(n_act), jbest]
            upd = jred > best_red
            best_red = np.where(upd, jred, best_red)
            best_feat = np.where(upd, j, best_feat)
            best_bin = np.where(upd, jbest, best_bin)

        split = best_red > 1e-12
        new_frontier: list[int] = []
        new_left_pos = np.full(n_act, -1, dtype=np.int64)
        new_right_pos = np.full(n_act, -1, dtype=np.int64)
        for k in range(n_act):
            nid = frontier[k]
            if split[k]:
                j, b = int(best_feat[k]), int(best_bin[k])
                feature[nid] = j
                threshold[nid] = float(edges_list[j][b])
                gain[nid] = float(best_red[k])
                for side, pos_arr in (("left", new_left_pos), ("right", new_right_pos)):
                    cid = len(feature)
                    feature.append(-1)
                    threshold.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    value.append(0.0)
                    gain.append(0.0)
                    if side == "left":
                        left[nid] = cid
                    else:
                        right[nid] = cid
                    pos_arr[k] = len(new_frontier)
                    new_frontier.append(cid)
            else:
                value[nid] = float(d_tot[k] / e_tot[k]) if e_tot[k] > 0 else 0.0
        if not split.any():
            frontier = []
            break
        go_left = binned[rows, np.where(split[node_pos], best_feat[node_pos], 0)] <= best_bin[node_pos]
        nxt = np.where(go_left, new_left_pos[node_pos], new_right_pos[node_pos])
        row_node[rows] = np.where(split[node_pos], nxt, -1)
        frontier = new_frontier
    else:
        # depth cap: settle whatever is still open
        if frontier:
            live = row_node >= 0
            rows = np.flatnonzero(live)
            node_pos = row_node[rows]
            n_act = len(frontier)
            d_tot = np.bincount(node_pos, weights=delta[rows], minlength=n_act)
            e_tot = np.bincount(node_pos, weights=e[rows], minlength=n_act)
            for k, nid in enumerate(frontier):
                value[nid] = float(d_tot[k] / e_tot[k]) if e_tot[k] > 0 else 0.0

    return _Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        gain=np.asarray(gain, dtype=np.float64),
    )


def _fit_forest_core(
    x: np.ndarray,
    delta: np.ndarray,
    e: np.ndarray,
    params: ForestParams,
    mode: str,
    feature_names: list[str],
) -> LtrcForest:
    n, p = x.shape
    params.validate(p)
    mtry = params.mtry if params.mtry is not None else int(np.ceil(np.sqrt(max(p, 1))))
    mtry = min(max(mtry, 1), max(p, 1))
    edges_list, binned = _bin_features(x, params.max_bins)
    n_sub = max(int(round(params.subsample * n)), min(n, 2 * params.min_node))
    trees = []
    for t in range(params.n_trees):
        rng = np.random.Generator(np.random.Philox(key=np.array([params.seed, t], dtype=np.uint64)))
        idx = rng.choice(n, size=n_sub, replace=False) if n_sub < n else np.arange(n)
        tree = _grow_tree(binned[idx], edges_list, delta[idx].astype(np.float64), e[idx], rng, params, mtry)
        if params.honest and n_sub < n:
            # honest leaves: keep the grown structure, but estimate each
            # leaf's rate from the held-out rows so no row's own outcome
            # inflates its fitted value
            mask = np.ones(n, dtype=bool)
            mask[idx] = False
            out = np.flatnonzero(mask)
            leaves = _leaf_ids(tree, x[out])
            n_nodes = tree.value.shape[0]
            d_out = np.bincount(leaves, weights=delta[out].astype(np.float64), minlength=n_nodes)
            e_out = np.bincount(leaves, weights=e[out], minlength=n_nodes)
            seen = np.bincount(leaves, minlength=n_nodes) > 0
            refit = seen & (e_out > 0)
            tree.value = np.where(refit, np.divide(d_out, np.maximum(e_out, 1e-300)), tree.value)
        trees.append(tree)
    forest = LtrcForest(
        trees=trees, scale=1.0, mode=mode, params=params, feature_names=list(feature_names)
    )
    if mode == "risk":
        raw = forest.predict(x)
        mean = float(raw.mean())
        forest.scale = mean if mean > 0 else 1.0
    return forest


def fit_ltrc_forest(pseudo, params: ForestParams = ForestParams(), x_stop: np.ndarray | None = None) -> LtrcForest:
    """Fit a relative-risk forest on LTRC pseudo-subjects.

    The common cumulative baseline is the classical Nelson-Aalen over all
    records; each record's exposure is the baseline mass crossed on
    (t_l, t_{l+1}]. Trees are grown on subsamples drawn without
    replacement with per-tree Philox streams keyed by (seed, tree index),
    and the ensemble intensity ratio is normalized to mean 1 over the
    training records, letting the recomputed baseline carry the scale.

    Event records may carry separate stop-time covariates (`x_stop`),
    the measurement taken at the decision boundary; those values place
    the event in the tree.
    """
    from .panel import PseudoSubjectSet

    if isinstance(pseudo, PseudoSubjectSet):
        left, right, delta, x, names = pseudo.left, pseudo.right, pseudo.delta, pseudo.x, list(pseudo.names)
    else:
        left, right, delta, x = pseudo
        left = np.asarray(left, dtype=np.float64)
        right = np.asarray(right, dtype=np.float64)
        delta = np.asarray(delta)
        x = np.asarray(x, dtype=np.float64)
        names = [f"x{j}" for j in range(x.shape[1])]
    n = x.shape[0]
    if int(np.sum(delta == 1)) < 1:
        raise DataValidationError("forest fit needs at least one event")
    engine = RiskSetEngine(left, right, delta)
    incr = engine.event_sums(np.ones(n)) / engine.s0(np.ones(n))
    cum = np.concatenate([[0.0], np.cumsum(incr)])
    p_at = lambda t: cum[np.searchsorted(engine.times, t, side="right")]
    e = p_at(right) - p_at(left)
    x_fit = x if x_stop is None else np.where((delta == 1)[:, None], x_stop, x)
    forest = _fit_forest_core(x_fit, delta, e, params, "risk", names)
    forest.baseline_times = engine.times
    forest.baseline_increments = incr
    return forest


def fit_binary_forest(x: np.ndarray, y: np.ndarray, params: ForestParams = ForestParams()) -> LtrcForest:
    """Probability forest on binary outcomes: unit exposure per row, so a
    leaf's value is its event rate and predictions are probabilities."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ConfigError("x and y length mismatch")
    return _fit_forest_core(x, y, np.ones(x.shape[0]), params, "probability", [f"x{j}" for j in range(x.shape[1])])
