"""Random survival forest with log-rank splitting.

Trees are grown on bootstrap samples; at each node a random subset of M
columns is scanned over candidate thresholds (midpoints of consecutive
unique values, at most 32 random candidates per column) and the split with
the largest absolute standardized log-rank statistic wins. Leaves store the
Nelson-Aalen cumulative hazard of their in-bag members. Out-of-bag (OOB)
ensemble mortality drives the error estimate, permutation importance and
hyperparameter tuning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .evalmetrics import StepFunction, nelson_aalen

_MAX_THRESHOLDS = 32


def logrank_split_score(times, events, left_mask) -> float:
    """Absolute standardized two-group log-rank statistic."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    left_mask = np.asarray(left_mask, dtype=bool)
    if not left_mask.any() or left_mask.all():
        raise ValueError("both sides of the split must be non-empty")
    scores = _logrank_many(times, events, left_mask[:, None])
    return float(scores[0])


def _logrank_many(times, events, G) -> np.ndarray:
    """Log-rank scores for many candidate groupings at once.

    G is (n, n_candidates) boolean group-1 membership. Returns the absolute
    standardized statistics; zero-variance candidates score 0.
    """
    order = np.argsort(times, kind="stable")
    t_s = times[order]
    e_s = events[order]
    Gs = G[order]
    n = len(t_s)
    _, start = np.unique(t_s, return_index=True)
    d = np.add.reduceat(e_s, start)  # total events per distinct time
    n_at_risk = n - start
    # group-1 at-risk and events per distinct time
    csum = np.vstack([np.zeros((1, Gs.shape[1])), np.cumsum(Gs, axis=0)])
    n1 = Gs.sum(axis=0)[None, :] - csum[start]
    d1 = np.add.reduceat(Gs * e_s[:, None], start, axis=0)
    frac = n1 / n_at_risk[:, None]
    observed = d1.sum(axis=0)
    expected = (d[:, None] * frac).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        var_terms = (
            d[:, None]
            * frac
            * (1 - frac)
            * ((n_at_risk - d) / np.maximum(n_at_risk - 1, 1))[:, None]
        )
    var = var_terms.sum(axis=0)
    out = np.zeros(G.shape[1])
    ok = var > 0
    out[ok] = np.abs(observed[ok] - expected[ok]) / np.sqrt(var[ok])
    return out


@dataclass
class SurvivalTree:
    feature: np.ndarray  # split column per node, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray  # child node ids, -1 for leaves
    right: np.ndarray
    leaf_times: list  # per node: CHF jump times (leaves only)
    leaf_chf: list  # per node: cumulative hazard after each jump
    in_bag: np.ndarray  # original row indices with multiplicity

    def route(self, X) -> np.ndarray:
        """Leaf node id for each row, by breadth-first partitioning."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node_of = np.zeros(X.shape[0], dtype=int)
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if self.feature[node] < 0:
                node_of[rows] = node
                continue
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], rows[go_left]))
            stack.append((self.right[node], rows[~go_left]))
        return node_of

    def chf_at(self, leaf_ids, t_hor) -> np.ndarray:
        out = np.empty(len(leaf_ids))
        for i, node in enumerate(leaf_ids):
            ts = self.leaf_times[node]
            vals = self.leaf_chf[node]
            k = np.searchsorted(ts, t_hor, side="right")
            out[i] = vals[k - 1] if k > 0 else 0.0
        return out

    def leaf_mortality(self, grid) -> dict[int, float]:
        """Sum of the leaf CHF over the event-time grid, per leaf node."""
        out = {}
        for node in np.where(self.feature < 0)[0]:
            ts, vals = self.leaf_times[node], self.leaf_chf[node]
            idx = np.searchsorted(ts, grid, side="right")
            padded = np.concatenate(([0.0], vals))
            out[node] = float(padded[idx].sum())
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_times": [np.asarray(t).tolist() for t in self.leaf_times],
            "leaf_chf": [np.asarray(v).tolist() for v in self.leaf_chf],
            "in_bag": self.in_bag.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "SurvivalTree":
        return SurvivalTree(
            feature=np.asarray(d["feature"], dtype=int),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=int),
            right=np.asarray(d["right"], dtype=int),
            leaf_times=[np.asarray(t) for t in d["leaf_times"]],
            leaf_chf=[np.asarray(v) for v in d["leaf_chf"]],
            in_bag=np.asarray(d["in_bag"], dtype=int),
        )


def _candidate_splits(V_sorted_unique, rng):
    """Midpoints of consecutive unique values, at most 32 random candidates."""
    u = V_sorted_unique
    if len(u) < 2:
        return np.empty(0)
    mids = 0.5 * (u[1:] + u[:-1])
    if len(mids) > _MAX_THRESHOLDS:
        pick = rng.choice(len(mids), size=_MAX_THRESHOLDS, replace=False)
        mids = mids[np.sort(pick)]
    return mids


def grow_tree(X, times, events, bootstrap, mtry, nodesize, rng) -> SurvivalTree:
    """Grow one survival tree on a bootstrap sample (row indices)."""
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    bootstrap = np.asarray(bootstrap, dtype=int)
    p = X.shape[1]
    mtry = min(max(int(mtry), 1), p)
    S = max(int(nodesize), 1)

    feature, threshold, left, right = [], [], [], []
    leaf_times, leaf_chf = [], []

    def new_node():
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        leaf_times.append(np.empty(0))
        leaf_chf.append(np.empty(0))
        return len(feature) - 1

    root = new_node()
    stack = [(root, bootstrap)]
    while stack:
        node, rows = stack.pop()
        t_m, e_m = times[rows], events[rows]
        uniq_rows = np.unique(rows)
        n_unique = len(uniq_rows)
        split = None
        if n_unique >= max(2 * S, S + 1) and e_m.sum() > 0:
            split = _find_split(X, t_m, e_m, rows, mtry, S, rng)
        if split is None:
            na = nelson_aalen(t_m, e_m)
            leaf_times[node] = na.times
            leaf_chf[node] = na.values
            continue
        col, thr = split
        feature[node] = col
        threshold[node] = thr
        go_left = X[rows, col] <= thr
        lid, rid = new_node(), new_node()
        left[node], right[node] = lid, rid
        stack.append((lid, rows[go_left]))
        stack.append((rid, rows[~go_left]))

    return SurvivalTree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        leaf_times=leaf_times,
        leaf_chf=leaf_chf,
        in_bag=bootstrap,
    )


def _find_split(X, t_m, e_m, rows, mtry, S, rng):
    """Best admissible (column, threshold) by log-rank score at one node.

    Ties break toward the smaller column index, then the smaller threshold
    (candidates are scanned in that order and argmax returns the first).
    """
    p = X.shape[1]
    cols = np.sort(rng.choice(p, size=mtry, replace=False))
    V = X[np.ix_(rows, cols)]
    # duplicates of a subject share column values, so unique-subject counts
    # per side reduce to counting first occurrences
    _, first_idx = np.unique(rows, return_index=True)
    first_mask = np.zeros(len(rows), dtype=bool)
    first_mask[first_idx] = True

    col_flat, thr_flat = [], []
    for ci, c in enumerate(cols):
        mids = _candidate_splits(np.unique(V[:, ci]), rng)
        col_flat.extend([ci] * len(mids))
        thr_flat.extend(mids)
    if not thr_flat:
        return None
    col_flat = np.asarray(col_flat)
    thr_flat = np.asarray(thr_flat)
    G = V[:, col_flat] <= thr_flat[None, :]
    n1u = first_mask.astype(np.int64) @ G
    n_unique = int(first_mask.sum())
    admissible = (n1u >= S) & (n_unique - n1u >= S)
    if not admissible.any():
        return None
    scores = _logrank_many(t_m, e_m, G)
    scores[~admissible] = -1.0
    best = int(np.argmax(scores))
    if scores[best] < 0:
        return None
    return int(cols[col_flat[best]]), float(thr_flat[best])


@dataclass
class Forest:
    trees: list[SurvivalTree]
    mtry: int
    nodesize: int
    seed: int
    n_train: int
    columns: list[str] = field(default_factory=list)
    train_times: np.ndarray | None = None
    train_events: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "format": "landcast-forest",
            "version": 1,
            "mtry": self.mtry,
            "nodesize": self.nodesize,
            "seed": self.seed,
            "n_train": self.n_train,
            "columns": self.columns,
            "train_times": self.train_times.tolist(),
            "train_events": self.train_events.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @staticmethod
    def from_dict(d: dict) -> "Forest":
        if d.get("format") != "landcast-forest":
            raise ValueError("not a forest document")
        return Forest(
            trees=[SurvivalTree.from_dict(t) for t in d["trees"]],
            mtry=d["mtry"],
            nodesize=d["nodesize"],
            seed=d["seed"],
            n_train=d["n_train"],
            columns=list(d["columns"]),
            train_times=np.asarray(d["train_times"]),
            train_events=np.asarray(d["train_events"]),
        )


def default_mtry(p: int) -> int:
    return int(np.ceil(np.sqrt(p)))


DEFAULT_NODESIZE = 15


def fit_rsf(
    X, times, events, n_trees=500, mtry=None, nodesize=DEFAULT_NODESIZE,
    seed=0, columns=None,
) -> Forest:
    """Fit a random survival forest on bootstrap samples."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if n_trees < 1:
        raise ValueError("need at least one tree")
    if events.sum() < 1:
        raise DataError("no events in the training data")
    n, p = X.shape
    mtry = default_mtry(p) if mtry is None else mtry
    names = list(columns) if columns is not None else [f"x{j}" for j in range(p)]
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for b in range(n_trees):
        rng = np.random.default_rng(seeds[b])
        boot = rng.integers(0, n, size=n)
        # resample until the bootstrap contains at least one event
        while events[boot].sum() == 0:
            boot = rng.integers(0, n, size=n)
        trees.append(grow_tree(X, times, events, boot, mtry, nodesize, rng))
    return Forest(
        trees=trees,
        mtry=mtry,
        nodesize=nodesize,
        seed=seed,
        n_train=n,
        columns=names,
        train_times=times,
        train_events=events,
    )


def predict_rsf_probability(forest: Forest, rows, t_hor) -> np.ndarray:
    """Event probability by the horizon: 1 - exp(-mean over trees of CHF)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != len(forest.columns):
        raise ValueError(
            f"row has {rows.shape[1]} columns, forest expects {len(forest.columns)}"
        )
    total = np.zeros(rows.shape[0])
    for tree in forest.trees:
        leaves = tree.route(rows)
        total += tree.chf_at(leaves, t_hor)
    return 1.0 - np.exp(-total / len(forest.trees))


def _harrell_concordance(mortality, times, events) -> float:
    """Harrell's C with ties in predictions counting 1/2; 0.5 if undefined."""
    m = np.asarray(mortality, dtype=float)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    if not comparable.any():
        return 0.5
    diff = m[:, None] - m[None, :]
    wins = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(wins[comparable].sum() / comparable.sum())


def _oob_masks(forest: Forest):
    for tree in forest.trees:
        mask = np.ones(forest.n_train, dtype=bool)
        mask[tree.in_bag] = False
        yield mask


def oob_mortality(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble OOB mortality per training subject and coverage counts."""
    grid = np.unique(forest.train_times[forest.train_events == 1])
    acc = np.zeros(forest.n_train)
    cnt = np.zeros(forest.n_train, dtype=int)
    for tree, oob in zip(forest.trees, _oob_masks(forest)):
        idx = np.where(oob)[0]
        if idx.size == 0:
            continue
        leaves = tree.route(X[idx])
        mort = tree.leaf_mortality(grid)
        acc[idx] += np.asarray([mort[l] for l in leaves])
        cnt[idx] += 1
    covered = cnt > 0
    mortality = np.full(forest.n_train, np.nan)
    mortality[covered] = acc[covered] / cnt[covered]
    return mortality, cnt


def oob_error(forest: Forest, X) -> float:
    """1 - Harrell concordance of OOB ensemble mortality vs outcomes."""
    mortality, cnt = oob_mortality(forest, X)
    covered = cnt > 0
    if not covered.any():
        raise DataError("no subject is out-of-bag; grow more trees")
    return 1.0 - _harrell_concordance(
        mortality[covered],
        forest.train_times[covered],
        forest.train_events[covered],
    )


def vimp(forest: Forest, X, column: int, rng) -> float:
    """Permutation importance: mean tree-wise OOB error increase."""
    X = np.asarray(X, dtype=float)
    grid = np.unique(forest.train_times[forest.train_events == 1])
    deltas = []
    for tree, oob in zip(forest.trees, _oob_masks(forest)):
        idx = np.where(oob)[0]
        if idx.size < 2:
            continue
        mort_map = tree.leaf_mortality(grid)
        t_o, e_o = forest.train_times[idx], forest.train_events[idx]
        leaves = tree.route(X[idx])
        base = np.asarray([mort_map[l] for l in leaves])
        err = 1.0 - _harrell_concordance(base, t_o, e_o)
        if column in tree.feature:
            Xp = X[idx].copy()
            Xp[:, column] = Xp[rng.permutation(len(idx)), column]
            leaves_p = tree.route(Xp)
            perm = np.asarray([mort_map[l] for l in leaves_p])
            err_p = 1.0 - _harrell_concordance(perm, t_o, e_o)
        else:
            err_p = err  # unused column: permuting cannot change the routing
        deltas.append(err_p - err)
    return float(np.mean(deltas)) if deltas else 0.0


def tune_rsf(
    X, times, events, mtry_grid=None, nodesize_grid=(5, 15, 30, 50),
    n_trees=100, seed=0, columns=None,
) -> tuple[int, int]:
    """Exhaustive grid search minimizing the OOB error.

    Ties break toward the smaller mtry, then the larger nodesize.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = X.shape[1]
    if mtry_grid is None:
        mtry_grid = sorted(
            {default_mtry(p), int(np.ceil(p / 3)), int(np.ceil(p / 2)), p}
        )
    best = None
    for m in sorted(set(int(v) for v in mtry_grid)):
        for s in sorted(set(int(v) for v in nodesize_grid), reverse=True):
            forest = fit_rsf(
                X, times, events, n_trees=n_trees, mtry=m, nodesize=s,
                seed=seed, columns=columns,
            )
            err = oob_error(forest, X)
            if best is None or err < best[0] - 1e-12:
                best = (err, m, s)
    return best[1], best[2]


def select_vars_rsf(forest: Forest, X, seed=0) -> list[int]:
    """Columns with positive permutation importance (full set if none)."""
    rng = np.random.default_rng(seed)
    scores = [vimp(forest, X, j, rng) for j in range(len(forest.columns))]
    keep = [j for j, s in enumerate(scores) if s > 0]
    if not keep:
        warnings.warn(
            "no column has positive importance; keeping the full set",
            stacklevel=2,
        )
        keep = list(range(len(forest.columns)))
    return keep
