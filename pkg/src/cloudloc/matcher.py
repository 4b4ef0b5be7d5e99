"""Two-stage classifier over concatenated (3D | 2D) descriptor pairs.

The coarse stage is a single cost-weighted CART tree acting as a cheap
high-recall prefilter; the fine stage is a random forest whose mean leaf
fraction is the match confidence. Both stages split on Gini diversity
2 r+ r- / (r+ + r-)^2, with misclassification costs entering as class
weights in the split criterion only (leaf confidences stay unweighted).
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateData, DimensionMismatch, ParseError


def gini_index(r_pos: int, r_neg: int) -> float:
    """Gini diversity index 2 r+ r- / (r+ + r-)^2; zero for pure nodes."""
    if r_pos < 0 or r_neg < 0 or r_pos + r_neg < 1:
        raise ValueError("counts must be non-negative with at least one sample")
    total = r_pos + r_neg
    return 2.0 * r_pos * r_neg / (total * total)


@dataclass
class TreeNode:
    """Linked-node view of one tree node (internal xor leaf)."""

    feature_index: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    positive_fraction: float = 0.0
    sample_count: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class DecisionTree:
    """CART tree stored as flat arrays for vectorized prediction.

    Split rule: value <= threshold goes left. Growth is best-first by
    cost-weighted Gini decrease until `max_splits` internal nodes.
    """

    def __init__(self, n_features, max_splits, cost_matrix, feature, threshold,
                 left, right, fraction, count, is_leaf):
        self.n_features = int(n_features)
        self.max_splits = int(max_splits)
        self.cost_matrix = np.asarray(cost_matrix, dtype=np.float64).reshape(2, 2)
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.fraction = fraction
        self.count = count
        self.is_leaf = is_leaf

    @property
    def n_internal(self) -> int:
        return int(np.count_nonzero(~self.is_leaf))

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def root(self) -> TreeNode:
        """Materialize the linked TreeNode structure (for inspection/tests)."""

        def build(i: int) -> TreeNode:
            if self.is_leaf[i]:
                return TreeNode(positive_fraction=float(self.fraction[i]),
                                sample_count=int(self.count[i]))
            return TreeNode(
                feature_index=int(self.feature[i]),
                threshold=float(self.threshold[i]),
                left=build(int(self.left[i])),
                right=build(int(self.right[i])),
                positive_fraction=float(self.fraction[i]),
                sample_count=int(self.count[i]),
            )

        return build(0)

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        """Leaf positive fractions for an (n, n_features) matrix."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {rows.shape[1]}")
        node = np.zeros(rows.shape[0], dtype=np.int64)
        while True:
            active = np.nonzero(~self.is_leaf[node])[0]
            if active.size == 0:
                break
            nid = node[active]
            vals = rows[active, self.feature[nid]]
            node[active] = np.where(vals <= self.threshold[nid], self.left[nid], self.right[nid])
        return self.fraction[node]

    def predict_pairs(self, descs3d, descs2d, idx3, idx2, p: int) -> np.ndarray:
        """Leaf fractions for implicit concatenated pairs without
        materializing the (n, p+q) matrix: feature f < p reads the 3D
        descriptor, f >= p the 2D descriptor."""
        n = idx3.shape[0]
        node = np.zeros(n, dtype=np.int64)
        while True:
            active = np.nonzero(~self.is_leaf[node])[0]
            if active.size == 0:
                break
            nid = node[active]
            f = self.feature[nid]
            from3d = f < p
            vals = np.empty(active.size)
            if np.any(from3d):
                sel = np.nonzero(from3d)[0]
                vals[sel] = descs3d[idx3[active[sel]], f[sel]]
            if not np.all(from3d):
                sel = np.nonzero(~from3d)[0]
                vals[sel] = descs2d[idx2[active[sel]], f[sel] - p]
            node[active] = np.where(vals <= self.threshold[nid], self.left[nid], self.right[nid])
        return self.fraction[node]


def _best_split(x_node, wpos, wneg, feats):
    """Best (delta, feature, threshold) over candidate features.

    delta is the cost-weighted Gini decrease; ties resolve to the lowest
    feature index, then the lowest threshold. Returns None when no boundary
    between distinct adjacent values exists.
    """
    n = x_node.shape[0]
    total_p = wpos.sum()
    total_n = wneg.sum()
    total = total_p + total_n
    g_parent = 2.0 * total_p * total_n / (total * total)

    sub = x_node[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(sub, order, axis=0)
    wp = np.cumsum(wpos[order], axis=0)
    wn = np.cumsum(wneg[order], axis=0)

    lp = wp[:-1]
    ln = wn[:-1]
    rp = total_p - lp
    rn = total_n - ln
    wl = lp + ln
    wr = rp + rn
    with np.errstate(divide="ignore", invalid="ignore"):
        gl = np.where(wl > 0, 2.0 * lp * ln / (wl * wl), 0.0)
        gr = np.where(wr > 0, 2.0 * rp * rn / (wr * wr), 0.0)
    delta = g_parent - (wl * gl + wr * gr) / total
    delta[sorted_vals[1:] == sorted_vals[:-1]] = -np.inf

    best = None
    for col, f in enumerate(feats.tolist()):
        dcol = delta[:, col]
        i = int(np.argmax(dcol))
        d = dcol[i]
        if not np.isfinite(d):
            continue
        lo = sorted_vals[i, col]
        hi = sorted_vals[i + 1, col]
        t = lo + 0.5 * (hi - lo)
        if t >= hi:  # guard midpoint rounding up to the right value
            t = lo
        if best is None or d > best[0]:
            best = (float(d), int(f), float(t))
    return best


def train_tree(rows, labels, max_splits: int, cost_matrix=None,
               feature_subset_size: int | None = None, rng_seed: int = 0) -> DecisionTree:
    """Grow a CART tree. Raises DegenerateData when labels hold one class."""
    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("rows/labels shape mismatch")
    if x.shape[0] < 2 or len(np.unique(y)) < 2:
        raise DegenerateData("training data must contain both classes and >= 2 rows")
    if max_splits < 1:
        raise ValueError("max_splits must be >= 1")
    cost = np.asarray(cost_matrix if cost_matrix is not None else [[0.0, 1.0], [1.0, 0.0]],
                      dtype=np.float64).reshape(2, 2)
    n, n_features = x.shape
    w_class = np.array([cost[0, 1], cost[1, 0]])  # [neg weight, pos weight]
    if np.any(w_class <= 0):
        raise ValueError("off-diagonal misclassification costs must be positive")
    wpos_all = np.where(y == 1, w_class[1], 0.0)
    wneg_all = np.where(y == 0, w_class[0], 0.0)

    rng = np.random.default_rng(rng_seed)
    subset = n_features if feature_subset_size is None else min(int(feature_subset_size), n_features)

    feature = [0]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    fraction = [0.0]
    count = [0]
    is_leaf = [True]
    node_rows = {0: np.arange(n)}

    def leaf_stats(node_id, rows_idx):
        pos = int(np.count_nonzero(y[rows_idx] == 1))
        fraction[node_id] = pos / rows_idx.size
        count[node_id] = int(rows_idx.size)

    leaf_stats(0, node_rows[0])

    def candidate(node_id):
        """Evaluate a node's best split; returns heap entry or None."""
        rows_idx = node_rows[node_id]
        if rows_idx.size < 2:
            return None
        ypos = np.count_nonzero(y[rows_idx] == 1)
        if ypos == 0 or ypos == rows_idx.size:
            return None  # pure
        feats = (np.arange(n_features) if subset >= n_features
                 else np.sort(rng.choice(n_features, size=subset, replace=False)))
        found = _best_split(x[rows_idx], wpos_all[rows_idx], wneg_all[rows_idx], feats)
        if found is None:
            return None
        delta, f, t = found
        return (-delta, node_id, f, t)

    heap = []
    entry = candidate(0)
    if entry is not None:
        heapq.heappush(heap, entry)

    splits = 0
    while heap and splits < max_splits:
        neg_delta, node_id, f, t = heapq.heappop(heap)
        rows_idx = node_rows.pop(node_id)
        go_left = x[rows_idx, f] <= t
        li = rows_idx[go_left]
        ri = rows_idx[~go_left]
        lid = len(feature)
        rid = lid + 1
        for _ in range(2):
            feature.append(0)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            fraction.append(0.0)
            count.append(0)
            is_leaf.append(True)
        node_rows[lid] = li
        node_rows[rid] = ri
        leaf_stats(lid, li)
        leaf_stats(rid, ri)
        feature[node_id] = f
        threshold[node_id] = t
        left[node_id] = lid
        right[node_id] = rid
        is_leaf[node_id] = False
        splits += 1
        for child in (lid, rid):
            entry = candidate(child)
            if entry is not None:
                heapq.heappush(heap, entry)

    return DecisionTree(
        n_features=n_features, max_splits=max_splits, cost_matrix=cost,
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        fraction=np.array(fraction, dtype=np.float64),
        count=np.array(count, dtype=np.int64),
        is_leaf=np.array(is_leaf, dtype=bool),
    )


class RandomForest:
    """Bagged CART trees with per-split feature subsets; confidence is the
    mean of per-tree leaf positive fractions (soft voting)."""

    def __init__(self, trees, n_features, features_per_split, base_seed, seeds, bootstrap):
        self.trees = trees
        self.n_features = int(n_features)
        self.features_per_split = int(features_per_split)
        self.base_seed = int(base_seed)
        self.seeds = np.asarray(seeds, dtype=np.uint64)
        self.bootstrap = bool(bootstrap)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def bootstrap_indices(self, tree_index: int, n_rows: int) -> np.ndarray:
        """Recompute the bootstrap sample drawn when tree `tree_index` was
        trained (identical rng derivation)."""
        rng = np.random.default_rng(int(self.seeds[tree_index]))
        if not self.bootstrap:
            return np.arange(n_rows)
        return rng.integers(0, n_rows, size=n_rows)

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {rows.shape[1]}")
        acc = np.zeros(rows.shape[0])
        for tree in self.trees:
            acc += tree.predict_rows(rows)
        return acc / self.n_trees

    def predict_pairs(self, descs3d, descs2d, idx3, idx2, p: int) -> np.ndarray:
        acc = np.zeros(idx3.shape[0])
        for tree in self.trees:
            acc += tree.predict_pairs(descs3d, descs2d, idx3, idx2, p)
        return acc / self.n_trees


def train_forest(rows, labels, n_trees: int, max_splits: int,
                 features_per_split: int | None = None, cost_matrix=None,
                 rng_seed: int = 0, bootstrap: bool = True) -> RandomForest:
    """Train a random forest of CART trees on bootstrap resamples."""
    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if x.shape[0] < 2 or len(np.unique(y)) < 2:
        raise DegenerateData("training data must contain both classes and >= 2 rows")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    n, n_features = x.shape
    if features_per_split is None:
        features_per_split = int(np.ceil(np.sqrt(n_features)))
    seeds = np.random.SeedSequence(rng_seed).generate_state(n_trees, np.uint64)

    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng(int(seeds[t]))
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        # resamples may be single-class; fall back to the full data for that tree
        if len(np.unique(y[idx])) < 2:
            idx = np.arange(n)
        sub_seed = int(rng.integers(0, 2 ** 63 - 1))
        trees.append(
            train_tree(x[idx], y[idx], max_splits=max_splits, cost_matrix=cost_matrix,
                       feature_subset_size=features_per_split, rng_seed=sub_seed)
        )
    return RandomForest(trees, n_features, features_per_split, rng_seed, seeds, bootstrap)


def predict_confidence(stage, row) -> float:
    """Positive-match confidence in [0, 1] for one concatenated row."""
    return float(stage.predict_rows(np.asarray(row, dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# Cascade inference and two-way matching
# ---------------------------------------------------------------------------


@dataclass
class ConfidenceTable:
    """Sparse (2D id, 3D id) -> fine confidence table from the cascade."""

    entries: dict
    n_pairs_total: int = 0
    n_coarse_passed: int = 0
    n_fine_evaluated: int = 0


@dataclass
class MatcherModel:
    coarse: DecisionTree
    fine: RandomForest
    p: int
    q: int
    metadata: dict = field(default_factory=dict)


def cascade_match(model: MatcherModel, descs2d: np.ndarray, descs3d: np.ndarray) -> ConfidenceTable:
    """Score all |2D| x |3D| concatenations through the two-stage cascade.

    Pairs whose coarse confidence exceeds 0.5 are re-scored by the fine
    forest and land in the table; everything else is absent. All-zero
    sentinel descriptors never produce entries.
    """
    descs2d = np.asarray(descs2d, dtype=np.float64)
    descs3d = np.asarray(descs3d, dtype=np.float64)
    n2, q = descs2d.shape if descs2d.size else (0, model.q)
    n3, p = descs3d.shape if descs3d.size else (0, model.p)
    if n2 == 0 or n3 == 0:
        return ConfidenceTable(entries={})
    if p != model.p or q != model.q:
        raise DimensionMismatch(f"model expects p={model.p}, q={model.q}; got p={p}, q={q}")

    ok2 = np.nonzero(np.any(descs2d != 0.0, axis=1))[0]
    ok3 = np.nonzero(np.any(descs3d != 0.0, axis=1))[0]
    idx2 = np.repeat(ok2, ok3.size)
    idx3 = np.tile(ok3, ok2.size)
    total = idx2.size
    if total == 0:
        return ConfidenceTable(entries={}, n_pairs_total=0)

    coarse_conf = model.coarse.predict_pairs(descs3d, descs2d, idx3, idx2, model.p)
    passed = coarse_conf > 0.5
    idx2p = idx2[passed]
    idx3p = idx3[passed]
    n_passed = int(idx2p.size)
    if n_passed == 0:
        return ConfidenceTable(entries={}, n_pairs_total=total, n_coarse_passed=0)

    fine_conf = model.fine.predict_pairs(descs3d, descs2d, idx3p, idx2p, model.p)
    entries = {
        (int(i2), int(i3)): float(c)
        for i2, i3, c in zip(idx2p.tolist(), idx3p.tolist(), fine_conf.tolist())
    }
    return ConfidenceTable(entries=entries, n_pairs_total=total,
                           n_coarse_passed=n_passed, n_fine_evaluated=n_passed)


def two_way_match(table) -> list:
    """Mutual-best filtering: keep (id2d, id3d, conf) iff the pair is both
    its row's and its column's highest-confidence entry and conf > 0.5.
    Argmax ties resolve to the lowest id."""
    entries = table.entries if isinstance(table, ConfidenceTable) else dict(table)
    if not entries:
        return []
    best_row = {}
    best_col = {}
    for (i2, i3), conf in entries.items():
        cur = best_row.get(i2)
        if cur is None or conf > cur[0] or (conf == cur[0] and i3 < cur[1]):
            best_row[i2] = (conf, i3)
        cur = best_col.get(i3)
        if cur is None or conf > cur[0] or (conf == cur[0] and i2 < cur[1]):
            best_col[i3] = (conf, i2)
    out = []
    for i2, (conf, i3) in sorted(best_row.items()):
        if conf > 0.5 and best_col[i3] == (conf, i2):
            out.append((i2, i3, conf))
    return out


# ---------------------------------------------------------------------------
# Grid search: 8:2 stratified split, coarse tuned for recall under a
# negative-rejection floor, fine tuned for precision; winners retrain on the
# full dataset.
# ---------------------------------------------------------------------------


def _stratified_split(y: np.ndarray, rng: np.random.Generator, val_frac: float = 0.2):
    train_idx = []
    val_idx = []
    for cls in (0, 1):
        cls_idx = np.nonzero(y == cls)[0]
        perm = rng.permutation(cls_idx)
        n_val = max(1, int(round(val_frac * cls_idx.size)))
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def _cost_from_ratio(ratio: float) -> np.ndarray:
    return np.array([[0.0, 1.0], [float(ratio), 0.0]])


def grid_search(dataset, grids=None, rng_seed: int = 0) -> MatcherModel:
    """Tune hyperparameters on an 8:2 split, then retrain on everything.

    `grids` is a config.GridConfig (or anything with the same attributes);
    `dataset` is a CorrespondenceDataset.
    """
    from .config import GridConfig

    grids = grids or GridConfig()
    x, y = dataset.training_matrix()
    if len(np.unique(y)) < 2:
        raise DegenerateData("dataset must contain both classes")
    rng = np.random.default_rng(rng_seed)
    train_idx, val_idx = _stratified_split(y, rng)
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = x[val_idx], y[val_idx]
    val_pos = yv == 1
    val_neg = ~val_pos

    coarse_record = []
    best_coarse = None  # (key tuple, params, tree)
    for max_splits in grids.coarse_max_splits:
        for ratio in grids.coarse_cost_ratios:
            tree = train_tree(xt, yt, max_splits=int(max_splits),
                              cost_matrix=_cost_from_ratio(ratio), rng_seed=rng_seed)
            conf = tree.predict_rows(xv)
            recall = float(np.mean(conf[val_pos] > 0.5)) if val_pos.any() else 0.0
            rejection = float(np.mean(conf[val_neg] <= 0.5)) if val_neg.any() else 0.0
            feasible = rejection >= 0.5
            coarse_record.append({
                "max_splits": int(max_splits), "cost_ratio": float(ratio),
                "recall": recall, "neg_rejection": rejection, "feasible": feasible,
            })
            key = (1 if feasible else 0, recall if feasible else rejection,
                   rejection if feasible else recall)
            if best_coarse is None or key > best_coarse[0]:
                best_coarse = (key, (int(max_splits), float(ratio)), tree)

    coarse_splits, coarse_ratio = best_coarse[1]
    coarse_val_conf = best_coarse[2].predict_rows(xv)
    pass_mask = coarse_val_conf > 0.5

    fine_record = []
    best_fine = None  # (key, params)
    for n_trees in grids.fine_n_trees:
        for max_splits in grids.fine_max_splits:
            forest = train_forest(xt, yt, n_trees=int(n_trees), max_splits=int(max_splits),
                                  rng_seed=rng_seed)
            conf = forest.predict_rows(xv)
            pred_pos = (conf > 0.5) & pass_mask
            tp = int(np.count_nonzero(pred_pos & val_pos))
            fp = int(np.count_nonzero(pred_pos & val_neg))
            precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
            recall = (tp / int(np.count_nonzero(val_pos & pass_mask))
                      if np.count_nonzero(val_pos & pass_mask) > 0 else 0.0)
            fine_record.append({
                "n_trees": int(n_trees), "max_splits": int(max_splits),
                "precision": precision, "recall": recall,
            })
            key = (precision, recall)
            if best_fine is None or key > best_fine[0]:
                best_fine = (key, (int(n_trees), int(max_splits)))

    fine_trees, fine_splits = best_fine[1]

    # final models on the complete dataset with the winning hyperparameters
    coarse = train_tree(x, y, max_splits=coarse_splits,
                        cost_matrix=_cost_from_ratio(coarse_ratio), rng_seed=rng_seed)
    fine = train_forest(x, y, n_trees=fine_trees, max_splits=fine_splits, rng_seed=rng_seed)

    metadata = {
        "rng_seed": rng_seed,
        "n_train": int(train_idx.size),
        "n_val": int(val_idx.size),
        "grid_search": {
            "coarse": coarse_record,
            "fine": fine_record,
            "winner": {
                "coarse_max_splits": coarse_splits,
                "coarse_cost_ratio": coarse_ratio,
                "fine_n_trees": fine_trees,
                "fine_max_splits": fine_splits,
            },
        },
    }
    return MatcherModel(coarse=coarse, fine=fine, p=dataset.p, q=dataset.q, metadata=metadata)


# ---------------------------------------------------------------------------
# CDM1 model file: header, coarse tree, forest (pre-order node lists),
# JSON trailer with the grid-search record.
# ---------------------------------------------------------------------------

_CDM_MAGIC = b"CDM1"


def _tree_blob(tree: DecisionTree) -> bytes:
    parts = [struct.pack("<III", tree.n_features, tree.max_splits, tree.n_nodes)]
    parts.append(struct.pack("<4d", *tree.cost_matrix.reshape(4)))

    def walk(i: int):
        if tree.is_leaf[i]:
            parts.append(struct.pack("<BdQ", 0, float(tree.fraction[i]), int(tree.count[i])))
        else:
            parts.append(struct.pack("<BId", 1, int(tree.feature[i]), float(tree.threshold[i])))
            walk(int(tree.left[i]))
            walk(int(tree.right[i]))

    walk(0)
    return b"".join(parts)


def _tree_from_blob(data: bytes, offset: int):
    n_features, max_splits, n_nodes = struct.unpack_from("<III", data, offset)
    offset += 12
    cost = np.array(struct.unpack_from("<4d", data, offset)).reshape(2, 2)
    offset += 32

    feature = np.zeros(n_nodes, dtype=np.int64)
    threshold = np.zeros(n_nodes, dtype=np.float64)
    left = np.full(n_nodes, -1, dtype=np.int64)
    right = np.full(n_nodes, -1, dtype=np.int64)
    fraction = np.zeros(n_nodes, dtype=np.float64)
    count = np.zeros(n_nodes, dtype=np.int64)
    is_leaf = np.ones(n_nodes, dtype=bool)

    pos = [offset]
    next_id = [0]

    def read_node() -> int:
        node_id = next_id[0]
        next_id[0] += 1
        if node_id >= n_nodes:
            raise ParseError("model tree node count exceeds header")
        kind = data[pos[0]]
        pos[0] += 1
        if kind == 0:
            frac, cnt = struct.unpack_from("<dQ", data, pos[0])
            pos[0] += 16
            fraction[node_id] = frac
            count[node_id] = cnt
        elif kind == 1:
            f, t = struct.unpack_from("<Id", data, pos[0])
            pos[0] += 12
            feature[node_id] = f
            threshold[node_id] = t
            is_leaf[node_id] = False
            left[node_id] = read_node()
            right[node_id] = read_node()
        else:
            raise ParseError(f"bad node kind {kind}")
        return node_id

    read_node()
    if next_id[0] != n_nodes:
        raise ParseError("model tree node count mismatch")
    tree = DecisionTree(n_features, max_splits, cost, feature, threshold,
                        left, right, fraction, count, is_leaf)
    return tree, pos[0]


def save_model(model: MatcherModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CDM_MAGIC)
        fh.write(struct.pack("<II", model.p, model.q))
        fh.write(_tree_blob(model.coarse))
        fine = model.fine
        fh.write(struct.pack("<IIQB", fine.n_trees, fine.features_per_split,
                             fine.base_seed, 1 if fine.bootstrap else 0))
        fh.write(fine.seeds.astype("<u8").tobytes())
        for tree in fine.trees:
            fh.write(_tree_blob(tree))
        fh.write(json.dumps(model.metadata, sort_keys=True).encode("utf-8"))


def load_model(path) -> MatcherModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CDM_MAGIC:
        raise ParseError(f"{path}: bad magic, expected CDM1")
    p, q = struct.unpack_from("<II", data, 4)
    coarse, offset = _tree_from_blob(data, 12)
    n_trees, fps, base_seed, bootstrap = struct.unpack_from("<IIQB", data, offset)
    offset += 17
    seeds = np.frombuffer(data[offset:offset + 8 * n_trees], dtype="<u8").copy()
    offset += 8 * n_trees
    trees = []
    for _ in range(n_trees):
        tree, offset = _tree_from_blob(data, offset)
        trees.append(tree)
    metadata = {}
    if offset < len(data):
        try:
            metadata = json.loads(data[offset:].decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ParseError(f"{path}: bad metadata trailer: {exc}") from exc
    fine = RandomForest(trees, coarse.n_features, fps, base_seed, seeds, bool(bootstrap))
    return MatcherModel(coarse=coarse, fine=fine, p=p, q=q, metadata=metadata)
