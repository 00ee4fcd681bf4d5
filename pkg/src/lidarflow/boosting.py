"""Binary gradient-boosted regression trees with logistic loss.

Self-contained replacement for an off-the-shelf booster: exact greedy
axis-aligned splits, second-order leaf values, no subsampling, fully
deterministic for a given input order. Model shape defaults to 100 trees
of maximum depth 3.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedFile, SingleClassData, TruncatedRecord

GBT_MAGIC = b"LFGBT\x00"
GBT_VERSION = 1
LAMBDA = 1.0   # L2 regularization on leaf values


@dataclass
class GbtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_child_weight: float = 1e-3
    max_rows: int = 100_000    # deterministic stride-subsample above this


@dataclass
class Tree:
    """Array-encoded binary tree; feature < 0 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x):
        node = np.zeros(len(x), dtype=np.int64)
        out = np.zeros(len(x))
        active = np.arange(len(x))
        while len(active):
            f = self.feature[node[active]]
            leaf = f < 0
            leaves = active[leaf]
            out[leaves] = self.value[node[leaves]]
            active = active[~leaf]
            if not len(active):
                break
            cur = node[active]
            go_left = x[active, self.feature[cur]] < self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return out

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def n_leaves(self):
        return int((self.feature < 0).sum())


@dataclass
class GbtModel:
    config: GbtConfig
    base_score: float
    trees: list = field(default_factory=list)

    def raw_margin(self, x):
        x = np.asarray(x, dtype=np.float64)
        margin = np.full(len(x), self.base_score)
        for tree in self.trees:
            margin += self.config.learning_rate * tree.predict(x)
        return margin

    def predict_proba(self, x):
        return _sigmoid(self.raw_margin(x))

    def predict(self, x, threshold=0.5):
        return self.predict_proba(x) >= threshold

    def parameter_count(self):
        """Learnable values actually stored: thresholds and leaf values."""
        return sum(t.n_nodes for t in self.trees)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def _best_split(x_sorted_idx, x, grad, hess, rows_mask, min_child_weight):
    """Exact greedy split over all features for one node.

    Returns (gain, feature, threshold) or None. ``x_sorted_idx`` holds a
    global per-feature argsort, filtered per node by ``rows_mask``.
    """
    g_total = grad[rows_mask].sum()
    h_total = hess[rows_mask].sum()
    parent = g_total * g_total / (h_total + LAMBDA)
    best = None
    for f in range(x.shape[1]):
        order = x_sorted_idx[f][rows_mask[x_sorted_idx[f]]]
        xs = x[order, f]
        gl = np.cumsum(grad[order])[:-1]
        hl = np.cumsum(hess[order])[:-1]
        gr = g_total - gl
        hr = h_total - hl
        valid = (xs[1:] != xs[:-1]) & (hl >= min_child_weight) & (hr >= min_child_weight)
        if not valid.any():
            continue
        gain = gl * gl / (hl + LAMBDA) + gr * gr / (hr + LAMBDA) - parent
        gain[~valid] = -np.inf
        k = int(np.argmax(gain))
        if gain[k] <= 1e-12:
            continue
        threshold = 0.5 * (xs[k] + xs[k + 1])
        if best is None or gain[k] > best[0]:
            best = (float(gain[k]), f, float(threshold))
    return best


def _fit_tree(x, grad, hess, x_sorted_idx, max_depth, min_child_weight):
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(rows_mask, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        split = None
        if depth < max_depth:
            split = _best_split(x_sorted_idx, x, grad, hess, rows_mask, min_child_weight)
        if split is None:
            g = grad[rows_mask].sum()
            h = hess[rows_mask].sum()
            value[node] = -g / (h + LAMBDA)
            return node
        _, f, thr = split
        feature[node] = f
        threshold[node] = thr
        go_left = rows_mask & (x[:, f] < thr)
        left[node] = grow(go_left, depth + 1)
        right[node] = grow(rows_mask & ~(x[:, f] < thr), depth + 1)
        return node

    grow(np.ones(len(x), dtype=bool), 0)
    return Tree(
        np.array(feature, dtype=np.int32),
        np.array(threshold),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(value),
    )


def gbt_fit(features, labels, config=None):
    """Fit the boosted ensemble on binary labels (0 = static, 1 = moving)."""
    config = config or GbtConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (n, d) with matching labels")
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassData("training labels contain a single class")
    if len(x) > config.max_rows:
        stride = int(np.ceil(len(x) / config.max_rows))
        x = x[::stride]
        y = y[::stride]
        if len(np.unique(y)) < 2:
            raise SingleClassData("subsampled labels contain a single class")

    prior = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    base = float(np.log(prior / (1 - prior)))
    x_sorted_idx = [np.argsort(x[:, f], kind="stable") for f in range(x.shape[1])]
    margin = np.full(len(x), base)
    trees = []
    for _ in range(config.n_trees):
        p = _sigmoid(margin)
        grad = p - y
        hess = p * (1 - p)
        tree = _fit_tree(x, grad, hess, x_sorted_idx,
                         config.max_depth, config.min_child_weight)
        trees.append(tree)
        margin += config.learning_rate * tree.predict(x)
    return GbtModel(config=config, base_score=base, trees=trees)


# ---------------------------------------------------------------------------
# serialization


def save_gbt(model, path):
    with open(path, "wb") as f:
        f.write(GBT_MAGIC)
        f.write(struct.pack(
            "<IIIddd", GBT_VERSION, len(model.trees), model.config.max_depth,
            model.config.learning_rate, model.config.min_child_weight,
            model.base_score,
        ))
        for tree in model.trees:
            f.write(struct.pack("<I", tree.n_nodes))
            f.write(tree.feature.astype("<i4").tobytes())
            f.write(tree.threshold.astype("<f8").tobytes())
            f.write(tree.left.astype("<i4").tobytes())
            f.write(tree.right.astype("<i4").tobytes())
            f.write(tree.value.astype("<f8").tobytes())


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise TruncatedRecord(f"truncated {what}", offset=f.tell())
    return data


def load_gbt(path):
    with open(path, "rb") as f:
        if f.read(len(GBT_MAGIC)) != GBT_MAGIC:
            raise MalformedFile("bad classifier magic", offset=0)
        fmt = "<IIIddd"
        version, n_trees, depth, lr, mcw, base = struct.unpack(
            fmt, _read_exact(f, struct.calcsize(fmt), "header")
        )
        if version != GBT_VERSION:
            raise MalformedFile(f"unsupported classifier version {version}")
        trees = []
        for _ in range(n_trees):
            (n_nodes,) = struct.unpack("<I", _read_exact(f, 4, "tree header"))
            feature = np.frombuffer(_read_exact(f, 4 * n_nodes, "features"), "<i4")
            thresh = np.frombuffer(_read_exact(f, 8 * n_nodes, "thresholds"), "<f8")
            left = np.frombuffer(_read_exact(f, 4 * n_nodes, "left"), "<i4")
            right = np.frombuffer(_read_exact(f, 4 * n_nodes, "right"), "<i4")
            value = np.frombuffer(_read_exact(f, 8 * n_nodes, "values"), "<f8")
            trees.append(Tree(feature.copy(), thresh.copy(), left.copy(),
                              right.copy(), value.copy()))
    cfg = GbtConfig(n_trees=n_trees, max_depth=depth, learning_rate=lr,
                    min_child_weight=mcw)
    return GbtModel(config=cfg, base_score=base, trees=trees)
