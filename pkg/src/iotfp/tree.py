"""Binary CART classifier with Gini impurity and a leaf-count cap.

Growth is best-first: the leaf whose split removes the most weighted
impurity is expanded next, until ``max_leaves`` is reached or no split
helps. Ties go to the lower feature index, then the lower threshold.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

MAX_LEAVES = 500
_TIE = 1e-12


class TreeError(ValueError):
    pass


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise TreeError("gini impurity of an empty node is undefined")
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass
class TreeNode:
    counts: tuple[int, int]
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def label(self) -> int:
        # majority class; a tie predicts the negative class
        return 1 if self.counts[1] > self.counts[0] else 0


class DecisionTree:
    def __init__(self, root: TreeNode, n_features: int):
        self.root = root
        self.n_features = n_features
        self._compile()

    def _compile(self):
        nodes = list(self.iter_nodes())
        ids = {id(n): i for i, n in enumerate(nodes)}
        self._feature = np.array([n.feature for n in nodes], dtype=np.int64)
        self._threshold = np.array([n.threshold for n in nodes], dtype=np.float64)
        self._left = np.array([ids[id(n.left)] if n.left else -1 for n in nodes], dtype=np.int64)
        self._right = np.array([ids[id(n.right)] if n.right else -1 for n in nodes], dtype=np.int64)
        self._label = np.array([n.label for n in nodes], dtype=np.int64)

    def iter_nodes(self):
        """Nodes in pre-order."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.iter_nodes() if n.is_leaf]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    @property
    def depth(self) -> int:
        def _d(n):
            return 0 if n.is_leaf else 1 + max(_d(n.left), _d(n.right))
        return _d(self.root)

    def predict(self, v) -> int:
        v = np.asarray(v)
        if v.shape != (self.n_features,):
            raise TreeError(f"expected {self.n_features} features, got shape {v.shape}")
        node = self.root
        while not node.is_leaf:
            node = node.left if v[node.feature] <= node.threshold else node.right
        return node.label

    def predict_many(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise TreeError(f"expected (n, {self.n_features}) features, got {X.shape}")
        idx = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            internal = self._left[idx] >= 0
            if not internal.any():
                break
            r, node = rows[internal], idx[internal]
            go_left = X[r, self._feature[node]] <= self._threshold[node]
            idx[r] = np.where(go_left, self._left[node], self._right[node])
        return self._label[idx]

    def to_nodes(self) -> list[dict]:
        nodes = list(self.iter_nodes())
        ids = {id(n): i for i, n in enumerate(nodes)}
        out = []
        for i, n in enumerate(nodes):
            if n.is_leaf:
                out.append({"id": i, "kind": "leaf", "feature": None, "threshold": None,
                            "left": None, "right": None, "label": n.label,
                            "counts": list(n.counts)})
            else:
                out.append({"id": i, "kind": "split", "feature": n.feature,
                            "threshold": n.threshold, "left": ids[id(n.left)],
                            "right": ids[id(n.right)], "label": n.label,
                            "counts": list(n.counts)})
        return out

    @classmethod
    def from_nodes(cls, nodes: list[dict], n_features: int) -> "DecisionTree":
        built: dict[int, TreeNode] = {}
        by_id = {int(d["id"]): d for d in nodes}
        for nid in sorted(by_id, reverse=True):
            d = by_id[nid]
            counts = tuple(int(c) for c in d["counts"])
            if d["kind"] == "leaf":
                built[nid] = TreeNode(counts)
            elif d["kind"] == "split":
                built[nid] = TreeNode(counts, int(d["feature"]), float(d["threshold"]),
                                      built[int(d["left"])], built[int(d["right"])])
            else:
                raise TreeError(f"unknown node kind {d['kind']!r}")
        if 0 not in built:
            raise TreeError("tree has no root node")
        return cls(built[0], n_features)


def _best_split(X: np.ndarray, y: np.ndarray):
    """Best (decrease, feature, threshold) for one node, or None when no split helps."""
    n = len(y)
    pos = int(y.sum())
    parent = 1.0 - ((pos / n) ** 2 + ((n - pos) / n) ** 2)
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        cum_pos = np.cumsum(y[order])
        # split after position i when xs[i] < xs[i+1]
        cut = np.flatnonzero(xs[:-1] < xs[1:])
        if cut.size == 0:
            continue
        n_l = (cut + 1).astype(np.float64)
        p_l = cum_pos[cut].astype(np.float64)
        n_r = n - n_l
        p_r = pos - p_l
        # n * weighted child impurity = sum over children of (n_c - (p_c^2 + q_c^2) / n_c)
        child = (n_l - (p_l ** 2 + (n_l - p_l) ** 2) / n_l
                 + n_r - (p_r ** 2 + (n_r - p_r) ** 2) / n_r)
        dec = parent - child / n
        top = dec.max()
        i = int(np.flatnonzero(dec >= top - _TIE)[0])
        if best is None or dec[i] > best[0] + _TIE:
            thr = (float(xs[cut[i]]) + float(xs[cut[i] + 1])) / 2.0
            best = (float(dec[i]), j, thr)
    if best is None or best[0] <= _TIE:
        return None
    return best


def train_tree(X, y, max_leaves: int = MAX_LEAVES) -> DecisionTree:
    """Fit a binary CART tree on feature rows ``X`` and 0/1 labels ``y``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise TreeError("training needs a non-empty 2-D sample matrix")
    if len(y) != len(X) or not np.isin(y, (0, 1)).all():
        raise TreeError("labels must be 0/1, one per sample")
    if max_leaves < 1:
        raise TreeError("max_leaves must be >= 1")
    n_total = len(y)

    def make(idx):
        pos = int(y[idx].sum())
        return TreeNode((len(idx) - pos, pos))

    root = make(np.arange(n_total))
    heap = []
    counter = 0

    def push(node, idx):
        nonlocal counter
        if min(node.counts) == 0 or len(idx) < 2:
            return
        split = _best_split(X[idx], y[idx])
        if split is None:
            return
        dec, j, thr = split
        heapq.heappush(heap, (-dec * len(idx) / n_total, counter, node, idx, j, thr))
        counter += 1

    push(root, np.arange(n_total))
    leaves = 1
    while heap and leaves < max_leaves:
        _, _, node, idx, j, thr = heapq.heappop(heap)
        mask = X[idx, j] <= thr
        li, ri = idx[mask], idx[~mask]
        node.feature, node.threshold = j, thr
        node.left, node.right = make(li), make(ri)
        leaves += 1
        push(node.left, li)
        push(node.right, ri)
    return DecisionTree(root, X.shape[1])


def predict(tree: DecisionTree, v) -> int:
    return tree.predict(v)
