"""From-scratch CART trees and the two ensemble learners built on them.

``train_forest`` bags Gini-split classification trees; ``train_boosted``
fits second-order (Newton) gradient-boosted regression trees on the logistic
loss, with depth-wise or leaf-wise growth selected by configuration.  Both
learners share one exact greedy splitter over presorted feature indices:
candidate thresholds are midpoints between consecutive distinct values, and
ties in gain break toward the lowest feature index, then lowest threshold,
so training is fully deterministic.

Rows are canonicalized (sorted lexicographically by feature values, then
label) before training, which makes both learners invariant to the order of
the training rows.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import TabularDataset

KIND_FOREST = "forest"
KIND_BOOSTED = "boosted"
GROWTH_DEPTHWISE = "depthwise"
GROWTH_LEAFWISE = "leafwise"


class SchemaMismatchError(ValueError):
    """Feature schema at inference differs from the one the model was trained on."""


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 10
    min_samples_leaf: int = 1
    features_per_split: int = 4  # ceil(sqrt(12))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int | None = 6
    max_leaves: int = 31
    l2_leaf_penalty: float = 1.0
    min_child_hessian: float = 1e-3
    growth: str = GROWTH_DEPTHWISE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.l2_leaf_penalty < 0.0:
            raise ValueError("l2_leaf_penalty must be >= 0")
        if self.min_child_hessian < 0.0:
            raise ValueError("min_child_hessian must be >= 0")
        if self.growth not in (GROWTH_DEPTHWISE, GROWTH_LEAFWISE):
            raise ValueError(f"unknown growth {self.growth!r}")
        if self.growth == GROWTH_DEPTHWISE and self.max_depth is None:
            raise ValueError("depth-wise growth requires max_depth")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")


@dataclass(frozen=True)
class Tree:
    """Flat-array binary tree: feature < 0 marks a leaf; x goes left iff x[f] <= threshold."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int32)
        while True:
            f = self.feature[idx]
            active = np.nonzero(f >= 0)[0]
            if len(active) == 0:
                break
            node = idx[active]
            go_left = X[active, f[active]] <= self.threshold[node]
            idx[active] = np.where(go_left, self.left[node], self.right[node])
        return self.value[idx]

    @property
    def used_features(self) -> np.ndarray:
        return np.unique(self.feature[self.feature >= 0])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.array(d["feature"], dtype=np.int32),
            threshold=np.array(d["threshold"], dtype=np.float64),
            left=np.array(d["left"], dtype=np.int32),
            right=np.array(d["right"], dtype=np.int32),
            value=np.array(d["value"], dtype=np.float64),
        )


def schema_fingerprint(feature_names: tuple[str, ...]) -> str:
    return hashlib.sha256("\x1f".join(feature_names).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EnsembleModel:
    """Trained ensemble; immutable and safe for concurrent inference.

    For the boosted kind, leaf values already include the learning rate and
    the margin is ``base_score + sum(tree values)`` on the log-odds scale.
    For the forest kind, the margin is the mean leaf class frequency, i.e.
    already a probability, and base_score is 0.
    """

    kind: str
    trees: tuple[Tree, ...]
    base_score: float
    feature_names: tuple[str, ...]
    config: ForestConfig | BoostConfig = field(repr=False)
    train_loss: tuple[float, ...] = ()

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.feature_names)

    def _check_schema(self, X: np.ndarray) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float64)
        single = arr.ndim == 1
        rows = arr[None, :] if single else arr
        if rows.shape[1] != len(self.feature_names):
            raise SchemaMismatchError(
                f"model expects {len(self.feature_names)} features "
                f"({schema_fingerprint(self.feature_names)}), got {rows.shape[1]}"
            )
        return rows

    def margin(self, X: np.ndarray):
        """Raw model output: log-odds (boosted) or probability (forest)."""
        single = np.asarray(X).ndim == 1
        rows = self._check_schema(X)
        acc = np.zeros(len(rows))
        for tree in self.trees:
            acc += tree.predict(rows)
        if self.kind == KIND_FOREST:
            out = acc / len(self.trees)
        else:
            out = acc + self.base_score
        return float(out[0]) if single else out

    def predict_proba(self, X: np.ndarray):
        m = self.margin(X)
        if self.kind == KIND_FOREST:
            return m
        return 1.0 / (1.0 + np.exp(-m))

    def predict(self, X: np.ndarray, threshold: float = 0.5):
        proba = self.predict_proba(X)
        if np.asarray(X).ndim == 1:
            return int(proba > threshold)
        return (proba > threshold).astype(np.uint8)

    def to_dict(self) -> dict:
        cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.config).items()}
        return {
            "kind": self.kind,
            "feature_names": list(self.feature_names),
            "fingerprint": self.fingerprint,
            "base_score": self.base_score,
            "config_kind": type(self.config).__name__,
            "config": cfg,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleModel":
        cfg_cls = {"ForestConfig": ForestConfig, "BoostConfig": BoostConfig}[d["config_kind"]]
        config = cfg_cls(**d["config"])
        model = cls(
            kind=d["kind"],
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            base_score=float(d["base_score"]),
            feature_names=tuple(d["feature_names"]),
            config=config,
            train_loss=tuple(d["train_loss"]),
        )
        if d.get("fingerprint") and d["fingerprint"] != model.fingerprint:
            raise SchemaMismatchError("stored fingerprint does not match feature names")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row permutation sorting lexicographically by features, then label."""
    keys = (y,) + tuple(X.T[::-1])
    return np.lexsort(keys)


class _NodeState:
    __slots__ = ("node_id", "order", "depth", "best")

    def __init__(self, node_id: int, order: np.ndarray, depth: int, best: tuple | None):
        self.node_id = node_id
        self.order = order
        self.depth = depth
        self.best = best  # (gain, feature, threshold, split_pos)


class _TreeBuilder:
    """Grows one tree over presorted per-feature index arrays.

    ``scan(vals, rows)`` returns (gain, split_pos, threshold) for the best
    admissible boundary of one feature, or None.  ``leaf_value(rows)`` gives
    the prediction stored at a leaf.
    """

    def __init__(self, X: np.ndarray, scan, leaf_value, candidate_features):
        self.X = X
        self.scan = scan
        self.leaf_value = leaf_value
        self.candidate_features = candidate_features  # callable -> sorted feature indices
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.leaf_rows: dict[int, np.ndarray] = {}
        self._scratch = np.zeros(len(X), dtype=bool)

    def _new_leaf(self, rows: np.ndarray) -> int:
        node_id = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(self.leaf_value(rows)))
        self.leaf_rows[node_id] = rows
        return node_id

    def _best_split(self, order: np.ndarray) -> tuple | None:
        best = None
        for f in self.candidate_features():
            idx = order[f]
            vals = self.X[idx, f]
            res = self.scan(vals, idx)
            if res is None:
                continue
            gain, pos, thr = res
            if best is None or gain > best[0]:
                best = (gain, f, thr, pos)
        return best

    def _split(self, state: _NodeState) -> tuple[_NodeState, _NodeState]:
        gain, f, thr, pos = state.best
        order = state.order
        left_rows = order[f][: pos + 1]
        n_left = pos + 1
        n_right = order.shape[1] - n_left
        mark = self._scratch
        mark[left_rows] = True
        left_order = np.empty((order.shape[0], n_left), dtype=order.dtype)
        right_order = np.empty((order.shape[0], n_right), dtype=order.dtype)
        for j in range(order.shape[0]):
            row = order[j]
            sel = mark[row]
            left_order[j] = row[sel]
            right_order[j] = row[~sel]
        mark[left_rows] = False

        node = state.node_id
        left_id = self._new_leaf(left_order[0])
        right_id = self._new_leaf(right_order[0])
        self.feature[node] = int(f)
        self.threshold[node] = float(thr)
        self.left[node] = left_id
        self.right[node] = right_id
        del self.leaf_rows[node]
        left_state = _NodeState(left_id, left_order, state.depth + 1, self._best_split(left_order))
        right_state = _NodeState(right_id, right_order, state.depth + 1, self._best_split(right_order))
        return left_state, right_state

    def grow_depthwise(self, root_order: np.ndarray, max_depth: int) -> None:
        root = _NodeState(self._new_leaf(root_order[0]), root_order, 0, None)
        if max_depth >= 1:
            root.best = self._best_split(root_order)
        queue = [root]
        while queue:
            state = queue.pop()
            if state.best is None or state.depth >= max_depth:
                continue
            left_state, right_state = self._split(state)
            queue.append(right_state)
            queue.append(left_state)

    def grow_leafwise(self, root_order: np.ndarray, max_leaves: int, max_depth: int | None) -> None:
        root = _NodeState(self._new_leaf(root_order[0]), root_order, 0, self._best_split(root_order))
        counter = 0
        heap: list[tuple[float, int, _NodeState]] = []
        if root.best is not None:
            heap.append((-root.best[0], counter, root))
        n_leaves = 1
        while heap and n_leaves < max_leaves:
            _, _, state = heapq.heappop(heap)
            if max_depth is not None and state.depth >= max_depth:
                continue
            left_state, right_state = self._split(state)
            n_leaves += 1
            for child in (left_state, right_state):
                if child.best is not None:
                    counter += 1
                    heapq.heappush(heap, (-child.best[0], counter, child))

    def finish(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            value=np.array(self.value, dtype=np.float64),
        )


def _presort(X: np.ndarray) -> np.ndarray:
    return np.vstack([np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]).astype(np.int64)


def _boost_scan(g: np.ndarray, h: np.ndarray, lam: float, min_child_hessian: float):
    """Split scorer maximizing the second-order gain; rejects non-positive gains."""

    def scan(vals: np.ndarray, rows: np.ndarray):
        m = len(vals)
        if m < 2:
            return None
        gs = g[rows]
        hs = h[rows]
        GL = np.cumsum(gs)[:-1]
        HL = np.cumsum(hs)[:-1]
        G = GL[-1] + gs[-1]
        H = HL[-1] + hs[-1]
        GR = G - GL
        HR = H - HL
        valid = (vals[1:] > vals[:-1]) & (HL >= min_child_hessian) & (HR >= min_child_hessian)
        if not valid.any():
            return None
        gains = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam))
        gains[~valid] = -np.inf
        pos = int(np.argmax(gains))
        if gains[pos] <= 0.0:
            return None
        return float(gains[pos]), pos, 0.5 * (vals[pos] + vals[pos + 1])

    return scan


def _gini_scan(y: np.ndarray, min_samples_leaf: int):
    """Split scorer minimizing weighted child Gini impurity.

    Pure nodes are never scanned; zero-gain splits of impure nodes are
    allowed (classic CART), which is what lets a two-level tree fit XOR.
    """

    def scan(vals: np.ndarray, rows: np.ndarray):
        m = len(vals)
        if m < 2 * min_samples_leaf:
            return None
        ys = y[rows].astype(np.float64)
        pos_total = ys.sum()
        if pos_total == 0.0 or pos_total == m:
            return None
        nL = np.arange(1, m, dtype=np.float64)
        posL = np.cumsum(ys)[:-1]
        nR = m - nL
        posR = pos_total - posL
        valid = (vals[1:] > vals[:-1]) & (nL >= min_samples_leaf) & (nR >= min_samples_leaf)
        if not valid.any():
            return None
        child = posL * (nL - posL) / nL + posR * (nR - posR) / nR
        parent = pos_total * (m - pos_total) / m
        gains = 2.0 * (parent - child) / m
        gains[~valid] = -np.inf
        pos = int(np.argmax(gains))
        if not np.isfinite(gains[pos]):
            return None
        return float(gains[pos]), pos, 0.5 * (vals[pos] + vals[pos + 1])

    return scan


def _require_two_classes(y: np.ndarray) -> None:
    pos = int(y.sum())
    if pos == 0 or pos == len(y):
        raise ValueError("training set must contain both classes")


def train_forest(train: TabularDataset, config: ForestConfig) -> EnsembleModel:
    """Bagged CART forest; prediction is the mean leaf class-1 frequency.

    Each tree draws a bootstrap resample and, at every node, a fresh random
    subset of ``features_per_split`` candidate features.  With bootstrap
    disabled, all per-tree randomness collapses to the same stream, so every
    tree is identical.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    _require_two_classes(train.y)
    perm = _canonical_order(train.X, train.y)
    X = train.X[perm]
    y = train.y[perm].astype(np.float64)
    n, d = X.shape
    k_feats = min(config.features_per_split, d)

    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, t if config.bootstrap else 0])
        if config.bootstrap:
            rows = np.sort(rng.integers(0, n, n))
            Xt, yt = X[rows], y[rows]
        else:
            Xt, yt = X, y

        def candidates(rng=rng):
            if k_feats == d:
                return range(d)
            return sorted(rng.choice(d, size=k_feats, replace=False).tolist())

        builder = _TreeBuilder(Xt, _gini_scan(yt, config.min_samples_leaf), lambda rows, yt=yt: yt[rows].mean(), candidates)
        builder.grow_depthwise(_presort(Xt), config.max_depth)
        trees.append(builder.finish())

    return EnsembleModel(
        kind=KIND_FOREST,
        trees=tuple(trees),
        base_score=0.0,
        feature_names=train.feature_names,
        config=config,
    )


def logistic_loss(margins: np.ndarray, y: np.ndarray) -> float:
    """Mean logistic loss of raw margins against binary labels."""
    m = np.asarray(margins, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


def train_boosted(train: TabularDataset, config: BoostConfig) -> EnsembleModel:
    """Newton-boosted trees on the logistic loss.

    The initial margin is the log-odds of the training base rate.  Each round
    fits a tree to gradients g = p - y and hessians h = p(1 - p); a leaf
    stores -sum(g)/(sum(h) + l2) scaled by the learning rate, and a split is
    kept only when the second-order gain is strictly positive.  The mean
    training loss after every round is recorded on the model.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    _require_two_classes(train.y)
    perm = _canonical_order(train.X, train.y)
    X = train.X[perm]
    y = train.y[perm].astype(np.float64)
    n, d = X.shape

    p0 = y.mean()
    base = float(np.log(p0 / (1.0 - p0)))
    margins = np.full(n, base)
    root_order = _presort(X)
    lam = config.l2_leaf_penalty
    eta = config.learning_rate

    trees = []
    losses = []
    for _ in range(config.n_rounds):
        p = 1.0 / (1.0 + np.exp(-margins))
        g = p - y
        h = p * (1.0 - p)

        def leaf_value(rows, g=g, h=h):
            return -eta * g[rows].sum() / (h[rows].sum() + lam)

        builder = _TreeBuilder(X, _boost_scan(g, h, lam, config.min_child_hessian), leaf_value, lambda: range(d))
        if config.growth == GROWTH_DEPTHWISE:
            builder.grow_depthwise(root_order, config.max_depth)
        else:
            builder.grow_leafwise(root_order, config.max_leaves, config.max_depth)
        tree = builder.finish()
        for node_id, rows in builder.leaf_rows.items():
            margins[rows] += tree.value[node_id]
        trees.append(tree)
        losses.append(logistic_loss(margins, y))

    return EnsembleModel(
        kind=KIND_BOOSTED,
        trees=tuple(trees),
        base_score=base,
        feature_names=train.feature_names,
        config=config,
        train_loss=tuple(losses),
    )
