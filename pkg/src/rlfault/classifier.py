"""Decision trees and a random forest over binary presence features.

Splits test a single feature for presence (right branch) versus absence
(left branch) and are chosen by Gini impurity reduction, ties broken toward
the lowest feature index. Everything is deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import ParamsMixin, check_binary_matrix, check_labels, check_rng, clone
from .store import read_json_artifact, write_json_artifact


def gini_impurity(pos: float, total: float) -> float:
    if total == 0:
        return 0.0
    p = pos / total
    return 2.0 * p * (1.0 - p)


class DecisionTree(ParamsMixin):
    """Binary-feature CART-style classifier.

    Nodes are stored as a preorder list of dicts: internal nodes carry
    ``{"feature", "left", "right"}`` (left = feature absent), leaves carry
    ``{"counts", "pred", "p1"}``.
    """

    def __init__(self, max_depth=None, min_leaf=1, max_features=None, random_state=None):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.random_state = random_state

    def fit(self, X, y):
        X = check_binary_matrix(X)
        y = check_labels(y, X.shape[0])
        if X.shape[0] == 0:
            raise ValueError("cannot fit a tree on zero rows")
        rng = check_rng(self.random_state)
        self.n_features_ = X.shape[1]
        self.nodes_ = []
        # Explicit stack: deep trees on wide feature sets would overflow the
        # recursion limit. Children are patched in after allocation.
        stack = [(np.arange(X.shape[0]), 0, None, None)]
        while stack:
            idx, depth, parent, side = stack.pop()
            node_id = len(self.nodes_)
            if parent is not None:
                self.nodes_[parent][side] = node_id
            split = self._best_split(X, y, idx, depth, rng)
            if split is None:
                self.nodes_.append(self._leaf(y, idx))
                continue
            feature, left_idx, right_idx = split
            self.nodes_.append({"feature": int(feature), "left": -1, "right": -1})
            stack.append((right_idx, depth + 1, node_id, "right"))
            stack.append((left_idx, depth + 1, node_id, "left"))
        return self

    def _leaf(self, y, idx):
        pos = int(y[idx].sum())
        total = int(len(idx))
        # Majority class; exact tie goes to the lowest class label.
        pred = 1 if pos * 2 > total else 0
        return {"counts": [total - pos, pos], "pred": pred, "p1": pos / total}

    def _best_split(self, X, y, idx, depth, rng):
        total = len(idx)
        pos = int(y[idx].sum())
        if pos == 0 or pos == total:
            return None
        if self.max_depth is not None and depth >= self.max_depth:
            return None
        if total < 2 * self.min_leaf:
            return None

        if self.max_features is None or self.max_features >= self.n_features_:
            feats = np.arange(self.n_features_)
        else:
            feats = np.sort(
                rng.choice(self.n_features_, size=self.max_features, replace=False)
            )

        sub = X[idx][:, feats]
        n_right = sub.sum(axis=0, dtype=np.int64)
        pos_right = y[idx] @ sub.astype(np.int64)
        n_left = total - n_right
        pos_left = pos - pos_right

        valid = (n_left >= self.min_leaf) & (n_right >= self.min_leaf)
        if not valid.any():
            return None
        with np.errstate(invalid="ignore", divide="ignore"):
            p_l = np.where(n_left > 0, pos_left / n_left, 0.0)
            p_r = np.where(n_right > 0, pos_right / n_right, 0.0)
        weighted = (
            n_left * 2.0 * p_l * (1.0 - p_l) + n_right * 2.0 * p_r * (1.0 - p_r)
        ) / total
        gain = np.where(valid, gini_impurity(pos, total) - weighted, -np.inf)
        best = int(np.argmax(gain))  # first max = lowest feature index
        if gain[best] <= 1e-12:
            return None
        feature = int(feats[best])
        mask = X[idx, feature] == 1
        return feature, idx[~mask], idx[mask]

    def _route(self, x) -> int:
        node_id = 0
        while "feature" in self.nodes_[node_id]:
            node = self.nodes_[node_id]
            node_id = node["right"] if x[node["feature"]] == 1 else node["left"]
        return node_id

    def predict_proba(self, X) -> np.ndarray:
        X = check_binary_matrix(X, self.n_features_)
        p1 = np.array([self.nodes_[self._route(row)]["p1"] for row in X])
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        X = check_binary_matrix(X, self.n_features_)
        return np.array([self.nodes_[self._route(row)]["pred"] for row in X])


class FaultForest(ParamsMixin):
    """Bagged ensemble of decision trees predicting fault probability.

    Each tree trains on a bootstrap resample of the rows (same size as the
    input, drawn with replacement) and restricts every split to a random
    feature subset of size ``max_features`` ("sqrt" = ceil(sqrt(n_features))).
    The forest's fault probability is the mean of the trees' leaf fault-class
    probabilities, so it is invariant to tree order.
    """

    def __init__(
        self,
        n_trees=100,
        max_features="sqrt",
        max_depth=None,
        min_leaf=1,
        bootstrap=True,
        random_state=None,
    ):
        self.n_trees = n_trees
        self.max_features = max_features
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _features_per_split(self, n_features):
        if self.max_features is None:
            return None
        if self.max_features == "sqrt":
            return int(np.ceil(np.sqrt(n_features)))
        return int(self.max_features)

    def fit(self, X, y):
        if self.n_trees < 1:
            raise ValueError("forest needs at least one tree")
        X = check_binary_matrix(X)
        y = check_labels(y, X.shape[0])
        if X.shape[0] == 0:
            raise ValueError("cannot fit a forest on zero rows")
        self.n_features_ = X.shape[1]
        m = self._features_per_split(self.n_features_)
        seeds = np.random.SeedSequence(self.random_state).spawn(self.n_trees)
        self.trees_ = []
        for seq in seeds:
            rng = np.random.default_rng(seq)
            if self.bootstrap:
                rows = rng.integers(0, X.shape[0], size=X.shape[0])
            else:
                rows = np.arange(X.shape[0])
            tree = DecisionTree(
                max_depth=self.max_depth,
                min_leaf=self.min_leaf,
                max_features=m,
                random_state=rng,
            )
            tree.fit(X[rows], y[rows])
            self.trees_.append(tree)
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = check_binary_matrix(X, self.n_features_)
        p1 = np.mean([t.predict_proba(X)[:, 1] for t in self.trees_], axis=0)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)


def predict_fault_probability(forest: FaultForest, x) -> float:
    """Probability that a single encoded episode is functional-faulty."""
    return float(forest.predict_proba(np.asarray(x).reshape(1, -1))[0, 1])


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return float(np.mean(y_true == y_pred)) if len(y_true) else 0.0


def precision_recall_f1(y_true, y_pred, positive=1):
    """Precision/recall/F1 for one class; empty denominators count as 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def stratified_fold_indices(y, k: int, rng) -> list[np.ndarray]:
    """Shuffle each class separately and deal rows round-robin into k folds.

    The deal position carries over between classes so small datasets still
    fill every fold.
    """
    y = np.asarray(y)
    folds = [[] for _ in range(k)]
    dealt = 0
    for label in np.unique(y):
        rows = np.flatnonzero(y == label)
        rows = rows[rng.permutation(len(rows))]
        for row in rows:
            folds[dealt % k].append(int(row))
            dealt += 1
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


@dataclass
class FoldMetrics:
    folds: list[dict]
    medians: dict


def kfold_metrics(X, y, k: int, learner, rng=None) -> FoldMetrics:
    """Stratified k-fold metrics (fault class) for a prototype learner."""
    X = check_binary_matrix(X)
    y = check_labels(y, X.shape[0])
    if k < 2:
        raise ValueError("k must be >= 2")
    if X.shape[0] < k:
        raise ValueError(f"need at least {k} rows for {k} folds")
    rng = check_rng(rng)
    folds = stratified_fold_indices(y, k, rng)
    results = []
    for held_out in folds:
        train = np.setdiff1d(np.arange(X.shape[0]), held_out)
        model = clone(learner).fit(X[train], y[train])
        pred = model.predict(X[held_out])
        prec, rec, f1 = precision_recall_f1(y[held_out], pred)
        results.append(
            {
                "accuracy": accuracy(y[held_out], pred),
                "precision": prec,
                "recall": rec,
                "f1": f1,
            }
        )
    medians = {
        key: float(np.median([fold[key] for fold in results]))
        for key in ("accuracy", "precision", "recall", "f1")
    }
    return FoldMetrics(folds=results, medians=medians)


@dataclass(frozen=True)
class Rule:
    """Conjunction of presence/absence literals read off a root-to-leaf path."""

    literals: tuple[tuple[int, bool], ...]  # (feature id, must be present)
    predicted_class: int
    support: int
    confidence: float

    def matches(self, x) -> bool:
        return all(bool(x[f]) == present for f, present in self.literals)

    def describe(self) -> str:
        if not self.literals:
            return "always"
        parts = [
            (f"s{f}" if present else f"not(s{f})") for f, present in self.literals
        ]
        return " and ".join(parts)


def _leaf_rules(tree: DecisionTree):
    stack = [(0, ())]
    while stack:
        node_id, path = stack.pop()
        node = tree.nodes_[node_id]
        if "feature" in node:
            stack.append((node["left"], path + ((node["feature"], False),)))
            stack.append((node["right"], path + ((node["feature"], True),)))
        else:
            total = node["counts"][0] + node["counts"][1]
            conf = node["counts"][node["pred"]] / total
            yield Rule(path, node["pred"], total, conf)


def extract_rules(tree: DecisionTree, target_class=1) -> list[Rule]:
    """One rule per leaf predicting ``target_class`` (the fault class)."""
    return [r for r in _leaf_rules(tree) if r.predicted_class == target_class]


def extract_all_leaf_rules(tree: DecisionTree) -> list[Rule]:
    return list(_leaf_rules(tree))


def rules_predict(rules, X, default=0) -> np.ndarray:
    """Apply rules as a classifier: first matching rule wins, else default."""
    X = check_binary_matrix(X)
    out = np.full(X.shape[0], default, dtype=np.int64)
    for i, row in enumerate(X):
        for rule in rules:
            if rule.matches(row):
                out[i] = rule.predicted_class
                break
    return out


FOREST_FILE_KIND = "fault-forest"
FOREST_FILE_VERSION = 1


def save_forest(path, forest: FaultForest, meta=None):
    payload = {
        "n_features": forest.n_features_,
        "params": {
            "n_trees": forest.n_trees,
            "max_features": forest.max_features,
            "max_depth": forest.max_depth,
            "min_leaf": forest.min_leaf,
            "bootstrap": forest.bootstrap,
            "random_state": forest.random_state
            if isinstance(forest.random_state, (int, type(None)))
            else None,
        },
        "trees": [t.nodes_ for t in forest.trees_],
    }
    write_json_artifact(path, FOREST_FILE_KIND, FOREST_FILE_VERSION, payload, meta)


def load_forest(path) -> tuple[FaultForest, dict]:
    record = read_json_artifact(path, FOREST_FILE_KIND, FOREST_FILE_VERSION)
    forest = FaultForest(**record["params"])
    forest.n_features_ = record["n_features"]
    forest.trees_ = []
    for nodes in record["trees"]:
        tree = DecisionTree()
        tree.nodes_ = nodes
        tree.n_features_ = record["n_features"]
        forest.trees_.append(tree)
    return forest, record["meta"]
