"""Random-forest classifier (bagged Gini trees) with impurity-based feature importance."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DataError, ModelFormatError, ModelVersionError, ShapeError
from .labels import FEATURES, TARGETS, QoeGear, Sample

MODEL_FORMAT = "dai-forest"
MODEL_VERSION = 1
_MIN_DECREASE = 1e-12


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 2


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf holding class ``counts[i]``."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)

    def _add(self, counts: Sequence[int]) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([int(c) for c in counts])
        return len(self.feature) - 1

    @property
    def n_splits(self) -> int:
        return sum(f >= 0 for f in self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows, np.where(inner, f, 0)] <= threshold[node]
            node = np.where(inner, np.where(go_left, left[node], right[node]), node)

    def votes(self, X: np.ndarray) -> np.ndarray:
        """Class index voted by this tree for each row (ties go to the lower class index)."""
        leaf_class = np.array([int(np.argmax(c)) if f < 0 else -1 for f, c in zip(self.feature, self.counts)])
        return leaf_class[self.apply(X)]

    def to_json(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"counts": self.counts[node]}
        return {"feature": self.feature[node], "threshold": self.threshold[node],
                "left": self.to_json(self.left[node]), "right": self.to_json(self.right[node])}

    @classmethod
    def from_json(cls, doc: dict) -> "Tree":
        tree = cls()

        def walk(d: dict) -> int:
            if "counts" in d:
                return tree._add(d["counts"])
            i = tree._add([])
            tree.feature[i] = int(d["feature"])
            tree.threshold[i] = float(d["threshold"])
            tree.left[i] = walk(d["left"])
            tree.right[i] = walk(d["right"])
            return i

        walk(doc)
        return tree


@dataclass
class RandomForestModel:
    target: str
    classes: list[QoeGear]
    params: ForestParams
    seed: int
    trees: list[Tree]
    feature_importances: list[float]
    features: tuple[str, ...] = FEATURES

    @property
    def n_features(self) -> int:
        return len(self.features)

    def _matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ShapeError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def vote_counts(self, X) -> np.ndarray:
        X = self._matrix(X)
        counts = np.zeros((X.shape[0], len(self.classes)), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            np.add.at(counts, (rows, tree.votes(X)), 1)
        return counts

    def predict_many(self, X) -> list[QoeGear]:
        # classes ascend by gear, so argmax's first-maximum rule resolves ties downward
        return [self.classes[i] for i in np.argmax(self.vote_counts(X), axis=1)]

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "target": self.target,
            "features": list(self.features),
            "classes": [c.name for c in self.classes],
            "params": asdict(self.params),
            "seed": self.seed,
            "feature_importances": self.feature_importances,
            "trees": [t.to_json() for t in self.trees],
        }


def predict(model: RandomForestModel, features: Sequence[float]) -> QoeGear:
    if len(features) != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {len(features)}")
    return model.predict_many([features])[0]


def _gini_from_counts(counts: np.ndarray, n: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
    return 1.0 - np.nansum(p * p, axis=-1)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, feats: np.ndarray,
                min_leaf: int) -> tuple[int, float, float] | None:
    """Lowest weighted child Gini among ``feats``: (feature, threshold, weighted impurity * n)."""
    n = y.size
    best: tuple[int, float, float] | None = None
    onehot = np.eye(n_classes, dtype=np.int64)
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(onehot[y[order]], axis=0)[:-1]
        n_left = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        right = left[-1] + onehot[y[order[-1]]] - left
        n_right = n - n_left
        cost = n_left * _gini_from_counts(left, n_left) + n_right * _gini_from_counts(right, n_right)
        cost = np.where(valid, cost, np.inf)
        i = int(np.argmin(cost))
        if best is None or cost[i] < best[2]:
            thr = (xs[i] + xs[i + 1]) / 2.0
            if not xs[i] <= thr < xs[i + 1]:
                thr = float(xs[i])
            best = (int(f), float(thr), float(cost[i]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams,
              rng: np.random.Generator, importances: np.ndarray) -> Tree:
    tree = Tree()
    n_feats = X.shape[1]
    m = math.ceil(math.sqrt(n_feats))

    def build(idx: np.ndarray, depth: int) -> int:
        yy = y[idx]
        counts = np.bincount(yy, minlength=n_classes)
        node = tree._add(counts)
        n = idx.size
        if depth >= params.max_depth or n < 2 * params.min_samples_leaf or np.count_nonzero(counts) <= 1:
            return node
        feats = rng.choice(n_feats, size=m, replace=False)
        split = _best_split(X[idx], yy, n_classes, feats, params.min_samples_leaf)
        if split is None:
            return node
        f, thr, cost = split
        decrease = n * float(_gini_from_counts(counts[None, :], np.array([n]))[0]) - cost
        if decrease <= _MIN_DECREASE:
            return node
        importances[f] += decrease
        go_left = X[idx, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = build(idx[go_left], depth + 1)
        tree.right[node] = build(idx[~go_left], depth + 1)
        return node

    build(np.arange(y.size), 0)
    return tree


def train_forest(dataset: Sequence[Sample], target: str, params: ForestParams | None = None,
                 seed: int = 0) -> RandomForestModel:
    """Bagged Gini trees, one independent RNG stream per tree index."""
    if target not in TARGETS:
        raise DataError(f"unknown target {target!r}; expected one of {TARGETS}")
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    params = params or ForestParams()
    X = np.array([s.features for s in dataset], dtype=float)
    if not np.isfinite(X).all():
        raise DataError("dataset contains non-finite feature values")
    labels = [s.label.of(target) for s in dataset]
    classes = sorted(set(labels))
    if len(classes) < 2:
        warnings.warn(f"only one {target} gear ({classes[0].name}) in the data; the model is trivial",
                      stacklevel=2)
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[c] for c in labels], dtype=np.int64)
    n = y.size
    total = np.zeros(X.shape[1])
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng([seed, t])
        boot = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[boot], y[boot], len(classes), params, rng, total))
    s = total.sum()
    importances = [float(v / s) for v in total] if s > 0 else [0.0] * X.shape[1]
    return RandomForestModel(target, classes, params, seed, trees, importances)


def serialize_model(model: RandomForestModel) -> bytes:
    return (json.dumps(model.to_json(), separators=(",", ":")) + "\n").encode()


def load_model(data: bytes | str) -> RandomForestModel:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model stream is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a forest model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelVersionError(f"model version {doc.get('version')} is not supported (want {MODEL_VERSION})")
    try:
        return RandomForestModel(
            target=doc["target"],
            classes=[QoeGear[c] for c in doc["classes"]],
            params=ForestParams(**doc["params"]),
            seed=int(doc["seed"]),
            trees=[Tree.from_json(t) for t in doc["trees"]],
            feature_importances=[float(v) for v in doc["feature_importances"]],
            features=tuple(doc["features"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model: {exc}") from exc
