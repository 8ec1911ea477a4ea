"""From-scratch multiclass gradient-boosted trees (softmax objective).

One regression tree per class per round, grown by exact greedy split
search over midpoint candidates with the second-order gain

    Gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda)
                - (G_L+G_R)^2/(H_L+H_R+lambda)] - gamma

and leaf weight -G/(H+lambda). Probabilities are snapshotted once per
round, so all trees of a round share the same gradients' baseline.
Training is fully deterministic: candidates are scanned in ascending
(feature, split) order and only a strictly larger gain displaces the
incumbent, so ties resolve to the lowest feature then lowest split.

Rows route left when feature value < split. Leaf weights are stored
unscaled; the learning rate is applied when accumulating raw scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import CLASS_ORDER
from .errors import ModelFormatError, ValidationError

MODEL_HEADER = "gbdt-model v1"


@dataclass(frozen=True)
class TreeNode:
    feature: int = -1  # -1 marks a leaf
    split: float = 0.0
    left: int = -1
    right: int = -1
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass(frozen=True)
class TrainConfig:
    n_rounds: int
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    max_depth: int = 3
    min_child_weight: float = 1.0
    seed: int = 0  # recorded for provenance; exact greedy draws nothing

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ValidationError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValidationError("learning_rate must be in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValidationError("lambda and gamma must be >= 0")
        if self.max_depth < 0:
            raise ValidationError("max_depth must be >= 0")
        if self.min_child_weight < 0:
            raise ValidationError("min_child_weight must be >= 0")


@dataclass(frozen=True)
class GbdtModel:
    classes: tuple[str, ...]
    n_features: int
    learning_rate: float
    reg_lambda: float
    gamma: float
    max_depth: int
    min_child_weight: float
    base_score: float
    rounds: tuple[tuple[tuple[TreeNode, ...], ...], ...]  # [round][class]

    def __post_init__(self):
        if len(self.classes) < 2 or self.n_features < 1:
            raise ValidationError("model needs >= 2 classes and >= 1 feature")
        for trees in self.rounds:
            if len(trees) != len(self.classes):
                raise ValidationError("every round needs one tree per class")

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


def _grow_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray,
               config: TrainConfig) -> tuple[TreeNode, ...]:
    lam = config.reg_lambda
    nodes: list[TreeNode | None] = []

    def build(idx: np.ndarray, depth: int) -> int:
        pos = len(nodes)
        nodes.append(None)
        g_sub, h_sub = g[idx], h[idx]
        g_sum = float(g_sub.sum())
        h_sum = float(h_sub.sum())
        best = None
        best_gain = 0.0  # only strictly positive gains can split
        if depth < config.max_depth and idx.size >= 2:
            parent = g_sum * g_sum / (h_sum + lam)
            col = X[idx]
            for f in range(X.shape[1]):
                values = np.unique(col[:, f])
                for a, b in zip(values[:-1], values[1:]):
                    split = (a + b) / 2.0
                    left = col[:, f] < split
                    gl = float(g_sub[left].sum())
                    hl = float(h_sub[left].sum())
                    gr, hr = g_sum - gl, h_sum - hl
                    if hl < config.min_child_weight \
                            or hr < config.min_child_weight:
                        continue
                    gain = 0.5 * (gl * gl / (hl + lam)
                                  + gr * gr / (hr + lam) - parent) \
                        - config.gamma
                    if gain > best_gain:
                        best_gain = gain
                        best = (f, split, left)
        if best is None:
            denom = h_sum + lam
            weight = -g_sum / denom if denom > 0 else 0.0
            nodes[pos] = TreeNode(weight=weight)
        else:
            f, split, left = best
            left_id = build(idx[left], depth + 1)
            right_id = build(idx[~left], depth + 1)
            nodes[pos] = TreeNode(f, split, left_id, right_id, 0.0)
        return pos

    build(np.arange(X.shape[0]), 0)
    return tuple(nodes)


def _tree_output(nodes: Sequence[TreeNode], X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    for i, row in enumerate(X):
        node = nodes[0]
        while not node.is_leaf:
            node = nodes[node.left if row[node.feature] < node.split
                         else node.right]
        out[i] = node.weight
    return out


def _softmax(raw: np.ndarray) -> np.ndarray:
    shifted = raw - raw.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _encode_labels(labels, classes) -> np.ndarray:
    index = {c: k for k, c in enumerate(classes)}
    try:
        return np.array([index[lab] for lab in labels], dtype=np.intp)
    except KeyError as exc:
        raise ValidationError(f"label {exc.args[0]!r} outside class set "
                              f"{list(classes)}") from None


def train(features, labels, config: TrainConfig,
          classes: Sequence[str] = CLASS_ORDER,
          base_score: float = 0.0) -> GbdtModel:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError("features must be a non-empty 2-D matrix")
    y = _encode_labels(labels, classes)
    if y.shape[0] != X.shape[0]:
        raise ValidationError("features and labels disagree on row count")
    n, n_classes = X.shape[0], len(classes)
    raw = np.full((n, n_classes), base_score, dtype=np.float64)
    rounds = []
    for _ in range(config.n_rounds):
        p = _softmax(raw)  # one snapshot shared by the round's trees
        trees = []
        for k in range(n_classes):
            g = p[:, k] - (y == k)
            h = p[:, k] * (1.0 - p[:, k])
            tree = _grow_tree(X, g, h, config)
            trees.append(tree)
            raw[:, k] += config.learning_rate * _tree_output(tree, X)
        rounds.append(tuple(trees))
    return GbdtModel(
        classes=tuple(classes), n_features=X.shape[1],
        learning_rate=config.learning_rate, reg_lambda=config.reg_lambda,
        gamma=config.gamma, max_depth=config.max_depth,
        min_child_weight=config.min_child_weight, base_score=base_score,
        rounds=tuple(rounds))


def predict_raw(model: GbdtModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValidationError(
            f"expected rows with {model.n_features} features")
    raw = np.full((X.shape[0], len(model.classes)), model.base_score)
    for trees in model.rounds:
        for k, tree in enumerate(trees):
            raw[:, k] += model.learning_rate * _tree_output(tree, X)
    return raw[0] if single else raw


def predict_proba(model: GbdtModel, features) -> np.ndarray:
    raw = predict_raw(model, features)
    if raw.ndim == 1:
        return _softmax(raw.reshape(1, -1))[0]
    return _softmax(raw)


def predict(model: GbdtModel, features):
    proba = predict_proba(model, features)
    if proba.ndim == 1:
        return model.classes[int(np.argmax(proba))]
    return [model.classes[int(k)] for k in np.argmax(proba, axis=1)]


def staged_losses(model: GbdtModel, features, labels) -> list[float]:
    """Total softmax cross-entropy after 0..n_rounds rounds."""
    X = np.asarray(features, dtype=np.float64)
    y = _encode_labels(labels, model.classes)
    raw = np.full((X.shape[0], len(model.classes)), model.base_score)
    losses = []

    def loss():
        p = _softmax(raw)
        picked = np.clip(p[np.arange(len(y)), y], 1e-300, None)
        return float(-np.log(picked).sum())

    losses.append(loss())
    for trees in model.rounds:
        for k, tree in enumerate(trees):
            raw[:, k] += model.learning_rate * _tree_output(tree, X)
        losses.append(loss())
    return losses


# --- serialization ------------------------------------------------------------

def model_to_text(model: GbdtModel) -> str:
    lines = [
        MODEL_HEADER,
        "classes " + ",".join(model.classes),
        f"n_features {model.n_features}",
        f"n_rounds {model.n_rounds}",
        f"learning_rate {model.learning_rate:.17g}",
        f"reg_lambda {model.reg_lambda:.17g}",
        f"gamma {model.gamma:.17g}",
        f"max_depth {model.max_depth}",
        f"min_child_weight {model.min_child_weight:.17g}",
        f"base_score {model.base_score:.17g}",
    ]
    for r, trees in enumerate(model.rounds):
        for k, tree in enumerate(trees):
            for node_id, node in enumerate(tree):
                kind = "leaf" if node.is_leaf else "split"
                lines.append(
                    f"node {r},{k},{node_id},{kind},{node.feature},"
                    f"{node.split:.17g},{node.left},{node.right},"
                    f"{node.weight:.17g}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def _parse_header(lines):
    fields = {}
    consumed = 0
    for line in lines:
        if line.startswith("node ") or line == "end":
            break
        consumed += 1
        key, _, value = line.partition(" ")
        if not value:
            raise ModelFormatError(f"malformed header line {line!r}")
        fields[key] = value
    required = ("classes", "n_features", "n_rounds", "learning_rate",
                "reg_lambda", "gamma", "max_depth", "min_child_weight",
                "base_score")
    missing = [k for k in required if k not in fields]
    if missing:
        raise ModelFormatError(f"model header missing {missing}")
    return fields, consumed


def model_from_text(text: str) -> GbdtModel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MODEL_HEADER:
        raise ModelFormatError(f"expected header {MODEL_HEADER!r}")
    if lines[-1] != "end":
        raise ModelFormatError("model file truncated (no end marker)")
    fields, consumed = _parse_header(lines[1:])
    try:
        classes = tuple(fields["classes"].split(","))
        n_features = int(fields["n_features"])
        n_rounds = int(fields["n_rounds"])
        numbers = {k: float(fields[k]) for k in
                   ("learning_rate", "reg_lambda", "gamma",
                    "min_child_weight", "base_score")}
        max_depth = int(fields["max_depth"])
    except ValueError:
        raise ModelFormatError("non-numeric model header field") from None

    trees: dict[tuple[int, int], list[TreeNode]] = {}
    for line in lines[1 + consumed:-1]:
        if not line.startswith("node "):
            raise ModelFormatError(f"unexpected line {line!r}")
        parts = line[5:].split(",")
        if len(parts) != 9:
            raise ModelFormatError(f"node line needs 9 fields: {line!r}")
        try:
            r, k, node_id = int(parts[0]), int(parts[1]), int(parts[2])
            kind = parts[3]
            feature, split = int(parts[4]), float(parts[5])
            left, right = int(parts[6]), int(parts[7])
            weight = float(parts[8])
        except ValueError:
            raise ModelFormatError(f"non-numeric node field: {line!r}") \
                from None
        if kind not in ("split", "leaf"):
            raise ModelFormatError(f"unknown node kind {kind!r}")
        group = trees.setdefault((r, k), [])
        if node_id != len(group):
            raise ModelFormatError(
                f"node ids out of order for round {r} class {k}")
        if kind == "leaf":
            group.append(TreeNode(weight=weight))
        else:
            if not 0 <= feature < n_features:
                raise ModelFormatError(f"feature index {feature} out of range")
            if left <= node_id or right <= node_id:
                raise ModelFormatError("child ids must follow their parent")
            group.append(TreeNode(feature, split, left, right, weight))

    rounds = []
    for r in range(n_rounds):
        round_trees = []
        for k in range(len(classes)):
            group = trees.pop((r, k), None)
            if not group:
                raise ModelFormatError(
                    f"missing tree for round {r} class {k}")
            for node in group:
                if not node.is_leaf and (node.left >= len(group)
                                         or node.right >= len(group)):
                    raise ModelFormatError(
                        f"dangling child index in round {r} class {k}")
            round_trees.append(tuple(group))
        rounds.append(tuple(round_trees))
    if trees:
        raise ModelFormatError(f"trees outside declared rounds: "
                               f"{sorted(trees)}")
    return GbdtModel(classes=classes, n_features=n_features,
                     max_depth=max_depth, rounds=tuple(rounds), **numbers)


def serialize(model: GbdtModel, path: str | Path) -> None:
    Path(path).write_text(model_to_text(model), encoding="utf-8")


def deserialize(path: str | Path) -> GbdtModel:
    return model_from_text(Path(path).read_text(encoding="utf-8"))


# --- estimator wrapper ---------------------------------------------------------

class GbdtClassifier(ClassifierMixin, BaseEstimator):
    """Estimator facade over train/predict with the fixed class order."""

    def __init__(self, n_rounds: int = 20, learning_rate: float = 0.1,
                 reg_lambda: float = 1.0, gamma: float = 0.0,
                 max_depth: int = 3, min_child_weight: float = 1.0,
                 seed: int = 0):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.gamma = gamma
        self.max_depth = max_depth
        self.min_child_weight = min_child_weight
        self.seed = seed

    def fit(self, X, y):
        config = TrainConfig(
            n_rounds=self.n_rounds, learning_rate=self.learning_rate,
            reg_lambda=self.reg_lambda, gamma=self.gamma,
            max_depth=self.max_depth,
            min_child_weight=self.min_child_weight, seed=self.seed)
        self.model_ = train(X, y, config)
        self.classes_ = np.array(self.model_.classes)
        return self

    def predict_proba(self, X):
        return predict_proba(self.model_, np.atleast_2d(X))

    def predict(self, X):
        return np.array(predict(self.model_, np.atleast_2d(X)))
