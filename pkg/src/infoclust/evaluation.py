"""Cluster-to-class matching accuracy and the linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


def hungarian(cost) -> np.ndarray:
    """Permutation ``perm`` minimizing ``sum(cost[i, perm[i]])``.

    Rectangular inputs are padded with zero-cost dummy rows/columns, so the
    result always has ``max(cost.shape)`` entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    n = max(cost.shape)
    padded = np.zeros((n, n))
    padded[: cost.shape[0], : cost.shape[1]] = cost
    rows, cols = linear_sum_assignment(padded)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return perm


def contingency(preds, labels, n_clusters: int, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and of equal length")
    if preds.size and (preds.min() < 0 or preds.max() >= n_clusters):
        raise ValueError("cluster id out of range")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("class id out of range")
    table = np.zeros((n_clusters, n_classes), dtype=np.int64)
    np.add.at(table, (preds, labels), 1)
    return table


@dataclass
class Assignment:
    mapping: dict[int, int]
    accuracy: float
    table: np.ndarray


def cluster_accuracy(preds, labels, k: int, n_classes: int | None = None) -> Assignment:
    """Accuracy under the best one-to-one cluster -> class mapping."""
    n_classes = k if n_classes is None else n_classes
    table = contingency(preds, labels, k, n_classes)
    n = table.sum()
    if n == 0:
        raise ValueError("no samples")
    perm = hungarian(-table)
    mapping = {i: int(perm[i]) for i in range(k) if perm[i] < n_classes}
    matched = sum(table[i, j] for i, j in mapping.items())
    return Assignment(mapping, float(matched) / float(n), table)


def head_select(head_losses, primary=None) -> int:
    """Primary head with the lowest running loss; ties go to the lowest id."""
    losses = list(head_losses)
    ids = range(len(losses)) if primary is None else list(primary)
    if not ids:
        raise ValueError("no primary head")
    return min(ids, key=lambda h: (losses[h], h))


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by full-batch gradient descent.

    Features are standardized with training-set statistics before fitting.
    """

    def __init__(self, epochs: int = 500, lr: float = 0.1, standardize: bool = True, random_state: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a probe")
        y_idx = np.searchsorted(self.classes_, y)
        self.mean_ = X.mean(axis=0) if self.standardize else np.zeros(X.shape[1])
        self.scale_ = X.std(axis=0) if self.standardize else np.ones(X.shape[1])
        self.scale_[self.scale_ == 0] = 1.0
        x = torch.from_numpy((X - self.mean_) / self.scale_)
        t = torch.from_numpy(y_idx)
        g = torch.Generator().manual_seed(self.random_state)
        w = (torch.randn(X.shape[1], len(self.classes_), generator=g, dtype=torch.float64) * 0.01).requires_grad_(True)
        b = torch.zeros(len(self.classes_), dtype=torch.float64, requires_grad=True)
        for _ in range(self.epochs):
            loss = F.cross_entropy(x @ w + b, t)
            gw, gb = torch.autograd.grad(loss, (w, b))
            with torch.no_grad():
                w -= self.lr * gw
                b -= self.lr * gb
        self.coef_ = w.detach().numpy()
        self.intercept_ = b.detach().numpy()
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def train_test_split_indices(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return perm[n_test:], perm[:n_test]


def linear_probe(features, labels, split=None, epochs: int = 500, lr: float = 0.1, seed: int = 0) -> float:
    """Held-out accuracy of a linear classifier on frozen features.

    ``split`` is ``(train_idx, test_idx)``; by default a seeded 80/20 split.
    """
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    labels = np.asarray(labels)
    train, test = split if split is not None else train_test_split_indices(len(features), seed=seed)
    train, test = np.asarray(train), np.asarray(test)
    if len(train) == 0 or len(test) == 0:
        raise ValueError("degenerate split: empty train or test part")
    if len(np.unique(labels[train])) < 2:
        raise ValueError("degenerate split: training part has a single class")
    probe = LinearProbe(epochs=epochs, lr=lr, random_state=seed).fit(features[train], labels[train])
    return float(probe.score(features[test], labels[test]))
