"""Morphology-only clustering baseline and the pathology probe.

The baseline clusters embeddings directly (no spatial context): k-means
with kmeans++ seeding and restarts, fit on training cells and applied
to test cells by nearest centroid. The probe is a one-vs-rest linear
SVM (hinge + L2, subgradient descent) scored with macro-F1.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .metrics import macro_f1


class KMeans:
    """Lloyd's algorithm with kmeans++ seeding and n_init restarts."""

    def __init__(self, n_clusters: int, seed: int = 0, n_init: int = 10, max_iter: int = 300):
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if n_init < 1 or max_iter < 1:
            raise ValueError("n_init and max_iter must be >= 1")
        self.n_clusters = n_clusters
        self.seed = seed
        self.n_init = n_init
        self.max_iter = max_iter
        self.centroids_: Optional[np.ndarray] = None
        self.inertia_: Optional[float] = None
        self.inertia_history_: Optional[list[float]] = None
        self.labels_: Optional[np.ndarray] = None

    def _seed_centroids(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(x)
        centroids = np.empty((self.n_clusters, x.shape[1]))
        centroids[0] = x[rng.integers(n)]
        d2 = ((x - centroids[0]) ** 2).sum(axis=1)
        for k in range(1, self.n_clusters):
            total = d2.sum()
            if total > 0:
                probs = d2 / total
                choice = rng.choice(n, p=probs)
            else:
                choice = rng.integers(n)
            centroids[k] = x[choice]
            d2 = np.minimum(d2, ((x - centroids[k]) ** 2).sum(axis=1))
        return centroids

    def _assign(self, x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(x)), labels].sum())
        return labels, inertia

    def fit(self, x: np.ndarray) -> "KMeans":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("x must be 2-D")
        if self.n_clusters > len(x):
            raise ValueError(f"n_clusters {self.n_clusters} > number of points {len(x)}")
        rng = np.random.default_rng(self.seed)
        best_inertia = np.inf
        for _ in range(self.n_init):
            centroids = self._seed_centroids(x, rng)
            history: list[float] = []
            labels, inertia = self._assign(x, centroids)
            history.append(inertia)
            for _ in range(self.max_iter):
                new_centroids = centroids.copy()  # empty clusters keep position
                for k in range(self.n_clusters):
                    members = labels == k
                    if members.any():
                        new_centroids[k] = x[members].mean(axis=0)
                new_labels, new_inertia = self._assign(x, new_centroids)
                centroids = new_centroids
                history.append(new_inertia)
                if np.array_equal(new_labels, labels):
                    labels = new_labels
                    inertia = new_inertia
                    break
                labels, inertia = new_labels, new_inertia
            if inertia < best_inertia:
                best_inertia = inertia
                self.centroids_ = centroids
                self.labels_ = labels
                self.inertia_ = inertia
                self.inertia_history_ = history
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.centroids_ is None:
            raise ValueError("fit must run before predict")
        labels, _ = self._assign(np.asarray(x, dtype=np.float64), self.centroids_)
        return labels


def kmeans_baseline(
    embeddings: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    n_init: int = 10,
    max_iter: int = 300,
    fit_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Cluster embeddings; fit on the masked rows, label every row."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    km = KMeans(n_clusters, seed=seed, n_init=n_init, max_iter=max_iter)
    if fit_mask is None:
        km.fit(embeddings)
    else:
        fit_mask = np.asarray(fit_mask, dtype=bool)
        km.fit(embeddings[fit_mask])
    return km.predict(embeddings)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def svm_probe(
    features: np.ndarray,
    pathology: np.ndarray,
    train_mask: np.ndarray,
    test_mask: np.ndarray,
    c_reg: float = 1.0,
    seed: int = 0,
    epochs: int = 20,
) -> float:
    """Macro-F1 of a linear SVM predicting pathology from features.

    ``pathology`` holds interned class codes with -1 marking excluded
    (unlabeled or out-of-subset) cells, which are dropped from both
    sides of the split. One weight vector per class is trained with the
    Pegasos step schedule; the bias rides along as a constant feature.
    """
    features = np.asarray(features, dtype=np.float64)
    pathology = np.asarray(pathology)
    if c_reg <= 0:
        raise ValueError("c_reg must be positive")
    train_mask = np.asarray(train_mask, dtype=bool) & (pathology >= 0)
    test_mask = np.asarray(test_mask, dtype=bool) & (pathology >= 0)
    x_train = features[train_mask]
    y_train = pathology[train_mask]
    classes = np.unique(y_train)
    if len(classes) < 2:
        raise ValueError(f"probe needs >= 2 pathology classes in train, found {len(classes)}")

    x = np.hstack([x_train, np.ones((len(x_train), 1))])
    targets = np.where(y_train[None, :] == classes[:, None], 1.0, -1.0)
    n = len(x)
    lam = 1.0 / (c_reg * n)
    rng = np.random.default_rng(seed)
    w = np.zeros((len(classes), x.shape[1]))
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            margins = targets[:, i] * (w @ x[i])
            w *= 1.0 - 1.0 / t
            violated = margins < 1.0
            if violated.any():
                w[violated] += eta * targets[violated, i][:, None] * x[i][None, :]

    x_test = np.hstack([features[test_mask], np.ones((int(test_mask.sum()), 1))])
    scores = x_test @ w.T
    predictions = classes[np.argmax(scores, axis=1)]
    return macro_f1(pathology[test_mask], predictions, classes=classes)
