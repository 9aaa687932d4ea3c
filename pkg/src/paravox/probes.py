"""Small diagnostic probes: linear classification accuracy, silhouette.

These quantify what information a representation carries (do semantic
frames reveal the symbol? the speaker?) without training anything
heavier than a least-squares readout.
"""

from __future__ import annotations

import numpy as np

from .engine import Rng


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray, rng: Rng,
                          train_frac: float = 0.5) -> float:
    """Held-out accuracy of a least-squares probe onto one-hot labels.

    Rows are split into train/eval halves with a seeded shuffle; the
    probe is ridge-free lstsq, evaluated by argmax on the eval half.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n < 4:
        raise ValueError("probe needs at least 4 rows")
    classes, y = np.unique(labels, return_inverse=True)
    perm = rng.permutation(n)
    cut = max(1, int(n * train_frac))
    tr, ev = perm[:cut], perm[cut:]
    x = np.hstack([features, np.ones((n, 1))])  # bias column
    onehot = np.eye(len(classes))[y]
    w, *_ = np.linalg.lstsq(x[tr], onehot[tr], rcond=None)
    pred = np.argmax(x[ev] @ w, axis=1)
    return float((pred == y[ev]).mean())


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over all points (euclidean).

    s(i) = (b - a) / max(a, b) with a = mean distance to own cluster,
    b = smallest mean distance to another cluster. Needs >= 2 clusters;
    singleton clusters score 0 by convention.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    d = np.sqrt(np.maximum(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1), 0.0))
    scores = np.zeros(points.shape[0])
    for i in range(points.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own <= 1:
            continue  # singleton: 0
        a = d[i][own].sum() / (n_own - 1)
        b = min(d[i][labels == c].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())
