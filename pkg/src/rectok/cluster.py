"""Seeded k-means variants shared by the spectral tokenizer and the quantizer."""

from __future__ import annotations

import numpy as np


def _init_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding, deterministic given ``rng``."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every point coincides with a chosen center
            centers[j] = points[int(rng.integers(n))]
            continue
        idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd k-means with k-means++ seeding.

    Returns ``(centers, labels)``.  Assignment ties go to the lowest cluster
    index; an empty cluster is revived with the point farthest from its
    current center, so all randomness comes from ``rng``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty 2-D point array")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = points.shape[0]
    centers = _init_centers(points, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(n_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for j in range(k):
            mask = new_labels == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            elif n > k:
                far = int(dists[np.arange(n), new_labels].argmax())
                centers[j] = points[far]
                new_labels[far] = j
        if (new_labels == labels).all():
            break
        labels = new_labels
    return centers, labels


def balanced_kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 20
) -> np.ndarray:
    """k-means constrained to near-equal cluster sizes (ceil(n/k) capacity).

    Points are assigned greedily in order of increasing distance, skipping
    full clusters.  Returns the label array.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0 or k < 1:
        raise ValueError("balanced_kmeans needs points and k >= 1")
    capacity = -(-n // k)
    centers = _init_centers(points, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(n_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(dists, axis=None, kind="stable")
        new_labels = np.full(n, -1, dtype=np.int64)
        load = np.zeros(k, dtype=np.int64)
        assigned = 0
        for flat in order:
            i, j = divmod(int(flat), k)
            if new_labels[i] >= 0 or load[j] >= capacity:
                continue
            new_labels[i] = j
            load[j] += 1
            assigned += 1
            if assigned == n:
                break
        for j in range(k):
            mask = new_labels == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
        if (new_labels == labels).all():
            break
        labels = new_labels
    return labels
