"""Surrogate labels for the auxiliary encoder.

Per-class standardization strips class-specific structure from the features,
k-means then groups what is left (characteristics shared across classes).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl

EPS_STD = 1e-8


@dataclass
class ClassStats:
    mean: np.ndarray
    std: np.ndarray
    count: int


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)  # inertia after each assignment step
    n_iter: int = 0


def class_standardize(features, labels):
    """z = (x - mu_y) / max(sigma_y, EPS_STD), per class and dimension.

    Population std (ddof 0).  Singleton classes and constant dimensions map
    to 0.  Returns ``(Z, {label: ClassStats})``.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.size == 0 or len(labels) == 0:
        raise ValueError("cannot standardize an empty feature matrix")
    if len(x) != len(labels):
        raise ValueError("one label per feature row required")
    z = np.empty_like(x)
    stats = {}
    for c in np.unique(labels):
        rows = labels == c
        mu = x[rows].mean(axis=0)
        sd = x[rows].std(axis=0)
        z[rows] = (x[rows] - mu) / np.maximum(sd, EPS_STD)
        stats[c.item()] = ClassStats(mu, sd, int(rows.sum()))
    return z, stats


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            i = int(rng.choice(n, p=closest / total))
        else:
            # every point already coincides with a centroid
            free = np.setdiff1d(np.arange(n), chosen)
            i = int(rng.choice(free))
        chosen.append(i)
        closest = np.minimum(closest, _sq_dists(x, x[i:i + 1])[:, 0])
    return x[chosen].copy()


def _assign(x, centroids):
    d = _sq_dists(x, centroids)
    lab = d.argmin(axis=1)
    return lab, d[np.arange(len(x)), lab]


def _means(x, lab, centroids):
    new = centroids.copy()
    for j in range(len(centroids)):
        rows = lab == j
        if rows.any():
            new[j] = x[rows].mean(axis=0)
    return new


def kmeans(z, n_clusters: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the assignment no longer changes, the centroid shift drops
    below ``tol`` or ``max_iter`` is hit.  A cluster that empties takes over
    the point farthest from its current centroid.
    """
    x = np.asarray(z, dtype=np.float64)
    n = len(x)
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= C <= N, got C={n_clusters}, N={n}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, n_clusters, rng)
    lab, d = _assign(x, centroids)
    history = [float(d.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = _means(x, lab, centroids)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1).max()))
        centroids = new
        new_lab, d = _assign(x, centroids)
        counts = np.bincount(new_lab, minlength=n_clusters)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(d))
            centroids[j] = x[far]
            new_lab[far] = j
            d[far] = 0.0
        history.append(float(d.sum()))
        changed = not np.array_equal(new_lab, lab)
        lab = new_lab
        if not changed or shift < tol:
            break
    centroids = _means(x, lab, centroids)
    inertia = float(((x - centroids[lab]) ** 2).sum())
    return ClusterModel(centroids, lab, inertia, history, it)


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Row permutation sorting ``x`` lexicographically (first column major)."""
    return np.lexsort(x.T[::-1])


def cluster_labels(x, n_clusters: int, seed: int) -> np.ndarray:
    """k-means assignments computed in canonical row order (order independent)."""
    x = np.asarray(x, dtype=np.float64)
    order = canonical_order(x)
    lab = np.empty(len(x), dtype=np.int64)
    lab[order] = kmeans(x[order], n_clusters, seed=seed).assignments
    return lab


def mine_surrogate_labels(features, labels, n_clusters: int, seed: int = 0,
                          standardize: bool = True) -> np.ndarray:
    """Initial surrogate labels: class standardization then k-means."""
    z = class_standardize(features, labels)[0] if standardize else np.asarray(features, dtype=np.float64)
    return cluster_labels(z, n_clusters, seed)


def update_surrogate_labels(params: mdl.ModelParams, x, n_clusters: int, seed: int = 0,
                            labels=None, standardize: bool = False) -> np.ndarray:
    """Refresh labels by clustering the auxiliary embedding.

    No standardization by default; ``standardize=True`` (needs ``labels``)
    applies class standardization first.
    """
    if params.d_beta == 0:
        raise ValueError("no auxiliary encoder (d_beta == 0)")
    e_beta = mdl.embed(params, x).e_beta
    if standardize:
        if labels is None:
            raise ValueError("standardize on update needs class labels")
        e_beta = class_standardize(e_beta, labels)[0]
    return cluster_labels(e_beta, n_clusters, seed)


def switch_labels(labels, p: float, rng: np.random.Generator) -> np.ndarray:
    """Randomly swap labels between pairs of samples from different clusters.

    Each sample, in order, that has not yet taken part in a swap starts one
    with probability ``p``; its partner is drawn uniformly from the untouched
    samples holding a different label.  The label histogram is preserved.
    """
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    out = np.array(labels, copy=True)
    if len(np.unique(out)) < 2 or p == 0:
        return out
    free = np.ones(len(out), dtype=bool)
    draws = rng.random(len(out))
    for i in range(len(out)):
        if not free[i] or draws[i] >= p:
            continue
        cand = np.flatnonzero(free & (out != out[i]))
        if len(cand) == 0:
            continue
        j = int(cand[rng.integers(len(cand))])
        out[i], out[j] = out[j], out[i]
        free[i] = free[j] = False
    return out


def dump_clusters_csv(cm: ClusterModel, path) -> Path:
    """Two sections: ``centroid,<id>,coords...`` rows then ``sample,<idx>,<cluster>`` rows."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for j, c in enumerate(cm.centroids):
            w.writerow(["centroid", j, *[repr(float(v)) for v in c]])
        for i, a in enumerate(cm.assignments):
            w.writerow(["sample", i, int(a)])
    return path
