"""Metric-learning losses, triplet miners and the adversarial decorrelation term."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import betaln

from . import autodiff as ad

# floor inside sqrt for non-squared distances; keeps d/dx finite for duplicates
DIST_FLOOR = 1e-12


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class LossConfig:
    loss_kind: str = "margin"          # triplet-semihard | margin | proxynca
    triplet_margin: float = 0.2
    margin_alpha: float = 0.2
    gamma: float = 100.0
    dw_clip: float = 0.5

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.triplet_margin <= 0 or self.margin_alpha <= 0 or self.dw_clip <= 0:
            raise ValueError("margins and dw_clip must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


LOSS_KINDS = ("triplet-semihard", "margin", "proxynca")


def pairwise_distances(e) -> np.ndarray:
    """Squared Euclidean distances via 2 - 2<e_i, e_j> style Gram identity, clamped at 0."""
    e = ad.value(e)
    sq = (e * e).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    np.fill_diagonal(d, 0.0)
    d = np.maximum(d, 0.0)
    return (d + d.T) / 2.0


def triplet_loss(d_ij, d_ik, m: float):
    """Hinge max(d_ij - d_ik + m, 0); works on scalars, arrays or Vars."""
    if isinstance(d_ij, ad.Var) or isinstance(d_ik, ad.Var):
        return ad.relu(ad.add(ad.sub(d_ij, d_ik), m))
    return np.maximum(np.asarray(d_ij) - np.asarray(d_ik) + m, 0.0)


def _groups(labels):
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return labels, same


def mine_semihard(dists: np.ndarray, labels) -> list[Triplet]:
    """One triplet per (anchor, positive) pair.

    The negative is the closest one strictly farther than the positive; if
    there is none, the farthest negative.  Ties go to the lowest index.
    """
    labels, same = _groups(labels)
    n = len(labels)
    out = []
    if len(np.unique(labels)) < 2:
        return out
    for a in range(n):
        negs = np.flatnonzero(~same[a])
        dn = dists[a, negs]
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            dap = dists[a, p]
            beyond = dn > dap
            if beyond.any():
                cand = np.where(beyond, dn, np.inf)
                k = int(np.argmin(cand))
            else:
                k = int(np.argmax(dn))
            out.append(Triplet(a, int(p), int(negs[k])))
    return out


def log_sphere_distance_density(d, dim: int):
    """log q(d) for the distance between two uniform points on S^(dim-1)."""
    d = np.clip(np.asarray(d, dtype=np.float64), 1e-6, 2.0 - 1e-6)
    log_norm = (dim - 2) * np.log(2.0) + betaln((dim - 1) / 2.0, (dim - 1) / 2.0)
    return (dim - 2) * np.log(d) + 0.5 * (dim - 3) * np.log(1.0 - d * d / 4.0) - log_norm


def negative_weights(d, dim: int, clip: float) -> np.ndarray:
    """Unnormalized selection weights min(1/q(d), 1/clip)."""
    logq = log_sphere_distance_density(d, dim)
    return np.exp(-np.maximum(logq, np.log(clip)))


def sample_distance_weighted(dists: np.ndarray, labels, dim: int, clip: float,
                             rng: np.random.Generator) -> list[Triplet]:
    """One (positive, negative) per anchor; negatives drawn against the sphere density.

    ``dists`` are squared distances; the density acts on the plain distance.
    """
    if dim < 3:
        raise ValueError("distance-weighted sampling needs embedding dim >= 3")
    labels, same = _groups(labels)
    n = len(labels)
    d = np.sqrt(np.maximum(dists, 0.0))
    out = []
    for a in range(n):
        pos = np.flatnonzero(same[a])
        pos = pos[pos != a]
        negs = np.flatnonzero(~same[a])
        if len(pos) == 0 or len(negs) == 0:
            continue
        p = int(pos[rng.integers(len(pos))])
        w = negative_weights(d[a, negs], dim, clip)
        k = int(rng.choice(len(negs), p=w / w.sum()))
        out.append(Triplet(a, p, int(negs[k])))
    return out


def _pair_sq_dist(e, i, j):
    diff = ad.sub(ad.gather_rows(e, i), ad.gather_rows(e, j))
    return ad.sum_rows(ad.square(diff))


def _split(triplets):
    t = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)
    return t[:, 0], t[:, 1], t[:, 2]


class EmptyTripletWarning(RuntimeWarning):
    pass


def _zero(*xs):
    """A 0 loss that stays connected to the given operands (zero gradient)."""
    out = np.zeros((1, 1))
    for x in xs:
        if isinstance(x, ad.Var):
            out = ad.add(out, ad.scale(ad.total(x), 0.0))
    return out


def semihard_triplet_loss(e, triplets, m: float):
    """Mean hinge over triplets on squared distances; 0 for an empty list."""
    if not triplets:
        warnings.warn("no triplets in batch", EmptyTripletWarning, stacklevel=2)
        return _zero(e)
    a, p, n = _split(triplets)
    return ad.mean(triplet_loss(_pair_sq_dist(e, a, p), _pair_sq_dist(e, a, n), m))


def margin_loss(e, triplets, alpha: float, beta):
    """Margin loss on non-squared distances with a learnable boundary ``beta``.

    Averaged over the number of active (non-zero) terms; an empty or fully
    inactive set gives 0.  Returns a 1x1 matrix or Var.
    """
    if not triplets:
        warnings.warn("no triplets in batch", EmptyTripletWarning, stacklevel=2)
        return _zero(e, beta)
    a, p, n = _split(triplets)
    d_ap = ad.sqrt(_pair_sq_dist(e, a, p), DIST_FLOOR)
    d_an = ad.sqrt(_pair_sq_dist(e, a, n), DIST_FLOOR)
    pos = ad.relu(ad.sub(ad.add(d_ap, alpha), beta))
    neg = ad.relu(ad.sub(ad.add(beta, alpha), d_an))
    active = int((ad.value(pos) > 0).sum() + (ad.value(neg) > 0).sum())
    return ad.scale(ad.add(ad.total(pos), ad.total(neg)), 1.0 / max(active, 1))


def proxy_sq_dists(e, proxies):
    """Squared distances between rows of ``e`` and unit-normalized proxies."""
    p = ad.l2_normalize(proxies)
    ee = ad.sum_rows(ad.square(e))
    pp = ad.transpose(ad.sum_rows(ad.square(p)))
    cross = ad.matmul(e, ad.transpose(p))
    return ad.sub(ad.add(ee, pp), ad.scale(cross, 2.0))


def proxynca_loss(e, labels, proxies):
    """mean_i [ d(e_i, p_y) + log sum_{z != y} exp(-d(e_i, p_z)) ]."""
    labels = np.asarray(labels, dtype=np.intp)
    n_prox = ad.value(proxies).shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_prox):
        raise ValueError("label without a proxy")
    if n_prox < 2:
        raise ValueError("proxynca needs at least two proxies")
    d = proxy_sq_dists(e, proxies)
    onehot = np.zeros(ad.value(d).shape, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    d_pos = ad.sum_rows(ad.mul(d, onehot.astype(np.float64)))
    lse = ad.logsumexp_rows(ad.scale(d, -1.0), ~onehot)
    return ad.mean(ad.add(d_pos, lse))


def init_proxies(e, labels, n_classes: int) -> np.ndarray:
    """Normalized class means of ``e``; classes absent from ``labels`` get e1."""
    e = ad.value(e)
    labels = np.asarray(labels)
    out = np.zeros((n_classes, e.shape[1]))
    for c in range(n_classes):
        rows = e[labels == c]
        if len(rows):
            out[c] = rows.mean(axis=0)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    bad = norms[:, 0] <= ad.EPS_NORM
    out = out / np.where(bad[:, None], 1.0, norms)
    out[bad] = 0.0
    out[bad, 0] = 1.0
    return out


def mutual_info_loss(e_alpha_rev, r_beta_rev):
    """-(e_alpha * r)^2 summed over dimensions, averaged over the batch.

    Callers pass both inputs through ``grad_reverse`` (the alpha embedding
    directly, the beta embedding before R), which turns minimization of this
    alignment reward into decorrelation of the two encoders.
    """
    a, r = ad.value(e_alpha_rev), ad.value(r_beta_rev)
    if a.shape != r.shape:
        raise ad.ShapeError(f"mutual_info_loss shape mismatch {a.shape} vs {r.shape}")
    return ad.scale(ad.mean(ad.sum_rows(ad.square(ad.mul(e_alpha_rev, r_beta_rev)))), -1.0)


def total_loss(l_alpha, l_beta, l_d, gamma: float):
    """l_alpha + l_beta + gamma * l_d; pass ``l_beta=0`` for the per-step sums."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    parts = [x for x in (l_alpha, l_beta) if x is not None]
    out = parts[0]
    for x in parts[1:]:
        out = ad.add(out, x)
    if l_d is not None and gamma != 0:
        out = ad.add(out, ad.scale(l_d, gamma))
    return out


def embedding_loss(kind: str, e, labels, cfg: LossConfig, beta=None, proxies=None,
                   rng: np.random.Generator | None = None):
    """Dispatch for the per-encoder metric loss; mining uses detached distances."""
    labels = np.asarray(labels)
    if kind == "proxynca":
        return proxynca_loss(e, labels, proxies)
    dists = pairwise_distances(e)
    if kind == "triplet-semihard":
        return semihard_triplet_loss(e, mine_semihard(dists, labels), cfg.triplet_margin)
    if kind == "margin":
        dim = ad.value(e).shape[1]
        if dim >= 3:
            trips = sample_distance_weighted(dists, labels, dim, cfg.dw_clip, rng)
        else:
            trips = mine_semihard(dists, labels)
        return margin_loss(e, trips, cfg.margin_alpha, beta)
    raise ValueError(f"unknown loss kind {kind!r}")
