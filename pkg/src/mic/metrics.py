"""Retrieval and clustering metrics: Recall@k, NMI, ARI, intra-class variance ratio."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class EvalReport:
    encoder: str                       # alpha | beta | concat
    recall_at: dict[int, float] = field(default_factory=dict)
    nmi: float = float("nan")
    intra_class_variance_ratio: float = float("nan")

    def to_json(self) -> str:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return json.dumps(d, sort_keys=True)


def _sq_dists(e: np.ndarray) -> np.ndarray:
    """Squared distances from explicit differences, so exact ties stay exact."""
    n, dim = e.shape
    out = np.empty((n, n))
    step = max(1, 4_000_000 // max(1, n * dim))
    for i in range(0, n, step):
        diff = e[i:i + step, None, :] - e[None, :, :]
        out[i:i + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def neighbors(e, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors of every row, self excluded, ties to lower index."""
    e = np.asarray(e, dtype=np.float64)
    d = _sq_dists(e)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def recall_at_k(embeddings, labels, ks=(1, 2, 4, 8)) -> dict[int, float]:
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(e)
    if n < 2:
        raise ValueError("recall needs at least two samples")
    ks = [int(k) for k in ks]
    if max(ks) >= n or min(ks) < 1:
        raise ValueError(f"every k must satisfy 1 <= k < N={n}")
    nn = neighbors(e, max(ks))
    hit = labels[nn] == labels[:, None]
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), n)
    return {k: float((first < k).mean()) for k in ks}


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def contingency(a, b) -> np.ndarray:
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    return table


def nmi(labels_a, labels_b) -> float:
    """I(A;B) / sqrt(H(A) H(B)), natural log.

    1 when both labelings are a single cluster, 0 when exactly one is.
    """
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if len(a) != len(b):
        raise ValueError("labelings differ in length")
    if len(a) == 0:
        raise ValueError("empty labelings")
    t = contingency(a, b)
    n = t.sum()
    ha, hb = _entropy(t.sum(axis=1)), _entropy(t.sum(axis=0))
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    pij = t / n
    pa = pij.sum(axis=1, keepdims=True)
    pb = pij.sum(axis=0, keepdims=True)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / (pa @ pb)[nz])).sum())
    return min(max(mi / np.sqrt(ha * hb), 0.0), 1.0)


def adjusted_rand_index(labels_a, labels_b) -> float:
    t = contingency(labels_a, labels_b)
    n = t.sum()

    def c2(x):
        return (x * (x - 1) / 2).sum()

    idx = c2(t)
    ra, rb = c2(t.sum(axis=1)), c2(t.sum(axis=0))
    expected = ra * rb / c2(np.array([n]))
    top = (ra + rb) / 2
    if top == expected:
        return 1.0
    return float((idx - expected) / (top - expected))


def intra_class_variance_ratio(embeddings, labels, inter: str = "mean") -> float:
    """Mean within-class pairwise distance over the mean distance between class centers.

    ``inter="min"`` uses the closest pair of centers instead of the mean.
    Singleton classes are left out of the numerator (with a warning).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    intra, centers = [], []
    singletons = 0
    for c in classes:
        rows = e[labels == c]
        centers.append(rows.mean(axis=0))
        if len(rows) < 2:
            singletons += 1
            continue
        d = np.sqrt(_sq_dists(rows))
        iu = np.triu_indices(len(rows), 1)
        intra.append(d[iu].mean())
    if not intra:
        raise ValueError("every class is a singleton")
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if singletons:
        warnings.warn(f"{singletons} singleton class(es) excluded from intra-class distance", stacklevel=2)
    centers = np.array(centers)
    cd = np.sqrt(_sq_dists(centers))[np.triu_indices(len(centers), 1)]
    denom = cd.mean() if inter == "mean" else cd.min()
    return float(np.mean(intra) / denom)


def evaluate_embeddings(e, labels, encoder: str, ks=(1, 2, 4, 8), seed: int = 0) -> EvalReport:
    """Recall@k, NMI of k-means (C = #classes) against labels, and the variance ratio."""
    from .surrogate import cluster_labels

    labels = np.asarray(labels)
    ks = [k for k in ks if k < len(labels)]
    n_cls = len(np.unique(labels))
    pred = cluster_labels(e, n_cls, seed)
    return EvalReport(encoder, recall_at_k(e, labels, ks), nmi(pred, labels),
                      intra_class_variance_ratio(e, labels))


# --- embedding dump ----------------------------------------------------------
#
# Header: id,class,surrogate,a0..a{Da-1}[,b0..b{Db-1}]; one row per sample.

def dump_embeddings(params, dataset, path) -> Path:
    from .model import embed

    path = Path(path)
    out = embed(params, dataset.features)
    cols = [out.e_alpha]
    head = ["id", "class", "surrogate"] + [f"a{j}" for j in range(params.d_alpha)]
    if out.e_beta is not None:
        cols.append(out.e_beta)
        head += [f"b{j}" for j in range(params.d_beta)]
    mat = np.hstack(cols)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for i, row in enumerate(mat):
                w.writerow([i, int(dataset.labels[i]), int(dataset.surrogate[i]), *[repr(float(v)) for v in row]])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def load_embedding_dump(path):
    """Returns ``(labels, surrogate, e_alpha, e_beta_or_None)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], np.array(rows[1:], dtype=np.float64)
    a_cols = [i for i, h in enumerate(head) if h.startswith("a")]
    b_cols = [i for i, h in enumerate(head) if h.startswith("b")]
    labels = body[:, 1].astype(np.int64)
    surrogate = body[:, 2].astype(np.int64)
    e_beta = body[:, b_cols] if b_cols else None
    return labels, surrogate, body[:, a_cols], e_beta
