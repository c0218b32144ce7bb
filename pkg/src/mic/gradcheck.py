"""Finite-difference verification of the complete training loss.

Reversal layers make the taped gradient differ from the derivative of the
forward value, so the reference is assembled from two plain derivatives:
d(l_main) + gamma * s * d(l_d), with s = -1 for every parameter that reaches
l_d through a reversal (backbone, both heads) and s = +1 for R.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as mdl


def _losses(params: mdl.ModelParams, w, x, ya, yb, trips_a, trips_b, step: str, reverse: bool):
    emb = mdl.embed(params, x, w)
    if step == "alpha":
        l_main = L.margin_loss(emb.e_alpha, trips_a, 0.2, w["margin_beta"])
    else:
        l_main = L.margin_loss(emb.e_beta, trips_b, 0.2, w["margin_beta_aux"])
    rev = ad.grad_reverse if reverse else (lambda v: v)
    l_d = L.mutual_info_loss(rev(emb.e_alpha), mdl.project_R(params, rev(emb.e_beta), w))
    return l_main, l_d


def check_seed(seed: int, gamma: float = 1.0, eps: float = 1e-5) -> float:
    """Max relative error of both alternating steps on a small random model."""
    rng = np.random.default_rng(seed)
    params = mdl.init_params(6, feature_dim=5, d_alpha=4, d_beta=3, hidden_dims=(7,), seed=seed)
    for k, v in params.tensors.items():
        if k.endswith(".b"):
            # generic point: zero biases leave whole rows dead in a net this small
            params.tensors[k] = rng.normal(0.3, 0.3, v.shape)
    x = rng.standard_normal((12, 6))
    ya = np.repeat(np.arange(3), 4)
    yb = np.tile(np.arange(2), 6)
    emb = mdl.embed(params, x)
    trips_a = L.sample_distance_weighted(L.pairwise_distances(emb.e_alpha), ya, 4, 0.5, rng)
    trips_b = L.sample_distance_weighted(L.pairwise_distances(emb.e_beta), yb, 3, 0.5, rng)
    sign = {k: (1.0 if k.startswith("R.") else -1.0) for k in params.tensors}
    worst = 0.0
    for step in ("alpha", "beta"):
        def full(w):
            l_main, l_d = _losses(params, w, x, ya, yb, trips_a, trips_b, step, True)
            return L.total_loss(l_main, None, l_d, gamma)

        tape = ad.Tape()
        analytic = ad.backward(full(tape.bind(params.tensors)))
        n_main = ad.numeric_grad(
            lambda w: _losses(params, w, x, ya, yb, trips_a, trips_b, step, False)[0], params.tensors, eps)
        n_d = ad.numeric_grad(
            lambda w: _losses(params, w, x, ya, yb, trips_a, trips_b, step, False)[1], params.tensors, eps)
        numeric = {k: n_main[k] + gamma * sign[k] * n_d[k] for k in params.tensors}
        worst = max(worst, ad.max_rel_error(analytic, numeric))
    return worst


def run(seeds=range(20), gamma: float = 1.0, eps: float = 1e-5) -> float:
    return max(check_seed(s, gamma, eps) for s in seeds)
