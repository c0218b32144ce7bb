"""Shared backbone with a class head, an auxiliary head and the projection R."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

FORMAT_VERSION = 1
MARGIN_BETA_INIT = 1.2

# Independent RNG stream per component, so e.g. the class branch is initialized
# identically whether or not the auxiliary branch exists.
_STREAM = {"backbone": 0, "alpha": 1, "beta": 2, "proj": 3}


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelParams:
    input_dim: int
    feature_dim: int
    d_alpha: int
    d_beta: int
    hidden_dims: tuple[int, ...]
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_backbone(self) -> int:
        return len(self.hidden_dims) + 1

    @property
    def backbone_layers(self):
        return [(self.tensors[f"f.{i}.W"], self.tensors[f"f.{i}.b"]) for i in range(self.n_backbone)]

    @property
    def head_alpha(self):
        return self.tensors["alpha.W"], self.tensors["alpha.b"]

    @property
    def head_beta(self):
        if self.d_beta == 0:
            return ()
        return self.tensors["beta.W"], self.tensors["beta.b"]

    @property
    def proj_R(self):
        if self.d_beta == 0:
            return []
        return [(self.tensors[f"R.{i}.W"], self.tensors[f"R.{i}.b"]) for i in range(2)]

    @property
    def margin_beta(self) -> float:
        return float(self.tensors["margin_beta"][0, 0])

    def dims(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "feature_dim": self.feature_dim,
            "d_alpha": self.d_alpha,
            "d_beta": self.d_beta,
            "hidden_dims": list(self.hidden_dims),
        }

    def copy(self) -> "ModelParams":
        return ModelParams(self.input_dim, self.feature_dim, self.d_alpha, self.d_beta,
                           tuple(self.hidden_dims), self.seed,
                           {k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of dims and every tensor."""
        if self.dims() != other.dims() or self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) and
                   self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    # std = sqrt(2 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(input_dim: int, feature_dim: int = 64, d_alpha: int = 32, d_beta: int | None = None,
                hidden_dims=(256,), seed: int = 0) -> ModelParams:
    if d_beta is None:
        d_beta = d_alpha
    hidden_dims = tuple(int(h) for h in hidden_dims)
    if min(input_dim, feature_dim, d_alpha, *hidden_dims, 1) < 1 or d_beta < 0:
        raise ValueError("dimensions must be >= 1 (d_beta >= 0)")
    streams = {k: np.random.default_rng([seed, s]) for k, s in _STREAM.items()}
    t: dict[str, np.ndarray] = {}

    sizes = (input_dim, *hidden_dims, feature_dim)
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        t[f"f.{i}.W"] = _he_uniform(streams["backbone"], fi, fo)
        t[f"f.{i}.b"] = np.zeros((1, fo))
    t["alpha.W"] = _he_uniform(streams["alpha"], feature_dim, d_alpha)
    t["alpha.b"] = np.zeros((1, d_alpha))
    if d_beta > 0:
        t["beta.W"] = _he_uniform(streams["beta"], feature_dim, d_beta)
        t["beta.b"] = np.zeros((1, d_beta))
        # hidden width of R equals d_alpha
        t["R.0.W"] = _he_uniform(streams["proj"], d_beta, d_alpha)
        t["R.0.b"] = np.zeros((1, d_alpha))
        t["R.1.W"] = _he_uniform(streams["proj"], d_alpha, d_alpha)
        t["R.1.b"] = np.zeros((1, d_alpha))
    t["margin_beta"] = np.full((1, 1), MARGIN_BETA_INIT)
    t["margin_beta_aux"] = np.full((1, 1), MARGIN_BETA_INIT)
    return ModelParams(input_dim, feature_dim, d_alpha, d_beta, hidden_dims, seed, t)


@dataclass
class EmbedBatch:
    e_alpha: object
    e_beta: object | None
    features: object


def backbone(params: ModelParams, x, w: Mapping | None = None):
    w = params.tensors if w is None else w
    if ad.value(x).shape[1] != params.input_dim:
        raise ad.ShapeError(f"expected {params.input_dim} input columns, got {ad.value(x).shape[1]}")
    h = x
    for i in range(params.n_backbone):
        if i:
            h = ad.relu(h)
        h = ad.add(ad.matmul(h, w[f"f.{i}.W"]), w[f"f.{i}.b"])
    return h


def embed(params: ModelParams, x, w: Mapping | None = None) -> EmbedBatch:
    """One backbone pass feeding both heads; head outputs are unit rows.

    ``w`` optionally overrides ``params.tensors`` (e.g. with taped Vars).
    """
    w = params.tensors if w is None else w
    feats = backbone(params, x, w)
    e_alpha = ad.l2_normalize(ad.add(ad.matmul(feats, w["alpha.W"]), w["alpha.b"]))
    e_beta = None
    if params.d_beta > 0:
        e_beta = ad.l2_normalize(ad.add(ad.matmul(feats, w["beta.W"]), w["beta.b"]))
    return EmbedBatch(e_alpha, e_beta, feats)


def project_R(params: ModelParams, e_beta, w: Mapping | None = None):
    if params.d_beta == 0:
        raise ValueError("projection R does not exist when d_beta == 0")
    w = params.tensors if w is None else w
    h = ad.relu(ad.add(ad.matmul(e_beta, w["R.0.W"]), w["R.0.b"]))
    return ad.l2_normalize(ad.add(ad.matmul(h, w["R.1.W"]), w["R.1.b"]))


# --- checkpoints -------------------------------------------------------------
#
# A checkpoint is a numpy .npz archive.  Entry "__meta__" holds a JSON string
# with format_version, seed and the dims; every other entry is a named tensor.

def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    meta = {"format_version": FORMAT_VERSION, "seed": params.seed, **params.dims()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **params.tensors)
    return path


def load_checkpoint(path, expect: Mapping | None = None) -> ModelParams:
    """Load a checkpoint; ``expect`` may pin any of the dims (e.g. d_alpha=64)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            tensors = {k: np.array(z[k], dtype=np.float64) for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    params = ModelParams(meta["input_dim"], meta["feature_dim"], meta["d_alpha"], meta["d_beta"],
                         tuple(meta["hidden_dims"]), meta["seed"], tensors)
    for key, want in (expect or {}).items():
        got = params.dims()[key]
        if key == "hidden_dims":
            want = list(want)
        if got != want:
            raise CheckpointError(f"checkpoint has {key}={got}, expected {want}")
    ref = init_params(params.input_dim, params.feature_dim, params.d_alpha, params.d_beta,
                      params.hidden_dims, 0)
    for k, v in ref.tensors.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise CheckpointError(f"tensor {k!r} missing or misshapen in {path}")
    return params
