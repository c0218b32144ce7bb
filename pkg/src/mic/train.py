"""Alternating class/auxiliary training with the adversarial decorrelation term."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import losses as L
from . import metrics
from . import model as mdl
from . import surrogate as sur
from .data import BatchSpec, Dataset, generate_synthetic, next_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = "margin"
    d_alpha: int = 32
    d_beta: int = 32
    feature_dim: int = 64
    hidden_dims: tuple[int, ...] = (256,)
    gamma: float = 1.0
    clusters: int = 4
    update_period: int = 2
    batch_size: int = 64
    per_class: int = 4
    label_switch_p: float = 0.1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    seed: int = 0
    margin_alpha: float = 0.2
    triplet_margin: float = 0.2
    dw_clip: float = 0.5
    clustering_on: bool = True
    standardize_on: bool = True
    mutual_info_on: bool = True
    standardize_on_update: bool = False
    eval_every: int = 0          # 0: evaluate after the last epoch only

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if not 0 <= self.label_switch_p <= 1:
            raise ValueError("label_switch_p must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.clustering_on and self.d_beta == 0:
            raise ValueError("clustering_on requires d_beta > 0")
        if self.mutual_info_on and self.d_beta == 0:
            raise ValueError("mutual_info_on requires d_beta > 0")
        self.loss_config()

    def loss_config(self) -> L.LossConfig:
        return L.LossConfig(self.loss_kind, self.triplet_margin, self.margin_alpha, self.gamma, self.dw_clip)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Single-encoder metric learning: no auxiliary branch at all."""
    return cfg.replace(d_beta=0, clustering_on=False, standardize_on=False, mutual_info_on=False)


# --- config files ------------------------------------------------------------
#
# One ``key = value`` per line, ``#`` starts a comment.  Keys are TrainConfig
# fields; keys of SyntheticSpec (prefixed ``data.``) describe generated data.

@dataclass
class SyntheticSpec:
    num_classes: int = 40
    per_class: int = 30
    num_shared: int = 4
    input_dim: int = 64
    noise_std: float = 0.1
    class_rank: int | None = 16      # none: one basis direction per class
    class_scale: float = 0.7
    shared_scale: float = 3.0
    seed: int = 0


def generate(spec: SyntheticSpec) -> Dataset:
    return generate_synthetic(**dataclasses.asdict(spec))


def _coerce(tp, raw: str):
    tp = str(tp)
    raw = raw.strip()
    if "bool" in tp:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "tuple" in tp:
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if "None" in tp and raw.lower() in ("none", ""):
        return None
    if "int" in tp:
        return int(raw)
    if "float" in tp:
        return float(raw)
    return raw


def parse_overrides(pairs, base: TrainConfig | None = None, data: SyntheticSpec | None = None):
    """Apply ``key=value`` strings to copies of ``base`` and ``data``."""
    base = base or TrainConfig()
    data = data or SyntheticSpec()
    tf = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    df = {f.name: f.type for f in dataclasses.fields(SyntheticSpec)}
    tkw, dkw = {}, {}
    for item in pairs:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key.startswith("data."):
            name = key[5:]
            if name not in df:
                raise KeyError(f"unknown data key {key!r}")
            dkw[name] = _coerce(df[name], raw)
        elif key in tf:
            tkw[key] = _coerce(tf[key], raw)
        else:
            raise KeyError(f"unknown config key {key!r}")
    return base.replace(**tkw), dataclasses.replace(data, **dkw)


def load_config(path, overrides=()) -> tuple[TrainConfig, SyntheticSpec]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    pairs = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return parse_overrides([*pairs, *overrides])


# --- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def reset(self, name: str) -> None:
        self.state.pop(name, None)

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            m, v, t = self.state.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
            t += 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            tensors[name] = tensors[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.state[name] = (m, v, t)


# --- run log -----------------------------------------------------------------

@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def deterministic_view(self) -> list[dict]:
        """Records without wall-clock fields."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    @classmethod
    def read(cls, path) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def label_churn(old, new) -> float:
    """Fraction of samples whose cluster changes under the best cluster matching."""
    t = metrics.contingency(old, new)
    r, c = linear_sum_assignment(-t)
    return float(1.0 - t[r, c].sum() / len(old))


# --- training ----------------------------------------------------------------

def _names(params: mdl.ModelParams, *groups: str) -> list[str]:
    out = []
    for g in groups:
        out += [k for k in params.tensors if k == g or k.startswith(g + ".")]
    return out


def _sanitize(x: float) -> float:
    return float(x) if np.isfinite(x) else float("nan")


class Trainer:
    """Holds the mutable state of one run; :func:`train` is the usual entry point."""

    def __init__(self, cfg: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
                 out_dir=None, log_path=None):
        self.cfg = cfg
        self.train_set = train_set
        self.test_set = test_set
        self.out_dir = Path(out_dir) if out_dir else None
        self.lcfg = cfg.loss_config()
        self.bspec = BatchSpec(cfg.batch_size, cfg.per_class)
        self.params = mdl.init_params(train_set.input_dim, cfg.feature_dim, cfg.d_alpha, cfg.d_beta,
                                      cfg.hidden_dims, cfg.seed)
        streams = np.random.SeedSequence(cfg.seed).spawn(5)
        self.batch_rng, self.rng_a, self.rng_b, self.switch_rng, _ = (np.random.default_rng(s) for s in streams)
        self.opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.extra: dict[str, np.ndarray] = {}   # loss-side learnables (proxies)
        self.log = RunLog(path=Path(log_path) if log_path else None)
        self.iters_per_epoch = max(1, len(train_set) // cfg.batch_size)
        self.label_updates: list[int] = []
        self.grad_audit: list[tuple[str, tuple[str, ...]]] = []
        self.audit = False
        self.use_beta = cfg.clustering_on and cfg.d_beta > 0
        self.use_mi = cfg.mutual_info_on and cfg.d_beta > 0 and cfg.gamma > 0

    # surrogate labels
    def _cluster_seed(self, epoch: int) -> int:
        return int(np.random.SeedSequence([self.cfg.seed, 7919, epoch + 1]).generate_state(1)[0])

    def initial_labels(self) -> np.ndarray:
        feats = mdl.backbone(self.params, self.train_set.features)
        lab = sur.mine_surrogate_labels(feats, self.train_set.labels, self.cfg.clusters,
                                        self._cluster_seed(-1), standardize=self.cfg.standardize_on)
        return sur.switch_labels(lab, self.cfg.label_switch_p, self.switch_rng)

    def refresh_labels(self, epoch: int) -> np.ndarray:
        lab = sur.update_surrogate_labels(self.params, self.train_set.features, self.cfg.clusters,
                                          self._cluster_seed(epoch), self.train_set.labels,
                                          standardize=self.cfg.standardize_on_update)
        return sur.switch_labels(lab, self.cfg.label_switch_p, self.switch_rng)

    def _set_labels(self, lab: np.ndarray) -> None:
        self.train_set.set_surrogate(lab)
        if self.cfg.loss_kind == "proxynca" and self.use_beta:
            e_beta = mdl.embed(self.params, self.train_set.features).e_beta
            self.extra["proxies.beta"] = L.init_proxies(e_beta, lab, self.cfg.clusters)
            self.opt.reset("proxies.beta")

    # one step
    def _step(self, which: str, x, ya, yb):
        cfg, p = self.cfg, self.params
        own = "alpha" if which == "alpha" else "beta"
        groups = ["f", own, "margin_beta" if own == "alpha" else "margin_beta_aux"]
        if self.use_mi:
            groups += ["beta" if own == "alpha" else "alpha", "R"]
        names = _names(p, *groups)
        tape = ad.Tape()
        w = dict(p.tensors)
        w.update(tape.bind({k: p.tensors[k] for k in names}))
        prox_name = f"proxies.{own}"
        if cfg.loss_kind == "proxynca":
            w[prox_name] = tape.leaf(self.extra[prox_name], prox_name)
        emb = mdl.embed(p, x, w)
        if own == "alpha":
            l_main = L.embedding_loss(cfg.loss_kind, emb.e_alpha, ya, self.lcfg, beta=w["margin_beta"],
                                      proxies=w.get(prox_name), rng=self.rng_a)
        else:
            l_main = L.embedding_loss(cfg.loss_kind, emb.e_beta, yb, self.lcfg, beta=w["margin_beta_aux"],
                                      proxies=w.get(prox_name), rng=self.rng_b)
        l_d = None
        if self.use_mi:
            r = mdl.project_R(p, ad.grad_reverse(emb.e_beta), w)
            l_d = L.mutual_info_loss(ad.grad_reverse(emb.e_alpha), r)
        total = L.total_loss(l_main, None, l_d, cfg.gamma)
        lv = float(ad.value(total)[0, 0])
        if not np.isfinite(lv):
            self._diverged(which, lv)
        grads = ad.backward(total)
        if self.audit:
            self.grad_audit.append((which, tuple(sorted(grads))))
        model_grads = {k: g for k, g in grads.items() if k in p.tensors}
        self.opt.step(p.tensors, model_grads)
        if prox_name in grads:
            self.opt.step(self.extra, {prox_name: grads[prox_name]})
        ld = float(ad.value(l_d)[0, 0]) if l_d is not None else 0.0
        return float(ad.value(l_main)[0, 0]), ld

    def _diverged(self, which, value):
        path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = mdl.save_checkpoint(self.params, self.out_dir / "diverged.npz")
        raise TrainingDiverged(f"non-finite {which} loss {value!r}; diagnostic checkpoint: {path}")

    def evaluate_all(self) -> dict:
        out = {}
        for split, ds in (("train", self.train_set), ("test", self.test_set)):
            if ds is None:
                continue
            for rep in evaluate(self.params, ds, seed=self.cfg.seed):
                if rep.encoder == "concat":
                    continue
                out[f"{split}_{rep.encoder}"] = json.loads(rep.to_json())
        return out

    def run(self) -> tuple[mdl.ModelParams, RunLog]:
        cfg, ds = self.cfg, self.train_set
        if cfg.loss_kind == "proxynca":
            e0 = mdl.embed(self.params, ds.features)
            self.extra["proxies.alpha"] = L.init_proxies(e0.e_alpha, ds.labels, ds.num_classes)
        if self.use_beta:
            self._set_labels(self.initial_labels())
            self.label_updates.append(-1)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            la, lb, ld = [], [], []
            for _ in range(self.iters_per_epoch):
                idx = next_batch(ds, self.bspec, self.batch_rng)
                x, ya, yb = ds.features[idx], ds.labels[idx], ds.surrogate[idx]
                a, d = self._step("alpha", x, ya, yb)
                la.append(a)
                ld.append(d)
                if self.use_beta:
                    b, d = self._step("beta", x, ya, yb)
                    lb.append(b)
                    ld.append(d)
            churn = None
            if self.use_beta and epoch % cfg.update_period == 0:
                old = ds.surrogate
                self._set_labels(self.refresh_labels(epoch))
                self.label_updates.append(epoch)
                churn = label_churn(old, ds.surrogate)
            rec = {
                "epoch": epoch,
                "l_alpha": _sanitize(np.mean(la)),
                "l_beta": _sanitize(np.mean(lb)) if lb else None,
                "l_d": _sanitize(np.mean(ld)) if self.use_mi else None,
                "margin_beta": self.params.margin_beta,
                "label_churn": churn,
            }
            last = epoch == cfg.epochs - 1
            if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
                rec["eval"] = self.evaluate_all()
            rec["wall_time"] = time.perf_counter() - t0
            self.log.append(rec)
            log.info("epoch %d l_alpha=%.4f l_beta=%s", epoch, rec["l_alpha"], rec["l_beta"])
        return self.params, self.log


def train(cfg: TrainConfig, train_set: Dataset, test_set: Dataset | None = None, out_dir=None,
          log_path=None) -> tuple[mdl.ModelParams, RunLog]:
    """Run the full alternating schedule; deterministic given ``cfg.seed``."""
    return Trainer(cfg, train_set, test_set, out_dir, log_path).run()


def evaluate(params: mdl.ModelParams, dataset: Dataset, ks=(1, 2, 4, 8), seed: int = 0):
    """EvalReports for the class embedding, the auxiliary one and their concatenation."""
    emb = mdl.embed(params, dataset.features)
    views = [("alpha", emb.e_alpha)]
    if emb.e_beta is not None:
        views += [("beta", emb.e_beta), ("concat", np.hstack([emb.e_alpha, emb.e_beta]))]
    return [metrics.evaluate_embeddings(e, dataset.labels, name, ks, seed) for name, e in views]


# --- ablations ---------------------------------------------------------------

def ablation_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    c, da = base.clusters, base.d_alpha
    rows = [
        ("baseline", baseline_config(base)),
        ("clust", base.replace(clustering_on=True, standardize_on=False, mutual_info_on=False)),
        ("clust+stand", base.replace(clustering_on=True, standardize_on=True, mutual_info_on=False)),
        ("clust+stand+mutinfo", base.replace(clustering_on=True, standardize_on=True, mutual_info_on=True)),
    ]
    for k in sorted({max(1, c // 2), c, 2 * c}):
        rows.append((f"clusters={k}", base.replace(clusters=k)))
    for t in (1, 2, 5, 10):
        rows.append((f"update_period={t}", base.replace(update_period=t)))
    for d in (0, da // 4, da):
        cfg = baseline_config(base) if d == 0 else base.replace(d_beta=d)
        rows.append((f"d_beta={d}", cfg))
    return rows


SUMMARY_FIELDS = ["config", "n_seeds", "n_failed", "recall@1", "recall@2", "recall@4", "recall@8",
                  "nmi", "icv_ratio"]


def _row_metrics(params, test_set: Dataset) -> dict:
    rep = evaluate(params, test_set)[0]
    out = {f"recall@{k}": v for k, v in rep.recall_at.items()}
    out["nmi"] = rep.nmi
    out["icv_ratio"] = rep.intra_class_variance_ratio
    return out


def run_ablation_suite(base: TrainConfig, train_set: Dataset, test_set: Dataset, seeds=(0, 1, 2, 3, 4),
                       out_path=None, configs=None) -> list[dict]:
    """Train every ablation row for every seed; returns one summary dict per row.

    A failing run is recorded (``n_failed``) and skipped; the other runs still
    produce results.  With ``out_path`` the summary is written as CSV and the
    per-seed results next to it (``*_runs.csv``).
    """
    configs = configs if configs is not None else ablation_configs(base)
    per_run, summary = [], []
    for name, cfg in configs:
        vals = []
        failed = 0
        for s in seeds:
            try:
                params, _ = train(cfg.replace(seed=s), _fresh(train_set), test_set)
                m = _row_metrics(params, test_set)
            except Exception as exc:  # keep partial results
                log.warning("ablation %s seed %s failed: %s", name, s, exc)
                failed += 1
                per_run.append({"config": name, "seed": s, "error": str(exc)})
                continue
            vals.append(m)
            per_run.append({"config": name, "seed": s, **m})
        row = {"config": name, "n_seeds": len(vals), "n_failed": failed}
        for key in ("recall@1", "recall@2", "recall@4", "recall@8", "nmi", "icv_ratio"):
            row[key] = float(np.mean([v[key] for v in vals])) if vals else float("nan")
        summary.append(row)
    if out_path is not None:
        out_path = Path(out_path)
        _write_csv(out_path, SUMMARY_FIELDS, summary)
        run_keys = ["config", "seed", "recall@1", "recall@2", "recall@4", "recall@8", "nmi", "icv_ratio", "error"]
        _write_csv(out_path.with_name(out_path.stem + "_runs.csv"), run_keys, per_run)
    return summary


def _fresh(ds: Dataset) -> Dataset:
    return Dataset(ds.features, ds.labels, None, ds.shared, ds.class_names)


def _write_csv(path: Path, keys, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
