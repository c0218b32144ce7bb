import json

import numpy as np
import pytest

from mic import data as D
from mic import metrics as M
from mic import model as mdl
from mic import train as T


@pytest.fixture(scope="module")
def split():
    tr, te, _ = D.zero_shot_split(D.generate_synthetic(num_classes=8, per_class=16, input_dim=32, seed=0))
    return tr, te


def small(**kw):
    base = dict(d_alpha=8, d_beta=8, feature_dim=16, hidden_dims=(16,), batch_size=16, per_class=4,
                epochs=2, clusters=3, gamma=1.0)
    base.update(kw)
    return T.TrainConfig(**base)


def fresh(ds):
    return D.Dataset(ds.features, ds.labels, None, ds.shared)


# --- config ---

def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(gamma=-1)
    with pytest.raises(ValueError):
        T.TrainConfig(update_period=0)
    with pytest.raises(ValueError):
        T.TrainConfig(label_switch_p=1.5)
    with pytest.raises(ValueError):
        T.TrainConfig(d_beta=0)          # clustering on needs the auxiliary branch
    assert T.baseline_config(T.TrainConfig()).d_beta == 0


def test_load_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nepochs = 7\nmutual_info_on = off\nhidden_dims = 32,16\n"
                 "data.noise_std = 0.05  # inline\ndata.class_rank = none\n", encoding="utf-8")
    cfg, spec = T.load_config(p, ["seed=3"])
    assert cfg.epochs == 7 and cfg.mutual_info_on is False and cfg.hidden_dims == (32, 16)
    assert cfg.seed == 3 and spec.noise_std == 0.05 and spec.class_rank is None


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.cfg"):
        T.load_config(tmp_path / "missing.cfg")
    with pytest.raises(KeyError):
        T.parse_overrides(["nonsense=1"])
    with pytest.raises(ValueError):
        T.parse_overrides(["clustering_on=maybe"])


# --- training runs ---

def test_smoke_run(split):
    tr, te = split
    tr64 = fresh(tr)
    assert len(tr64.labels) == 64
    params, log = T.train(small(), tr64, te)
    assert len(log.records) == 2
    for rec in log.records:
        assert np.isfinite(rec["l_alpha"]) and np.isfinite(rec["l_beta"]) and np.isfinite(rec["l_d"])
        assert {"epoch", "wall_time", "label_churn", "margin_beta"} <= set(rec)
    out = mdl.embed(params, te.features)
    assert np.max(np.abs(np.linalg.norm(out.e_alpha, axis=1) - 1)) < 1e-12
    assert np.max(np.abs(np.linalg.norm(out.e_beta, axis=1) - 1)) < 1e-12
    ev = log.records[-1]["eval"]
    assert {"train_alpha", "train_beta", "test_alpha", "test_beta"} <= set(ev)


@pytest.mark.parametrize("kind", ["triplet-semihard", "proxynca"])
def test_other_losses_run(split, kind):
    tr, te = split
    _, log = T.train(small(loss_kind=kind), fresh(tr), te)
    assert all(np.isfinite(r["l_alpha"]) for r in log.records)


def test_runs_bitwise_deterministic(split, tmp_path):
    tr, te = split
    cfg = small(epochs=3)
    _, a = T.train(cfg, fresh(tr), te, log_path=tmp_path / "a.jsonl")
    _, b = T.train(cfg, fresh(tr), te, log_path=tmp_path / "b.jsonl")
    assert a.deterministic_view() == b.deterministic_view()
    ra = T.RunLog.read(tmp_path / "a.jsonl").deterministic_view()
    rb = T.RunLog.read(tmp_path / "b.jsonl").deterministic_view()
    assert json.dumps(ra, sort_keys=True) == json.dumps(rb, sort_keys=True)


def test_flags_off_matches_baseline(split):
    tr, te = split
    off = small(clustering_on=False, standardize_on=False, mutual_info_on=False)
    p_off, log_off = T.train(off, fresh(tr), te)
    p_base, log_base = T.train(T.baseline_config(off), fresh(tr), te)
    assert log_off.column("l_alpha") == log_base.column("l_alpha")
    for k, v in p_base.tensors.items():
        assert np.array_equal(v, p_off.tensors[k])


def test_gamma_zero_is_clust_stand(split):
    tr, te = split
    _, a = T.train(small(gamma=0.0), fresh(tr), te)
    _, b = T.train(small(mutual_info_on=False), fresh(tr), te)
    assert a.column("l_alpha") == b.column("l_alpha")
    assert all(v is None for v in a.column("l_d"))


def _audit(cfg, tr):
    t = T.Trainer(cfg, fresh(tr))
    t.audit = True
    t.run()
    return t.grad_audit


def test_gradient_accounting_without_mutual_info(split):
    tr, _ = split
    for which, names in _audit(small(mutual_info_on=False, epochs=1), tr):
        groups = {n.split(".")[0] for n in names}
        if which == "alpha":
            assert groups == {"f", "alpha", "margin_beta"}
        else:
            assert groups == {"f", "beta", "margin_beta_aux"}


def test_gradient_accounting_with_mutual_info(split):
    tr, _ = split
    audit = _audit(small(epochs=1), tr)
    assert {w for w, _ in audit} == {"alpha", "beta"}
    for which, names in audit:
        groups = {n.split(".")[0] for n in names}
        assert groups == {"f", "alpha", "beta", "R",
                          "margin_beta" if which == "alpha" else "margin_beta_aux"}


def test_alpha_step_ignores_auxiliary_loss(split, monkeypatch):
    """Scaling l_beta must not change anything the alpha step applies."""
    tr, _ = split
    cfg = small(epochs=1)
    t1 = T.Trainer(cfg, fresh(tr))
    t1._set_labels(t1.initial_labels())
    x, ya = tr.features[:16], tr.labels[:16]
    yb = t1.train_set.surrogate[:16]
    before = {k: v.copy() for k, v in t1.params.tensors.items()}
    t1._step("alpha", x, ya, yb)
    t2 = T.Trainer(cfg.replace(margin_alpha=0.2), fresh(tr))
    t2._set_labels(t2.initial_labels())
    orig = T.L.embedding_loss

    def scaled(kind, e, labels, lcfg, beta=None, proxies=None, rng=None):
        out = orig(kind, e, labels, lcfg, beta=beta, proxies=proxies, rng=rng)
        return out if e.shape[1] == cfg.d_alpha and labels is ya else T.ad.scale(out, 1000.0)

    monkeypatch.setattr(T.L, "embedding_loss", scaled)
    t2._step("alpha", x, ya, yb)
    for k in before:
        assert np.array_equal(t1.params.tensors[k], t2.params.tensors[k])


def test_label_update_schedule(split):
    tr, _ = split
    t = T.Trainer(small(epochs=7, update_period=3), fresh(tr))
    _, log = t.run()
    assert t.label_updates == [-1, 0, 3, 6]
    churn = log.column("label_churn")
    assert [e for e, c in enumerate(churn) if c is not None] == [0, 3, 6]


def test_divergence_writes_checkpoint(split, tmp_path, monkeypatch):
    tr, _ = split
    monkeypatch.setattr(T.L, "embedding_loss", lambda *a, **k: np.array([[np.nan]]))
    with pytest.raises(T.TrainingDiverged, match="diverged.npz"):
        T.train(small(), fresh(tr), out_dir=tmp_path)
    assert mdl.load_checkpoint(tmp_path / "diverged.npz").d_alpha == 8


def test_loss_curve_makes_progress():
    tr, te, _ = D.zero_shot_split(D.generate_synthetic(seed=0))
    _, log = T.train(T.TrainConfig(epochs=50), tr)
    la = np.array(log.column("l_alpha"))
    assert np.all(np.isfinite(la))
    ma = np.convolve(la, np.ones(10) / 10, mode="valid")
    # minibatch noise on the late plateau is allowed up to 1% of the starting level
    assert np.all(np.diff(ma) <= 0.01 * ma[0])
    assert ma[-1] < 0.5 * ma[0]


# --- evaluation ---

def test_evaluate_trained_beats_untrained():
    ds = D.generate_synthetic(num_classes=8, per_class=10, input_dim=32, noise_std=0.0, class_scale=0.3,
                              shared_scale=1.0, seed=1)
    cfg = T.baseline_config(small(epochs=30))
    untrained = mdl.init_params(32, 16, 8, 0, (16,), seed=0)
    trained, _ = T.train(cfg, fresh(ds))
    r0 = T.evaluate(untrained, ds)[0].recall_at[1]
    r1 = T.evaluate(trained, ds)[0].recall_at[1]
    assert r0 < r1


def test_evaluate_reports_three_views(split):
    tr, te = split
    params = mdl.init_params(32, 16, 8, 4, (16,), seed=0)
    reps = T.evaluate(params, te)
    assert [r.encoder for r in reps] == ["alpha", "beta", "concat"]
    for r in reps:
        vals = [r.recall_at[k] for k in (1, 2, 4, 8)]
        assert vals == sorted(vals) and 0 <= r.nmi <= 1 and r.intra_class_variance_ratio >= 0


def test_evaluate_matches_dumped_embeddings(split, tmp_path):
    tr, te = split
    params = mdl.init_params(32, 16, 8, 4, (16,), seed=0)
    rep = T.evaluate(params, te)[0]
    labels, _, ea, _ = M.load_embedding_dump(M.dump_embeddings(params, te, tmp_path / "d.csv"))
    again = M.evaluate_embeddings(ea, labels, "alpha")
    assert again.nmi == rep.nmi and again.recall_at == rep.recall_at


# --- ablation suite ---

def test_ablation_configs_cover_sweeps():
    names = [n for n, _ in T.ablation_configs(T.TrainConfig(clusters=4, d_alpha=32))]
    assert names[:4] == ["baseline", "clust", "clust+stand", "clust+stand+mutinfo"]
    assert {"clusters=2", "clusters=4", "clusters=8"} <= set(names)
    assert {f"update_period={t}" for t in (1, 2, 5, 10)} <= set(names)
    assert {"d_beta=0", "d_beta=8", "d_beta=32"} <= set(names)


def test_ablation_suite_csv_and_partial_failure(split, tmp_path):
    tr, te = split
    base = small(epochs=1)
    configs = T.ablation_configs(base)[:2] + [("broken", base.replace(clusters=10_000))]
    rows = T.run_ablation_suite(base, tr, te, seeds=(0,), out_path=tmp_path / "abl.csv", configs=configs)
    assert [r["n_failed"] for r in rows] == [0, 0, 1]
    text = (tmp_path / "abl.csv").read_text().splitlines()
    assert text[0].split(",") == T.SUMMARY_FIELDS and len(text) == 4
    assert all(np.isfinite(rows[i]["recall@1"]) for i in range(2))
    p, _ = T.train(T.baseline_config(base), fresh(tr), te)
    assert rows[0]["recall@1"] == T.evaluate(p, te)[0].recall_at[1]
    assert "error" in (tmp_path / "abl_runs.csv").read_text().splitlines()[0]
