"""Command line entry point: ``mic {train,eval,gen-data,ablate,gradcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as gc
from . import metrics
from . import model as mdl
from . import train as T

OUT_DIR_ENV = "MIC_OUT_DIR"
GRADCHECK_TOL = 1e-4


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _configs(args):
    overrides = list(args.set or [])
    if args.config:
        cfg, spec = T.load_config(args.config, overrides)
    else:
        cfg, spec = T.parse_overrides(overrides)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg, spec


def _datasets(args, spec: T.SyntheticSpec):
    if getattr(args, "train_csv", None):
        train = D.load_features_csv(args.train_csv, header=args.header)
        test = D.load_features_csv(args.test_csv, header=args.header) if args.test_csv else None
        return train, test
    train, test, _ = D.zero_shot_split(T.generate(spec))
    return train, test


def cmd_train(args) -> int:
    cfg, spec = _configs(args)
    out = _out_dir(args)
    train_set, test_set = _datasets(args, spec)
    log_path = out / "runlog.jsonl"
    log_path.unlink(missing_ok=True)
    params, runlog = T.train(cfg, train_set, test_set, out_dir=out, log_path=log_path)
    ckpt = mdl.save_checkpoint(params, out / "model.npz")
    (out / "config.json").write_text(json.dumps({"train": cfg.to_dict(), "data": dataclasses.asdict(spec)},
                                                indent=2, sort_keys=True) + "\n", encoding="utf-8")
    last = runlog.records[-1]
    summary = {"checkpoint": str(ckpt), "runlog": str(log_path), "epochs": len(runlog.records),
               "l_alpha": last["l_alpha"]}
    if "test_alpha" in last.get("eval", {}):
        summary["test_recall@1"] = last["eval"]["test_alpha"]["recall_at"]["1"]
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    _, spec = _configs(args)
    params = mdl.load_checkpoint(args.checkpoint)
    if args.data:
        ds = D.load_features_csv(args.data, header=args.header)
    else:
        ds = D.zero_shot_split(T.generate(spec))[1]
    if ds.input_dim != params.input_dim:
        raise D.DataError(f"data has {ds.input_dim} features, checkpoint expects {params.input_dim}")
    reports = T.evaluate(params, ds)
    out = _out_dir(args)
    with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")
            print(rep.to_json())
    if args.dump:
        metrics.dump_embeddings(params, ds, args.dump)
    return 0


def cmd_gen_data(args) -> int:
    _, spec = _configs(args)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _out_dir(args)
    ds = T.generate(spec)
    train, test, split = D.zero_shot_split(ds)
    D.save_features_csv(train, out / "train.csv", header=args.header)
    D.save_features_csv(test, out / "test.csv", header=args.header)
    np.savetxt(out / "shared.txt", ds.shared, fmt="%d")
    print(json.dumps({"train": str(out / "train.csv"), "test": str(out / "test.csv"),
                      "train_classes": len(split.train_classes), "test_classes": len(split.test_classes)}))
    return 0


def cmd_ablate(args) -> int:
    cfg, spec = _configs(args)
    out = _out_dir(args)
    train_set, test_set = _datasets(args, spec)
    if test_set is None:
        raise D.DataError("ablate needs a test split (--test-csv)")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = T.run_ablation_suite(cfg, train_set, test_set, seeds, out / "ablation.csv")
    for r in rows:
        print(f"{r['config']:<24} recall@1={r['recall@1']:.4f} failed={r['n_failed']}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed or 0, (args.seed or 0) + args.n_seeds)
    err = gc.run(seeds, gamma=args.gamma)
    print(f"max relative error {err:.3e} over {args.n_seeds} seeds")
    return 0 if err < GRADCHECK_TOL else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("--header", action="store_true", help="feature CSVs carry a header row")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mic", description="Class and shared-characteristic metric learning.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--train-csv")
    t.add_argument("--test-csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="feature CSV (default: synthetic test split)")
    e.add_argument("--dump", help="also write an embedding dump CSV here")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic zero-shot split as CSV")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    a.add_argument("--train-csv")
    a.add_argument("--test-csv")
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")
    c.add_argument("--n-seeds", type=int, default=20)
    c.add_argument("--gamma", type=float, default=1.0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError, mdl.CheckpointError, T.TrainingDiverged, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mic {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
