"""Command-line entry point: ``bmfal {gen-initial,plan,solve,run,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .acquisition import McInputSet
from .loop import (Evaluator, ExperimentConfig, init_dataset, model_config_for, records_to_csv,
                   run_experiment)
from .model import Dataset, init_model, load_model, save_model, train
from .planner import plan_batch
from .simulators import make_oracle


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    d = cfg.to_dict()
    for key, attr in [("strategy", "strategy"), ("problem", "problem"), ("budget", "budget"),
                      ("num_batches", "batches"), ("seed", "seed")]:
        val = getattr(args, attr, None)
        if val is not None:
            d[key] = val
    return ExperimentConfig.from_dict(d)


def _oracle(cfg: ExperimentConfig):
    oracle = make_oracle(cfg.problem, cfg.num_fidelities)
    oracle.ladder.lambdas = [Fraction(l) for l in cfg.lambdas]
    return oracle


def _model_for(cfg, oracle, dataset, model_path=None):
    if model_path:
        return load_model(model_path)
    model = init_model(model_config_for(oracle, cfg), seed=cfg.seed, dataset=dataset)
    return train(model, dataset, cfg.train_config(cfg.initial_epochs, cfg.seed))


def cmd_gen_initial(args):
    cfg = _load_config(args)
    oracle = _oracle(cfg)
    counts = [int(c) for c in args.counts.split(",")] if args.counts else cfg.initial_counts
    ds = init_dataset(oracle, counts, cfg.seed)
    ds.to_jsonl(args.out)
    print(f"wrote {len(ds)} examples to {args.out}")


def cmd_plan(args):
    cfg = _load_config(args)
    oracle = _oracle(cfg)
    ds = Dataset.from_jsonl(args.dataset)
    model = _model_for(cfg, oracle, ds, args.model)
    if args.save_model:
        save_model(model, args.save_model)
    mc = McInputSet.draw(oracle.domain, cfg.mc_samples, cfg.seed)
    plan = plan_batch(model, cfg.cost_model, cfg.optimizer_config(cfg.seed), mc, oracle.domain,
                      args.mode)
    text = plan.to_json(args.out)
    if args.out is None:
        print(text)


def cmd_solve(args):
    oracle = make_oracle(args.problem, args.num_fidelities)
    x = np.array([float(v) for v in args.input.split(",")])
    y, cost = oracle.query(x, args.fidelity)
    mesh = oracle.ladder.meshes[args.fidelity - 1]
    doc = {"problem": args.problem, "fidelity": args.fidelity, "input": x.tolist(),
           "mesh": {"n": mesh.n, "h": mesh.h, "layout": "row-major, first index along s1"},
           "cost": str(cost), "field": y.tolist()}
    text = json.dumps(doc)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_run(args):
    cfg = _load_config(args)
    records = run_experiment(cfg, args.out)
    if args.out is None:
        sys.stdout.write(records_to_csv(records, cfg.num_fidelities, cfg.record_timing))


def cmd_eval(args):
    cfg = _load_config(args)
    oracle = _oracle(cfg)
    if args.model:
        model = load_model(args.model)
    elif args.dataset:
        model = _model_for(cfg, oracle, Dataset.from_jsonl(args.dataset))
    else:
        raise SystemExit("eval needs --model or --dataset")
    err = Evaluator(oracle, cfg.test_size, cfg.test_seed)(model)
    print(json.dumps({"nrmse": err, "test_size": cfg.test_size, "test_seed": cfg.test_seed}))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bmfal", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--problem", choices=["poisson", "heat", "synthetic"])
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("gen-initial", help="sample an initial dataset"))
    p.add_argument("--counts", help="comma-separated examples per fidelity, e.g. 10,2")
    p.add_argument("--out", required=True, help="dataset JSONL path")
    p.set_defaults(func=cmd_gen_initial)

    p = common(sub.add_parser("plan", help="plan one batch from a dataset"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="checkpoint to use instead of training")
    p.add_argument("--save-model", help="write the trained checkpoint here")
    p.add_argument("--budget")
    p.add_argument("--mode", choices=["standard", "exceed_once"], default="standard")
    p.add_argument("--out", help="plan JSON path (stdout if omitted)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("solve", help="run one simulator query")
    p.add_argument("--problem", choices=["poisson", "heat", "synthetic"], required=True)
    p.add_argument("--fidelity", type=int, required=True)
    p.add_argument("--input", required=True, help='comma-separated input, e.g. "0.3,0.6"')
    p.add_argument("--num-fidelities", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = common(sub.add_parser("run", help="run an active-learning experiment"))
    p.add_argument("--strategy", choices=["BMFAL_BC", "DMFAL_BC", "MFAL_BC", "DMFAL_BC_RF",
                                          "MFAL_BC_RF", "BATCH_FR_BC"])
    p.add_argument("--budget")
    p.add_argument("--batches", type=int)
    p.add_argument("--out", help="output directory (CSV to stdout if omitted)")
    p.set_defaults(func=cmd_run)

    p = common(sub.add_parser("eval", help="nRMSE of a model on the held-out set"))
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
