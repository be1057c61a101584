"""Command-line front end: ``recast-lab {generate,train,sweep,eval,report,signals}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .env import Dataset, TabularPolicy, generate_dataset
from .evaluation import EvalConfig, evaluate, matched_budget_ratio
from .experiment import (
    CURVE_METRIC,
    ExperimentManifest,
    read_curve,
    run_experiment,
    run_training,
    write_json,
)
from .sid import CatalogShape
from .signals import SignalConfig, build_signal, group_from_json, signal_to_json
from .trainer import TrainConfig

TRAIN_FLAGS = {
    "mode": str,
    "G": int,
    "beta": float,
    "learning_rate": float,
    "steps": int,
    "prompts_per_step": int,
    "w": float,
    "epsilon": float,
    "c_roll": float,
    "c_upd": float,
    "refresh_old_every": int,
    "malform_rate": float,
}


def _load_dataset(args) -> Dataset:
    if args.dataset:
        return Dataset.from_jsonl(args.dataset)
    return generate_dataset(CatalogShape.parse(args.shape), args.num_prompts, args.dataset_seed)


def _dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="dataset JSONL written by `generate`")
    p.add_argument("--shape", default="8,8,8", help="catalog shape n_a,n_b,n_c (when no --dataset)")
    p.add_argument("--num-prompts", type=int, default=256)
    p.add_argument("--dataset-seed", type=int, default=7)


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, nargs="+", default=[1, 32], help="K values for Pass@K / Recall@K")
    p.add_argument("--eval-samples", type=int, default=None, help="responses per prompt (default max K)")
    p.add_argument("--eval-seed", type=int, default=0)


def _eval_config(args) -> EvalConfig:
    return EvalConfig(tuple(args.k), args.eval_samples or max(args.k), args.eval_seed)


def cmd_generate(args) -> int:
    ds = generate_dataset(CatalogShape.parse(args.shape), args.num_prompts, args.seed)
    ds.to_jsonl(args.out)
    print(f"wrote {len(ds)} prompts to {args.out}")
    return 0


def cmd_train(args) -> int:
    base = TrainConfig.from_json(args.config).to_dict() if args.config else {}
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    if args.seed is not None:
        base["seed"] = args.seed
    config = TrainConfig.from_dict(base)
    dataset = _load_dataset(args)
    result = run_training(dataset, config, _eval_config(args), args.eval_every, run_dir=Path(args.out))
    print(json.dumps(result.summary["final_metrics"], indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    manifest = ExperimentManifest.from_json(args.config) if args.config else ExperimentManifest()
    if args.seed is not None:
        manifest.train = {**manifest.train, "seed": args.seed}
    if args.modes:
        manifest.modes = args.modes
    if args.group_sizes:
        manifest.group_sizes = args.group_sizes
    if args.steps is not None:
        manifest.train = {**manifest.train, "steps": args.steps}
    if args.out_dir:
        manifest.out_dir = args.out_dir
    manifest = ExperimentManifest.from_dict(manifest.to_dict())
    result = run_experiment(manifest)
    print(json.dumps(
        {"matched_budget": result.summary["matched_budget"], "cost_table": result.summary["cost_table"]},
        indent=2, sort_keys=True,
    ))
    print(f"outputs in {manifest.run_path}")
    return 0


def cmd_eval(args) -> int:
    policy = TabularPolicy.load(args.checkpoint)
    dataset = _load_dataset(args)
    if policy.shape != dataset.shape or policy.num_prompts != len(dataset):
        print("checkpoint does not match dataset", file=sys.stderr)
        return 2
    metrics = evaluate(policy, dataset, _eval_config(args))
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    metric = args.metric
    reference = read_curve(Path(args.reference) / "curves" / f"{metric}.csv")
    ref_steps = args.reference_steps or reference.steps[-1]
    rows = []
    for cand in args.candidates:
        curve = read_curve(Path(cand) / "curves" / f"{metric}.csv")
        rows.append({
            "run": str(cand),
            "final": curve.final,
            "matched_budget_ratio": matched_budget_ratio(curve, reference.final, ref_steps),
        })
    table = {"metric": metric, "reference": str(args.reference), "reference_value": reference.final,
             "reference_steps": ref_steps, "rows": rows}
    if args.out:
        write_json(Path(args.out), table)
    print(f"{'run':40s} {'final':>10s} {'ratio':>8s}")
    for r in rows:
        ratio = "never" if r["matched_budget_ratio"] is None else f"{r['matched_budget_ratio']:.4f}"
        print(f"{r['run']:40s} {r['final']:10.5f} {ratio:>8s}")
    return 0


def cmd_signals(args) -> int:
    shape = CatalogShape.parse(args.shape)
    config = SignalConfig(args.mode, args.w, args.epsilon)
    for line in sys.stdin:
        if not line.strip():
            continue
        group = group_from_json(json.loads(line), shape)
        out_group, adv = build_signal(group, config, shape)
        sys.stdout.write(json.dumps(signal_to_json(out_group, adv)) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recast-lab", description="Repair-then-contrast signal lab on a synthetic recommender."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--shape", default="8,8,8")
    p.add_argument("--num-prompts", type=int, default=256)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one signal mode")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--eval-every", type=int, default=25)
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    _dataset_flags(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run modes x G from one manifest")
    p.add_argument("--config", help="ExperimentManifest JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--modes", nargs="+")
    p.add_argument("--group-sizes", type=int, nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _dataset_flags(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="matched-budget table from run directories")
    p.add_argument("--reference", required=True, help="reference run directory")
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--metric", default=CURVE_METRIC)
    p.add_argument("--reference-steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("signals", help="JSONL filter: scored groups in, signals out")
    p.add_argument("--shape", required=True)
    p.add_argument("--mode", default="recast")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.set_defaults(func=cmd_signals)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
