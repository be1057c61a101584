"""Training runs, multi-mode experiments, and their on-disk outputs.

Layout of one run directory::

    <run>/steps.csv            one row per training step (STEP_COLUMNS order)
    <run>/curves/<metric>.csv  step,value at every eval point
    <run>/summary.json         config echo, final metrics, composition and repair dynamics
    <run>/plots/*.dat          whitespace-separated plot data
    <run>/checkpoint.npz       final policy logits

An experiment writes one run directory per (mode, G) under ``<out_dir>/<run_id>/``
plus a top-level ``summary.json`` and ``plots/``. Nothing time-dependent is
written, so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .env import Dataset, TabularPolicy, generate_dataset
from .evaluation import (
    EvalConfig,
    LearningCurve,
    composition_stats,
    evaluate,
    matched_budget_ratio,
)
from .sid import CatalogShape
from .signals import SignalMode
from .trainer import (
    STEP_COLUMNS,
    StepReport,
    TrainConfig,
    TrainState,
    collect_batch,
    cost_model,
    train_step,
)

log = logging.getLogger(__name__)

CURVE_METRIC = "pass1_exact"


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _clean(obj):
    """Make a structure JSON-safe: numpy scalars to Python, NaN to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_dat(path: Path, columns: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def write_steps_csv(path: Path, reports: list[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STEP_COLUMNS)
        for r in reports:
            writer.writerow([_fmt(getattr(r, c)) for c in STEP_COLUMNS])


def read_curve(path: Path, name: Optional[str] = None) -> LearningCurve:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return LearningCurve(name or Path(path).stem, [int(r["step"]) for r in rows], [float(r["value"]) for r in rows])


def thirds(values: list[float]) -> list[float]:
    """Means over the first, middle and last third of a sequence."""
    n = len(values)
    cuts = [0, n // 3, 2 * n // 3, n]
    return [float(np.mean(values[cuts[i] : cuts[i + 1]])) if cuts[i + 1] > cuts[i] else math.nan for i in range(3)]


@dataclass
class RunResult:
    name: str
    config: TrainConfig
    reports: list[StepReport]
    curves: dict[str, LearningCurve]
    summary: dict
    policy: TabularPolicy


def run_training(
    dataset: Dataset,
    config: TrainConfig,
    eval_cfg: EvalConfig = EvalConfig(),
    eval_every: int = 25,
    run_dir: Optional[Path] = None,
    initial_policy: Optional[TabularPolicy] = None,
    name: Optional[str] = None,
) -> RunResult:
    """Train one mode from a uniform (or given) policy; evaluate every ``eval_every`` steps."""
    if eval_every < 1:
        raise ValueError("eval_every must be >= 1")
    name = name or f"{config.mode.value}_G{config.G}"
    policy = initial_policy.copy() if initial_policy is not None else TabularPolicy.uniform(dataset.shape, len(dataset))
    state = TrainState.initial(policy)
    curves: dict[str, LearningCurve] = {}

    def record(step: int) -> None:
        for metric, value in evaluate(state.policy, dataset, eval_cfg).items():
            curves.setdefault(metric, LearningCurve(metric)).append(step, value)

    record(0)
    reports = []
    for _ in range(config.steps):
        reports.append(train_step(state, dataset, config))
        if state.step % eval_every == 0 or state.step == config.steps:
            record(state.step)
            log.debug("%s step %d %s=%.5f", name, state.step, CURVE_METRIC, curves[CURVE_METRIC].final)

    summary = summarize_run(name, dataset, config, eval_cfg, eval_every, reports, curves)
    result = RunResult(name, config, reports, curves, summary, state.policy)
    if run_dir is not None:
        write_run(Path(run_dir), result)
    return result


def summarize_run(name, dataset, config, eval_cfg, eval_every, reports, curves) -> dict:
    def ratio(field_name):
        return [getattr(r, field_name) / r.groups_total for r in reports]

    summary = {
        "name": name,
        "config": config.to_dict(),
        "eval": asdict(eval_cfg),
        "eval_every": eval_every,
        "dataset": {"shape": list(dataset.shape.as_tuple()), "num_prompts": len(dataset), "seed": dataset.seed},
        "final_metrics": {m: c.final for m, c in curves.items()},
        "initial_metrics": {m: c.values[0] for m, c in curves.items()},
        "totals": {
            "active_responses": sum(r.active_responses for r in reports),
            "active_tokens": sum(r.active_tokens for r in reports),
            "total_tokens": sum(r.total_tokens for r in reports),
            "cost_base": sum(r.cost_base for r in reports),
            "cost_method": sum(r.cost_method for r in reports),
            "repair_triggers": sum(r.repair_triggers for r in reports),
            "skipped_contrasts": sum(r.skipped_contrasts for r in reports),
        },
    }
    if reports:
        summary["composition_thirds"] = {
            "all_zero_ratio": thirds(ratio("groups_all_zero")),
            "single_hit_ratio": thirds(ratio("groups_single_hit")),
            "zero_reward_sample_ratio": thirds([r.zero_reward_samples / (r.groups_total * config.G) for r in reports]),
        }
        summary["repair_thirds"] = {
            "repair_trigger_ratio": thirds(ratio("repair_triggers")),
            "naturally_trainable_ratio": thirds(ratio("naturally_trainable")),
        }
    return summary


def write_run(run_dir: Path, result: RunResult) -> None:
    (run_dir / "curves").mkdir(parents=True, exist_ok=True)
    (run_dir / "plots").mkdir(exist_ok=True)
    write_steps_csv(run_dir / "steps.csv", result.reports)
    for metric, curve in result.curves.items():
        with open(run_dir / "curves" / f"{metric}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "value"])
            writer.writerows([s, _fmt(v)] for s, v in zip(curve.steps, curve.values))
    write_dat(
        run_dir / "plots" / "composition.dat",
        ["step", "all_zero_ratio", "single_hit_ratio", "zero_reward_sample_ratio", "repair_trigger_ratio",
         "naturally_trainable_ratio"],
        [
            (r.step, r.groups_all_zero / r.groups_total, r.groups_single_hit / r.groups_total,
             r.zero_reward_samples / (r.groups_total * result.config.G), r.repair_triggers / r.groups_total,
             r.naturally_trainable / r.groups_total)
            for r in result.reports
        ],
    )
    curve = result.curves[CURVE_METRIC]
    write_dat(run_dir / "plots" / f"{CURVE_METRIC}.dat", ["step", CURVE_METRIC], zip(curve.steps, curve.values))
    write_json(run_dir / "summary.json", result.summary)
    result.policy.save(run_dir / "checkpoint.npz")


@dataclass
class ExperimentManifest:
    run_id: str = "experiment"
    out_dir: str = "runs"
    shape: tuple[int, int, int] = (8, 8, 8)
    num_prompts: int = 256
    dataset_seed: int = 7
    modes: list[str] = field(default_factory=lambda: ["grpo", "recast"])
    group_sizes: list[int] = field(default_factory=lambda: [8])
    eval_every: int = 25
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(CatalogShape.parse(self.shape).as_tuple())
        self.modes = [SignalMode(m).value for m in self.modes]
        unknown = {"mode", "G"} & set(self.train)
        if unknown:
            raise ValueError(f"set {sorted(unknown)} through modes/group_sizes, not train")
        # fail fast on inconsistent configs before any training starts
        self.train_config(self.modes[0], self.group_sizes[0])
        self.eval_config()

    @property
    def run_path(self) -> Path:
        return Path(self.out_dir) / self.run_id

    def train_config(self, mode: str, G: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "mode": mode, "G": G})

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.eval)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ExperimentResult:
    summary: dict
    runs: dict[str, RunResult]


def run_experiment(manifest: ExperimentManifest, write: bool = True) -> ExperimentResult:
    """Run every (G, mode) pair from one dataset and one initial policy.

    Only signal construction differs between runs: the dataset, the initial
    policy, the per-step prompt batches and rollout streams, and the eval
    streams are shared.
    """
    shape = CatalogShape(*manifest.shape)
    dataset = generate_dataset(shape, manifest.num_prompts, manifest.dataset_seed)
    initial = TabularPolicy.uniform(shape, len(dataset))
    eval_cfg = manifest.eval_config()
    root = manifest.run_path
    runs: dict[str, RunResult] = {}
    for G in manifest.group_sizes:
        for mode in manifest.modes:
            cfg = manifest.train_config(mode, G)
            name = f"{mode}_G{G}"
            log.info("running %s", name)
            runs[name] = run_training(
                dataset, cfg, eval_cfg, manifest.eval_every,
                run_dir=root / name if write else None, initial_policy=initial, name=name,
            )

    base_train = manifest.train_config(manifest.modes[0], manifest.group_sizes[0])
    matched = {}
    for G in manifest.group_sizes:
        ref = runs.get(f"grpo_G{G}")
        if ref is None:
            continue
        target = ref.curves[CURVE_METRIC].final
        matched[f"G{G}"] = {
            "reference_value": target,
            "reference_steps": ref.config.steps,
            "ratios": {
                mode: matched_budget_ratio(runs[f"{mode}_G{G}"].curves[CURVE_METRIC], target, ref.config.steps)
                for mode in manifest.modes
            },
        }
    cost_rows = []
    for G in manifest.group_sizes:
        base, _ = cost_model(G, base_train.c_roll, base_train.c_upd, SignalMode.GRPO)
        _, method = cost_model(G, base_train.c_roll, base_train.c_upd, SignalMode.RECAST)
        upd_base, upd_method = G * base_train.c_upd, 2 * base_train.c_upd
        cost_rows.append((G, base, method, upd_base, upd_method, upd_method / upd_base))

    summary = {
        # out_dir is left out so outputs do not depend on where they are written
        "manifest": {k: v for k, v in manifest.to_dict().items() if k != "out_dir"},
        "metric": CURVE_METRIC,
        "matched_budget": matched,
        "matched_budget_note": f"first crossing at eval points every {manifest.eval_every} steps, no interpolation",
        "runs": {name: r.summary for name, r in runs.items()},
        "cost_table": [
            dict(zip(["G", "cost_base", "cost_method", "update_base", "update_method", "update_ratio"], row))
            for row in cost_rows
        ],
        "step0_composition": {},
    }
    # pre-repair composition of the very first batch is identical across modes
    for name, r in runs.items():
        first = r.reports[0] if r.reports else None
        if first is not None:
            summary["step0_composition"][name] = {
                "all_zero_ratio": first.groups_all_zero / first.groups_total,
                "single_hit_ratio": first.groups_single_hit / first.groups_total,
                "zero_reward_sample_ratio": first.zero_reward_samples / (first.groups_total * r.config.G),
            }

    if write:
        (root / "plots").mkdir(parents=True, exist_ok=True)
        write_json(root / "summary.json", summary)
        write_dat(root / "plots" / "cost_vs_G.dat",
                  ["G", "cost_base", "cost_method", "update_base", "update_method", "update_ratio"], cost_rows)
        names = list(runs)
        if names:
            steps = runs[names[0]].curves[CURVE_METRIC].steps
            if all(runs[n].curves[CURVE_METRIC].steps == steps for n in names):
                cols = [runs[n].curves[CURVE_METRIC].values for n in names]
                write_dat(root / "plots" / "early_pass1.dat", ["step", *names],
                          [(s, *(c[i] for c in cols)) for i, s in enumerate(steps)])
    return ExperimentResult(summary, runs)


def step0_composition(dataset: Dataset, config: TrainConfig, batches: int = 1) -> dict[str, float]:
    """Pre-repair composition of the first ``batches`` batches from the uniform policy."""
    state = TrainState.initial(TabularPolicy.uniform(dataset.shape, len(dataset)))
    groups = []
    for step in range(batches):
        state.step = step
        pre, _ = collect_batch(state, dataset, config)
        groups.extend(pre)
    return composition_stats(groups)


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **clean) if clean else config
