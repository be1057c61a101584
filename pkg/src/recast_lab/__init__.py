"""Repair-then-contrast group signals vs reward normalization on a synthetic recommender."""
from .env import Dataset, PromptSpec, TabularPolicy, generate_dataset, sample_group
from .evaluation import EvalConfig, composition_stats, matched_budget_ratio, pass_at_k, recall_at_k
from .scoring import phi, structural_score, task_reward
from .sid import CatalogShape, SemanticId, parse_response, render_sid
from .signals import (
    AdvantageVector,
    ScoredGroup,
    SignalConfig,
    SignalMode,
    build_signal,
    grpo_advantages,
    hit_count,
    make_anchor,
    recast_advantages,
    repair_group,
    select_boundary,
)
from .trainer import TrainConfig, TrainState, cost_model, kl_divergence, objective_gradient, train_step

__version__ = "0.1.0"
