"""Elastic low-rank adaptation.

SVD-parameterized low-rank adapters on frozen weights whose per-matrix ranks
are pruned and expanded during training from gradient-sensitivity scores,
plus a small experiment harness and CLI around them.
"""
from .adapter import AdapterLayer, adapter_forward, expand_rank, ortho_penalty, prune_rank
from .allocator import (
    AdjustmentEvent,
    AllocatorConfig,
    Phase,
    adjust,
    collect_candidates,
    phase_of,
    progress,
    scheduled_budget,
)
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    ElasticRankError,
    FloorViolationError,
    TrainingAbort,
)
from .importance import ImportanceTracker, RankScore, rank_scores, sensitivity
from .kernels import BACKEND

__version__ = "0.1.0"
