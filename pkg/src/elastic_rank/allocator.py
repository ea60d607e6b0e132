"""Phase schedule, cubic budget scheduler, and the prune/expand step."""
from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import AdapterLayer, expand_rank, prune_rank
from .errors import ConfigError
from .importance import ImportanceTracker, RankScore, rank_scores

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    WARMUP = "warmup"
    ADJUSTING = "adjusting"
    STABILIZING = "stabilizing"


@dataclass(frozen=True)
class AllocatorConfig:
    total_steps: int
    t_warmup: int
    t_stabilize: int
    adjust_interval: int
    k: int = 1
    b: int = 1
    init_rank: int = 2
    use_scheduler: bool = True

    def __post_init__(self):
        for name in ("total_steps", "t_warmup", "t_stabilize", "adjust_interval", "k", "b", "init_rank"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"must be an integer, got {value!r}", name)
        if self.t_warmup < 0 or self.t_stabilize < 0:
            raise ConfigError("phase lengths must be non-negative", "t_warmup/t_stabilize")
        if self.t_warmup + self.t_stabilize >= self.total_steps:
            raise ConfigError(
                f"warmup ({self.t_warmup}) + stabilize ({self.t_stabilize}) leaves no adjustment "
                f"window in {self.total_steps} steps",
                "total_steps",
            )
        for name in ("adjust_interval", "k", "b", "init_rank"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)

    @property
    def window_end(self) -> int:
        return self.total_steps - self.t_stabilize

    def adjustment_steps(self) -> list[int]:
        return list(range(self.t_warmup + self.adjust_interval, self.window_end, self.adjust_interval))

    @property
    def n_events(self) -> int:
        return len(self.adjustment_steps())

    def capacity(self, d1: int, d2: int, expanding: bool = True) -> int:
        """Slots to allocate so that expansion can never run out of room."""
        cap = self.init_rank + (self.k * self.n_events if expanding else 0)
        return min(cap, d1, d2)


def phase_of(step: int, cfg: AllocatorConfig) -> Phase:
    if step < cfg.t_warmup:
        return Phase.WARMUP
    if step >= cfg.window_end:
        return Phase.STABILIZING
    return Phase.ADJUSTING


def is_adjustment_step(step: int, cfg: AllocatorConfig) -> bool:
    offset = step - cfg.t_warmup
    return phase_of(step, cfg) is Phase.ADJUSTING and offset > 0 and offset % cfg.adjust_interval == 0


def progress(step: int, cfg: AllocatorConfig) -> float:
    width = cfg.window_end - cfg.t_warmup
    return min(1.0, max(0.0, (step - cfg.t_warmup) / width))


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def scheduled_budget(step: int, cfg: AllocatorConfig, n_matrices: int | None = None) -> int:
    """Ranks to prune (and expand) at ``step``: ``round(b * (1 - P^3))``, or ``b`` without scheduler.

    With ``n_matrices`` given the result is clamped to ``floor(k * n / 2)``
    so the prune and expand halves of the candidate pool cannot overlap.
    """
    if cfg.use_scheduler:
        p = progress(step, cfg)
        budget = round_half_away(cfg.b * (1.0 - p**3))
    else:
        budget = cfg.b
    if n_matrices is not None:
        budget = min(budget, (cfg.k * n_matrices) // 2)
    return budget


def candidate_sort_key(s: RankScore) -> tuple:
    return (s.score, s.layer_id, s.matrix_id, s.rank_index)


def collect_candidates(layers: Sequence[AdapterLayer], scores: Sequence[RankScore], k: int) -> list[RankScore]:
    """The k lowest-scoring active ranks of every matrix, sorted ascending across matrices."""
    by_matrix: dict[tuple, list[RankScore]] = {layer.key: [] for layer in layers}
    for s in scores:
        by_matrix[s.key].append(s)
    pool = []
    for group in by_matrix.values():
        group.sort(key=candidate_sort_key)
        pool.extend(group[:k])
    pool.sort(key=candidate_sort_key)
    return pool


@dataclass
class AdjustmentEvent:
    step: int
    b_t: int
    pruned: list[tuple] = field(default_factory=list)
    expanded: list[tuple] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "b_t": self.b_t,
            "pruned": [list(p) for p in self.pruned],
            "expanded": [list(e) for e in self.expanded],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdjustmentEvent":
        return cls(d["step"], d["b_t"], [tuple(p) for p in d["pruned"]], [tuple(e) for e in d["expanded"]])


def select_moves(
    pool: Sequence[RankScore],
    ranks: dict[tuple, int],
    k: int,
    budget: int,
    expand: bool = True,
) -> tuple[list[RankScore], list[RankScore]]:
    """Pick prune entries from the front of ``pool`` and expansion designators from the back.

    Prunes that would take a matrix below one active rank are skipped in
    favour of the next entry; designators past the per-matrix cap ``k`` roll
    to the next entry towards the front. No entry plays both roles. If the
    full budget cannot be met the budget shrinks one unit at a time.
    """
    for b in range(budget, 0, -1):
        pruned: list[RankScore] = []
        taken: Counter = Counter()
        for s in pool:
            if len(pruned) == b:
                break
            if ranks[s.key] - taken[s.key] > 1:
                pruned.append(s)
                taken[s.key] += 1
        if len(pruned) < b:
            continue
        if not expand:
            return pruned, []
        used = {id(s) for s in pruned}
        designators: list[RankScore] = []
        grown: Counter = Counter()
        for s in reversed(pool):
            if len(designators) == b:
                break
            if id(s) in used or grown[s.key] >= k:
                continue
            designators.append(s)
            grown[s.key] += 1
        if len(designators) == b:
            return pruned, designators
    return [], []


def adjust(
    layers: Sequence[AdapterLayer],
    tracker: ImportanceTracker | None,
    step: int,
    cfg: AllocatorConfig,
    rng: np.random.Generator,
    scores: Sequence[RankScore] | None = None,
    expand: bool = True,
) -> AdjustmentEvent:
    """One prune/expand event. ``expand=False`` gives the prune-only variant."""
    budget = scheduled_budget(step, cfg, len(layers))
    if budget <= 0:
        return AdjustmentEvent(step, 0)
    if scores is None:
        scores = rank_scores(layers, tracker)
    pool = collect_candidates(layers, scores, cfg.k)
    by_key = {layer.key: layer for layer in layers}
    ranks = {key: layer.r_active for key, layer in by_key.items()}
    pruned, designators = select_moves(pool, ranks, cfg.k, budget, expand)
    b_t = len(pruned)
    if b_t < budget:
        log.info("step %d: budget shrunk from %d to %d (floor or pool size)", step, budget, b_t)
    event = AdjustmentEvent(step, b_t)
    for s in pruned:
        layer = by_key[s.key]
        prune_rank(layer, s.rank_index)
        if tracker is not None:
            tracker.reset_slot(s.key, s.rank_index)
        if layer.r_active == 1:
            log.info("step %d: %s reached the rank floor", step, s.key)
        event.pruned.append((s.layer_id, s.matrix_id, s.rank_index, s.score))
    for s in designators:
        slot = expand_rank(by_key[s.key], rng)
        if tracker is not None:
            tracker.reset_slot(s.key, slot)
        event.expanded.append((s.layer_id, s.matrix_id, slot))
    return event
