"""Shared builders for allocator tests: random adapter stacks and their oracle expectations."""
import numpy as np

from elastic_rank.adapter import AdapterLayer
from elastic_rank.allocator import AllocatorConfig, adjust
from elastic_rank.importance import RankScore

from oracles import enumerate_adjust

CAPACITY = 8


def make_layers(ranks, capacity=CAPACITY, dim=8, rng=None):
    rng = rng or np.random.default_rng(0)
    layers = []
    for i, r in enumerate(ranks):
        layers.append(AdapterLayer(rng.standard_normal((dim, dim)), capacity, r, rng, layer_id=i))
    return layers


def scores_for(layers, values):
    """values: {layer_id: [score per active slot in slot order]}"""
    out = []
    for layer in layers:
        for slot, s in zip(layer.active_indices(), values[layer.layer_id]):
            out.append(RankScore(layer.layer_id, "W", int(slot), float(s)))
    return out


def random_instance(rng):
    """Up to 3 matrices with up to 4 active ranks each, scattered over the slots."""
    n = int(rng.integers(1, 4))
    ranks = [int(rng.integers(1, 5)) for _ in range(n)]
    k = int(rng.integers(1, 4))
    b = int(rng.integers(1, 7))
    layers = make_layers(ranks, rng=rng)
    for layer in layers:
        layer.active[:] = False
        layer.active[rng.choice(CAPACITY, size=ranks[layer.layer_id], replace=False)] = True
    # coarse grid so ties occur and the tie-break is exercised
    values = {l.layer_id: list(rng.integers(0, 6, size=l.r_active) / 5.0) for l in layers}
    return layers, k, b, values


def oracle_matches_adjust(layers, k, b, values):
    """Run ``adjust`` and the enumeration oracle on one instance; True when they agree exactly."""
    c = AllocatorConfig(total_steps=100, t_warmup=0, t_stabilize=0, adjust_interval=10, k=k, b=b, use_scheduler=False)
    scores = scores_for(layers, values)
    ranks = {(l.layer_id, "W"): l.r_active for l in layers}
    score_map = {(l.layer_id, "W"): {} for l in layers}
    for s in scores:
        score_map[(s.layer_id, "W")][s.rank_index] = s.score
    budget = min(b, k * len(layers) // 2)
    want_pruned, want_owners = enumerate_adjust(ranks, score_map, k, budget)
    free = {key: sorted(set(range(CAPACITY)) - set(score_map[key])) for key in score_map}
    for key, slot, _ in want_pruned:
        free[key] = sorted(free[key] + [slot])
    want_slots = [(key[0], key[1], free[key].pop(0)) for key in want_owners]
    ev = adjust(layers, None, 10, c, np.random.default_rng(0), scores=scores)
    return (
        [tuple(p) for p in ev.pruned] == [(m[0], m[1], slot, s) for m, slot, s in want_pruned]
        and ev.expanded == want_slots
        and ev.b_t == len(want_pruned)
    )
