"""Gradient sensitivity, its moving averages, and per-rank aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .adapter import AdapterLayer
from .errors import DimensionError

FACTORS = ("P", "lam", "Q")


def sensitivity(w, g):
    """``|w * dL/dw|``; works elementwise on arrays."""
    return np.abs(np.multiply(w, g))


@dataclass(frozen=True)
class RankScore:
    layer_id: Hashable
    matrix_id: Hashable
    rank_index: int
    score: float

    @property
    def key(self) -> tuple:
        return (self.layer_id, self.matrix_id)

    def sort_key(self) -> tuple:
        return (self.layer_id, self.matrix_id, self.rank_index)


class _EntryState:
    __slots__ = ("i_bar", "u_bar")

    def __init__(self, shapes: Mapping[str, tuple]):
        self.i_bar = {f: np.zeros(s) for f, s in shapes.items()}
        self.u_bar = {f: np.zeros(s) for f, s in shapes.items()}


class ImportanceTracker:
    """Per-entry moving averages of sensitivity (``i_bar``) and its deviation (``u_bar``).

    State is keyed by ``(layer_id, matrix_id)`` and mirrors each adapter's
    P, lam and Q including masked slots, which are held at zero.

    ``use_updated_mean`` selects which mean the deviation is measured from:
    ``True`` uses the just-updated average (the literal form), ``False`` the
    previous step's.
    """

    def __init__(
        self,
        layers: Iterable[AdapterLayer] = (),
        beta1: float = 0.85,
        beta2: float = 0.85,
        use_updated_mean: bool = True,
    ):
        for name, beta in (("beta1", beta1), ("beta2", beta2)):
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {beta}")
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.use_updated_mean = use_updated_mean
        self.step_count = 0
        self._state: dict[tuple, _EntryState] = {}
        for layer in layers:
            self.track(layer)

    def track(self, layer: AdapterLayer) -> None:
        self._state[layer.key] = _EntryState({f: getattr(layer, f).shape for f in FACTORS})

    def keys(self):
        return self._state.keys()

    def i_bar(self, key, factor: str) -> np.ndarray:
        return self._state[key].i_bar[factor]

    def u_bar(self, key, factor: str) -> np.ndarray:
        return self._state[key].u_bar[factor]

    def ema_update(self, current: Mapping[tuple, Mapping[str, np.ndarray]]) -> None:
        """Fold one step of per-entry sensitivities into the moving averages."""
        if set(current) != set(self._state):
            raise DimensionError(f"sensitivities cover {sorted(current)}, tracker has {sorted(self._state)}")
        for key, state in self._state.items():
            for f in FACTORS:
                cur = np.ascontiguousarray(current[key][f], dtype=np.float64)
                if cur.shape != state.i_bar[f].shape:
                    raise DimensionError(f"{key}.{f}: got {cur.shape}, expected {state.i_bar[f].shape}")
                kernels.ema_update(
                    state.i_bar[f].reshape(-1),
                    state.u_bar[f].reshape(-1),
                    cur.reshape(-1),
                    self.beta1,
                    self.beta2,
                    self.use_updated_mean,
                )
        self.step_count += 1

    def observe(self, layers: Sequence[AdapterLayer]) -> None:
        """Compute sensitivities from current values and gradients, update, re-mask."""
        current = {
            layer.key: {f: sensitivity(getattr(layer, f).value, getattr(layer, f).grad) for f in FACTORS}
            for layer in layers
        }
        self.ema_update(current)
        for layer in layers:
            self.mask(layer)

    def mask(self, layer: AdapterLayer) -> None:
        off = ~layer.active
        if not off.any():
            return
        state = self._state[layer.key]
        for arrays in (state.i_bar, state.u_bar):
            arrays["P"][:, off] = 0.0
            arrays["lam"][:, off] = 0.0
            arrays["Q"][off, :] = 0.0

    def reset_slot(self, key, slot: int) -> None:
        state = self._state[key]
        for arrays in (state.i_bar, state.u_bar):
            arrays["P"][:, slot] = 0.0
            arrays["lam"][:, slot] = 0.0
            arrays["Q"][slot, :] = 0.0

    def entry_scores(self, key) -> dict[str, np.ndarray]:
        """Smoothed per-entry score ``i_bar * u_bar`` for each factor."""
        state = self._state[key]
        return {f: state.i_bar[f] * state.u_bar[f] for f in FACTORS}

    def snapshot(self) -> dict:
        return {
            key: {f: (s.i_bar[f].copy(), s.u_bar[f].copy()) for f in FACTORS}
            for key, s in self._state.items()
        }


def entry_score(i_bar, u_bar):
    return np.multiply(i_bar, u_bar)


def rank_scores(layers: Iterable[AdapterLayer], tracker: ImportanceTracker) -> list[RankScore]:
    """One score per active rank: lam score plus row/column means of the P and Q scores."""
    out = []
    for layer in layers:
        s = tracker.entry_scores(layer.key)
        for i in layer.active_indices():
            total = s["lam"][0, i] + s["P"][:, i].sum() / layer.d1 + s["Q"][i, :].sum() / layer.d2
            out.append(RankScore(layer.layer_id, layer.matrix_id, int(i), float(total)))
    out.sort(key=RankScore.sort_key)
    return out
