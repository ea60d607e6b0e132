"""SVD-parameterized low-rank adapters with a hard active-rank mask."""
from __future__ import annotations

import logging
from typing import Hashable

import numpy as np

from . import autodiff as ad
from .errors import CapacityError, ContractError, DimensionError, FloorViolationError

log = logging.getLogger(__name__)

# Norm below which a Gram-Schmidt residual counts as dependent.
_DEPENDENT_TOL = 1e-10


class AdapterLayer:
    """Frozen base weight ``W0`` (d1 x d2) plus a masked update ``P diag(lam) Q``.

    ``P`` is d1 x capacity, ``lam`` a 1 x capacity row and ``Q`` capacity x d2.
    Only slots flagged in ``active`` take part in the forward pass, the
    orthogonality penalty and therefore the gradient.
    """

    def __init__(
        self,
        base,
        capacity: int,
        init_rank: int,
        rng: np.random.Generator,
        layer_id: Hashable = 0,
        matrix_id: Hashable = "W",
    ):
        base = ad.as_dense(base)
        d1, d2 = base.shape
        if not 1 <= init_rank <= capacity <= min(d1, d2):
            raise DimensionError(
                f"need 1 <= init_rank ({init_rank}) <= capacity ({capacity}) <= min{base.shape}"
            )
        self.layer_id = layer_id
        self.matrix_id = matrix_id
        self.base = ad.Parameter(base, name=f"{layer_id}.{matrix_id}.W0")
        std = 1.0 / np.sqrt(max(d1, d2))
        p = np.zeros((d1, capacity))
        q = np.zeros((capacity, d2))
        p[:, :init_rank] = rng.normal(0.0, std, size=(d1, init_rank))
        q[:init_rank, :] = rng.normal(0.0, std, size=(init_rank, d2))
        self.P = ad.Parameter(p, trainable=True, name=f"{layer_id}.{matrix_id}.P")
        self.lam = ad.Parameter(np.zeros((1, capacity)), trainable=True, name=f"{layer_id}.{matrix_id}.lam")
        self.Q = ad.Parameter(q, trainable=True, name=f"{layer_id}.{matrix_id}.Q")
        self.active = np.zeros(capacity, dtype=bool)
        self.active[:init_rank] = True

    @property
    def key(self) -> tuple:
        return (self.layer_id, self.matrix_id)

    @property
    def d1(self) -> int:
        return self.base.shape[0]

    @property
    def d2(self) -> int:
        return self.base.shape[1]

    @property
    def capacity(self) -> int:
        return self.active.shape[0]

    @property
    def r_active(self) -> int:
        return int(self.active.sum())

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def parameters(self) -> list[ad.Parameter]:
        return [self.P, self.lam, self.Q]

    def delta(self) -> np.ndarray:
        """Dense ``P diag(lam) Q`` over the active slots (no tape)."""
        idx = self.active_indices()
        return (self.P.value[:, idx] * self.lam.value[0, idx]) @ self.Q.value[idx, :]

    def forward(self, x) -> ad.Parameter:
        return adapter_forward(self, x)

    def __repr__(self):
        return (
            f"AdapterLayer({self.layer_id!r}, {self.matrix_id!r}, {self.d1}x{self.d2}, "
            f"r_active={self.r_active}/{self.capacity})"
        )


def adapter_forward(layer: AdapterLayer, x) -> ad.Parameter:
    """``x W0 + x P_act diag(lam_act) Q_act`` for a batch ``x`` of shape (batch, d1)."""
    x_shape = x.shape if isinstance(x, ad.Parameter) else np.shape(x)
    if len(x_shape) != 2 or x_shape[1] != layer.d1:
        raise DimensionError(f"adapter_forward: input {x_shape} does not match base {layer.base.shape}")
    out = ad.matmul(x, layer.base)
    idx = layer.active_indices()
    if idx.size == 0:
        return out
    h = ad.matmul(x, ad.take_cols(layer.P, idx))
    h = ad.scale_cols(h, ad.take_cols(layer.lam, idx))
    return ad.add(out, ad.matmul(h, ad.take_rows(layer.Q, idx)))


def ortho_penalty(layer: AdapterLayer) -> ad.Parameter:
    """``|P^T P - I|_F^2 + |Q Q^T - I|_F^2`` over the active slots."""
    idx = layer.active_indices()
    eye = np.eye(idx.size)
    p = ad.take_cols(layer.P, idx)
    q = ad.take_rows(layer.Q, idx)
    pp = ad.sub(ad.matmul(ad.transpose(p), p), eye)
    qq = ad.sub(ad.matmul(q, ad.transpose(q)), eye)
    return ad.add(ad.frobenius_sq(pp), ad.frobenius_sq(qq))


def prune_rank(layer: AdapterLayer, idx: int) -> None:
    if not 0 <= idx < layer.capacity or not layer.active[idx]:
        raise ContractError(f"{layer.key}: slot {idx} is not active")
    if layer.r_active <= 1:
        raise FloorViolationError(f"{layer.key}: refusing to prune the last active rank (slot {idx})")
    layer.active[idx] = False
    layer.lam.value[0, idx] = 0.0


def orthonormal_basis(vectors: np.ndarray) -> np.ndarray:
    """Orthonormal basis (as columns) of the span of ``vectors``' columns, by modified Gram-Schmidt."""
    basis: list[np.ndarray] = []
    for j in range(vectors.shape[1]):
        v = vectors[:, j].copy()
        for _ in range(2):
            for u in basis:
                v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm > _DEPENDENT_TOL * max(1.0, np.linalg.norm(vectors[:, j])):
            basis.append(v / norm)
    if not basis:
        return np.zeros((vectors.shape[0], 0))
    return np.stack(basis, axis=1)


def gram_schmidt_direction(existing: np.ndarray, rng: np.random.Generator, max_tries: int = 16) -> np.ndarray:
    """Unit Gaussian direction orthogonal to every column of ``existing``."""
    dim = existing.shape[0]
    basis = orthonormal_basis(existing)
    if basis.shape[1] >= dim:
        raise CapacityError(f"existing directions already span R^{dim}")
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        start = np.linalg.norm(v)
        # two MGS passes keep the residual orthogonal to working precision
        for _ in range(2):
            for j in range(basis.shape[1]):
                u = basis[:, j]
                v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm > 1e-6 * start:
            return v / norm
    raise CapacityError("could not draw a direction outside the existing span")


def expand_rank(layer: AdapterLayer, rng: np.random.Generator) -> int:
    """Activate the lowest free slot with fresh orthogonal directions and zero singular value."""
    free = np.flatnonzero(~layer.active)
    if free.size == 0:
        raise CapacityError(f"{layer.key}: all {layer.capacity} rank slots are active")
    slot = int(free[0])
    idx = layer.active_indices()
    layer.P.value[:, slot] = gram_schmidt_direction(layer.P.value[:, idx], rng)
    layer.Q.value[slot, :] = gram_schmidt_direction(layer.Q.value[idx, :].T, rng)
    layer.lam.value[0, slot] = 0.0
    layer.active[slot] = True
    return slot
