"""Contrastive objective: InfoNCE over a FIFO memory bank and its compositions.

The base term is

    L(z, z+, {z-}) = -log( exp(z . z+ / tau) / sum_j exp(z . z_j / tau) )

with the sum running over the negatives plus the positive.  The box-level
losses are plain two-term compositions of it: the surround-robust loss pairs
the two augmented student views with the swapped teacher views, and the
position-robust loss pairs the composited-view feature with both teacher
views.  Teachers and bank entries are constants; analytic gradients are
provided for the student-side arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, EmptyFeature, NonUnitNorm, ShapeMismatch,
                     EmptyProposalSet)

UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    bank_capacity: int = 4096

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.bank_capacity < 0:
            raise ConfigError("bank capacity must be non-negative")


class MemoryBank:
    """Fixed-capacity FIFO of unit-norm feature vectors (the negatives).

    The training loop snapshots the bank before computing a step's losses and
    enqueues the step's teacher features afterwards, so a batch never sees its
    own features as negatives.
    """

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim), dtype=dtype)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def extend(self, features: np.ndarray) -> None:
        feats = np.atleast_2d(np.asarray(features))
        if feats.shape[1] != self.dim:
            raise ShapeMismatch(f"bank dim {self.dim}, got {feats.shape[1]}")
        _check_unit(feats, "bank feature")
        for f in feats:
            if self.capacity == 0:
                return
            self._buf[self._next] = f
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def snapshot(self) -> np.ndarray:
        """Current negatives in insertion order, oldest first."""
        if self._size < self.capacity:
            return self._buf[:self._size].copy()
        return np.roll(self._buf, -self._next, axis=0)

    def state(self) -> dict[str, np.ndarray]:
        return {"buf": self._buf.copy(),
                "meta": np.array([self._next, self._size, self.capacity, self.dim],
                                 dtype=np.int64)}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "MemoryBank":
        nxt, size, cap, dim = (int(v) for v in state["meta"])
        bank = cls(cap, dim, dtype=state["buf"].dtype)
        bank._buf = state["buf"].copy()
        bank._next = nxt
        bank._size = size
        return bank


def bank_update(bank: MemoryBank, new_features: np.ndarray) -> MemoryBank:
    """Enqueue the step's teacher features; evicts FIFO beyond capacity."""
    bank.extend(new_features)
    return bank


def _check_unit(vectors: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(bad):
        worst = float(norms[bad].flat[0])
        raise NonUnitNorm(f"{what} has norm {worst:.6f}, expected 1")


def _as_negatives(negatives) -> np.ndarray:
    if isinstance(negatives, MemoryBank):
        return negatives.snapshot()
    if negatives is None:
        return np.zeros((0, 0))
    arr = np.asarray(negatives, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 0))
    return np.atleast_2d(arr)


def _nce_parts(z, z_pos, negatives, tau, check_norms):
    z = np.asarray(z, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    if z.size == 0 or z_pos.size == 0:
        raise EmptyFeature("features must be non-empty vectors")
    if z.shape != z_pos.shape:
        raise ShapeMismatch(f"feature shapes differ: {z.shape} vs {z_pos.shape}")
    negs = _as_negatives(negatives)
    if negs.shape[0] and negs.shape[1] != z.shape[0]:
        raise ShapeMismatch("negatives have a different dimension")
    if check_norms:
        _check_unit(z, "query feature")
        _check_unit(z_pos, "positive feature")
        if negs.shape[0]:
            _check_unit(negs, "negative feature")
    cand = np.concatenate([negs, z_pos[None, :]], axis=0) if negs.shape[0] \
        else z_pos[None, :]
    logits = cand @ z / tau
    m = logits.max()
    expw = np.exp(logits - m)
    denom = expw.sum()
    # -log softmax of the positive (always the final candidate).
    value = float(np.log(denom) - (logits[-1] - m))
    return value, cand, logits, expw / denom


def info_nce(z, z_pos, negatives=None, tau: float = 0.2,
             check_norms: bool = True) -> float:
    """InfoNCE value; the positive is part of the partition function.

    ``check_norms=False`` skips the unit-norm validation so the surrounding
    code can probe the loss off the unit sphere (finite differences).
    """
    value, _, _, _ = _nce_parts(z, z_pos, negatives, tau, check_norms)
    return value


def info_nce_with_grads(z, z_pos, negatives=None, tau: float = 0.2,
                        check_norms: bool = True):
    """(value, d/dz, d/dz_pos); constants (negatives) get no gradient."""
    value, cand, _, p = _nce_parts(z, z_pos, negatives, tau, check_norms)
    grad_z = (p @ cand - cand[-1]) / tau
    grad_pos = (p[-1] - 1.0) * np.asarray(z, dtype=np.float64) / tau
    return value, grad_z, grad_pos


def decoupling_loss(z_s1, z_s2, z_t1, z_t2, bank=None, tau: float = 0.2) -> float:
    """Surround-robustness term: student view pairs against swapped teachers."""
    return (info_nce(z_s1, z_t2, bank, tau)
            + info_nce(z_s2, z_t1, bank, tau))


def depositioning_loss(z_s3, z_t1, z_t2, bank=None, tau: float = 0.2) -> float:
    """Position-robustness term: composited-view feature against both teachers."""
    return (info_nce(z_s3, z_t2, bank, tau)
            + info_nce(z_s3, z_t1, bank, tau))


def total_loss(per_box_dc: list[float], per_box_dp: list[float]) -> float:
    """Mean over boxes of the per-box sums of the two terms."""
    if len(per_box_dc) != len(per_box_dp):
        raise ShapeMismatch("per-box lists must have equal length")
    if not per_box_dc:
        raise EmptyProposalSet("at least one proposal is required")
    k = len(per_box_dc)
    return float(sum(dc + dp for dc, dp in zip(per_box_dc, per_box_dp)) / k)
