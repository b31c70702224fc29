"""Messages, bit groups, beliefs, decode masks and code-rate bookkeeping.

Everything here is plain numpy and side-effect free.  The group alphabet is
enumerated lexicographically with the first bit most significant, so the
pattern ``(1, 0, 1)`` has index 5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMPLEX_ATOL = 1e-6


class ShapeError(ValueError):
    """Raised when an array does not have the length or shape an operation needs."""


class SimplexError(ValueError):
    """Raised when a belief vector is not a probability distribution."""


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("message bits must be 0 or 1")
    return arr.astype(np.int64)


def partition_message(message, Q: int, m: int) -> np.ndarray:
    """Split a ``K = Q*m`` bit message into ``Q`` consecutive groups of ``m`` bits.

    Returns an integer array of shape ``(Q, m)``; row ``q`` holds bits
    ``[m*q, m*(q+1))``.
    """
    bits = as_bits(message)
    if bits.ndim != 1 or bits.shape[0] != Q * m:
        raise ShapeError(f"message of shape {bits.shape} cannot be split into {Q} groups of {m} bits")
    return bits.reshape(Q, m)


def join_groups(groups) -> np.ndarray:
    return as_bits(groups).reshape(-1)


def group_to_index(group) -> int | np.ndarray:
    """Alphabet index of an ``m``-bit pattern (MSB first).

    Accepts a single group of shape ``(m,)`` or a stack ``(..., m)``.
    """
    g = as_bits(group)
    m = g.shape[-1]
    weights = 1 << np.arange(m - 1, -1, -1, dtype=np.int64)
    idx = g @ weights
    return int(idx) if np.ndim(idx) == 0 else idx


def index_to_group(index, m: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= 1 << m):
        raise ValueError(f"alphabet index out of range for m={m}")
    shifts = np.arange(m - 1, -1, -1, dtype=np.int64)
    return (idx[..., None] >> shifts) & 1


def alphabet(m: int) -> np.ndarray:
    """All ``2**m`` patterns, row ``j`` being the pattern with index ``j``."""
    return index_to_group(np.arange(1 << m), m)


def check_simplex(p, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise SimplexError("belief has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise SimplexError("belief does not sum to one")
    return p


def threshold_check(p_q, gamma: float) -> bool:
    """True iff the largest entry of the belief reaches ``gamma``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    p = check_simplex(p_q)
    return bool(p.max() >= gamma)


@dataclass(frozen=True)
class DecodeMask:
    """Per-group decoding status after round ``tau``: 1 = still active, 0 = decoded."""

    entries: np.ndarray
    tau: int = 0

    @classmethod
    def all_active(cls, Q: int) -> "DecodeMask":
        return cls(np.ones(Q, dtype=np.int8), 0)

    @property
    def active(self) -> np.ndarray:
        return self.entries.astype(bool)


def update_mask(mask: DecodeMask, beliefs, gamma: float) -> DecodeMask:
    """Advance the mask by one round given the beliefs ``(Q, 2**m)`` of that round.

    Groups already decoded stay decoded regardless of their belief.
    """
    P = check_simplex(beliefs)
    if P.shape[0] != mask.entries.shape[0]:
        raise ShapeError("belief matrix and mask disagree on the number of groups")
    crossed = P.max(axis=-1) >= gamma
    entries = np.where(crossed, 0, mask.entries).astype(np.int8)
    return DecodeMask(entries, mask.tau + 1)


@dataclass(frozen=True)
class StoppingRecord:
    """Round at which each group was decoded and whether it was forced at the cap.

    ``tau_star`` uses 0 for "not yet decoded".
    """

    tau_star: np.ndarray
    forced: np.ndarray

    @classmethod
    def empty(cls, Q: int) -> "StoppingRecord":
        return cls(np.zeros(Q, dtype=np.int64), np.zeros(Q, dtype=bool))

    @property
    def complete(self) -> bool:
        return bool(np.all(self.tau_star > 0))

    @property
    def channel_uses(self) -> int:
        return int(np.sum(self.tau_star))


def compute_code_rate(record: StoppingRecord, K: int) -> float:
    """Information bits per channel use, ``K / sum_q tau*_q``."""
    if not record.complete:
        raise ValueError("stopping record has undecoded groups")
    return K / record.channel_uses
