"""AWGN forward channel, feedback channel and seeded noise streams."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# stream ids used to key sub-streams of a seed
MESSAGE_STREAM = 0
FORWARD_STREAM = 1
FEEDBACK_STREAM = 2

FEEDBACK_MODES = ("noiseless", "awgn")


def snr_db_to_sigma2(snr_db: float) -> float:
    """Noise variance for unit-power signalling at ``snr_db``; ``inf`` gives 0."""
    return 10.0 ** (-snr_db / 10.0)


@dataclass(frozen=True)
class ChannelParams:
    forward_snr_db: float = 1.0
    feedback_mode: str = "noiseless"
    feedback_snr_db: float = 20.0

    def __post_init__(self):
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"feedback_mode must be one of {FEEDBACK_MODES}")
        if math.isnan(self.forward_snr_db) or math.isnan(self.feedback_snr_db):
            raise ValueError("SNR must not be NaN")

    @property
    def sigma2_forward(self) -> float:
        return snr_db_to_sigma2(self.forward_snr_db)

    @property
    def sigma2_feedback(self) -> float:
        return 0.0 if self.feedback_mode == "noiseless" else snr_db_to_sigma2(self.feedback_snr_db)


class NoiseStream:
    """Reproducible standard-normal source keyed by ``(seed, *stream_id)``.

    Two streams built from the same key produce identical draws; different
    keys give statistically independent sequences (numpy ``SeedSequence``).
    """

    def __init__(self, seed: int, *stream_id: int):
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        self._rng = np.random.default_rng([self.seed, *self.stream_id])

    def normal(self, shape) -> np.ndarray:
        return self._rng.standard_normal(shape)

    def bits(self, n: int) -> np.ndarray:
        return self._rng.integers(0, 2, size=n, dtype=np.int64)


def add_noise(x, noise, sigma2: float):
    """``x + sqrt(sigma2) * noise``; exact identity when ``sigma2 == 0``."""
    if sigma2 == 0.0:
        return x
    return x + math.sqrt(sigma2) * noise


def transmit_forward(x, params: ChannelParams, stream: NoiseStream) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("channel input must be finite")
    return add_noise(x, stream.normal(x.shape), params.sigma2_forward)


def transmit_feedback(y, params: ChannelParams, stream: NoiseStream) -> np.ndarray:
    """Send received symbols back to the transmitter.

    Only symbol packets pass through here; decoded-group indices travel on an
    error-free side channel and never touch this function.
    """
    y = np.asarray(y, dtype=np.float64)
    if params.feedback_mode == "noiseless":
        return y.copy()
    return add_noise(y, stream.normal(y.shape), params.sigma2_feedback)


def measure_avg_power(symbols) -> float:
    """Mean squared value over every transmitted symbol.

    ``symbols`` is a flat array, a session transcript, or an iterable of
    per-round arrays or transcripts (ragged is fine).
    """
    def _flat(s):
        if hasattr(s, "all_transmitted"):
            s = s.all_transmitted()
        return np.asarray(s, dtype=np.float64).reshape(-1)

    if isinstance(symbols, np.ndarray) or hasattr(symbols, "all_transmitted"):
        flat = _flat(symbols)
    else:
        parts = [_flat(s) for s in symbols]
        flat = np.concatenate(parts) if parts else np.empty(0)
    if flat.size == 0:
        raise ValueError("no transmitted symbols to measure")
    return float(np.sum(flat * flat) / flat.size)
