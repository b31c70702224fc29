"""Monte-Carlo BLER / rate / power estimation, sweeps, CSV output and the uncoded oracle."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import norm

from .channel import ChannelParams, NoiseStream, transmit_forward
from .protocol import DEFAULT_CHUNK, ProtocolConfig, run_chunk

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "gamma", "snr_fwd_db", "snr_fb_db", "n_sessions", "bler", "bler_ci_low", "bler_ci_high",
    "group_error_rate", "avg_code_rate", "avg_power", "forced_fraction", "seed",
)


def wilson_interval(errors: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("need at least one trial")
    z = float(norm.ppf(0.5 + confidence / 2))
    p = errors / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if errors == 0 else max(0.0, centre - half)
    hi = 1.0 if errors == n else min(1.0, centre + half)   # pin the ends against rounding
    return lo, hi


@dataclass(frozen=True)
class EvalResult:
    gamma: float
    snr_fwd_db: float
    snr_fb_db: float | None
    n_sessions: int
    bler: float
    bler_ci_low: float
    bler_ci_high: float
    group_error_rate: float
    avg_code_rate: float
    avg_power: float
    forced_fraction: float
    seed: int
    avg_rounds: float = float("nan")

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]

    def as_metrics(self) -> dict:
        return {"bler_estimate": self.bler, "avg_rate": self.avg_code_rate,
                "avg_power": self.avg_power}


@dataclass
class _Tally:
    sessions: int = 0
    block_errors: int = 0
    group_errors: int = 0
    groups: int = 0
    channel_uses: int = 0
    forced: int = 0
    energy: float = 0.0

    def add(self, ro) -> None:
        with torch.no_grad():
            wrong = ro.decoded_labels() != ro.labels
            B, Q = wrong.shape
            self.sessions += B
            self.groups += B * Q
            self.block_errors += int(wrong.any(dim=-1).sum())
            self.group_errors += int(wrong.sum())
            self.channel_uses += int(ro.tau_star.sum())
            self.forced += int(ro.forced.sum())
            x = torch.stack(ro.x)
            self.energy += float(((x * x) * torch.stack(ro.active)).sum())


def estimate(codec, config: ProtocolConfig, n_sessions: int, seed: int,
             chunk_size: int = DEFAULT_CHUNK) -> EvalResult:
    """Run ``n_sessions`` independent sessions with uniformly random messages.

    Session ``s`` draws its message and noise from streams keyed by
    ``(seed, s)``; sessions are processed in batches of ``chunk_size``.
    """
    if n_sessions < 1:
        raise ValueError("n_sessions must be at least 1")
    K = codec.config.K
    tally = _Tally()
    for start in range(0, n_sessions, chunk_size):
        count = min(chunk_size, n_sessions - start)
        _, ro = run_chunk(codec, config, seed, start, count)
        tally.add(ro)
    lo, hi = wilson_interval(tally.block_errors, tally.sessions)
    ch = config.channel
    return EvalResult(
        gamma=config.gamma,
        snr_fwd_db=ch.forward_snr_db,
        snr_fb_db=None if ch.feedback_mode == "noiseless" else ch.feedback_snr_db,
        n_sessions=tally.sessions,
        bler=tally.block_errors / tally.sessions,
        bler_ci_low=lo,
        bler_ci_high=hi,
        group_error_rate=tally.group_errors / tally.groups,
        avg_code_rate=K * tally.sessions / tally.channel_uses,
        avg_power=tally.energy / tally.channel_uses,
        forced_fraction=tally.forced / tally.groups,
        seed=seed,
        avg_rounds=tally.channel_uses / tally.groups,
    )


@dataclass(frozen=True)
class SweepSpec:
    gammas: tuple
    snrs: tuple
    n_sessions: int = 10000
    seed: int = 0
    seed_policy: str = "shared"     # "shared": same seed everywhere; "per_point": seed + point index
    feedback_mode: str = "noiseless"
    feedback_snr_db: float = 20.0

    def __post_init__(self):
        if not self.gammas or not self.snrs:
            raise ValueError("sweep needs at least one gamma and one SNR")
        if self.seed_policy not in ("shared", "per_point"):
            raise ValueError("seed_policy must be 'shared' or 'per_point'")


def sweep(spec: SweepSpec, codecs, *, T_max: int | None = None, m: int | None = None,
          chunk_size: int = DEFAULT_CHUNK):
    """Evaluate every ``(gamma, snr)`` point.

    ``codecs`` is either one codec shared by all thresholds or a mapping from
    gamma to a codec (``None`` marks a missing checkpoint; that point is
    skipped and reported in the returned warnings).
    """
    results, skipped = [], []
    point = 0
    for gamma in spec.gammas:
        codec = codecs.get(gamma) if isinstance(codecs, dict) else codecs
        for snr in spec.snrs:
            seed = spec.seed + (point if spec.seed_policy == "per_point" else 0)
            point += 1
            if codec is None:
                skipped.append({"gamma": gamma, "snr_fwd_db": snr, "reason": "missing checkpoint"})
                log.warning("skipping gamma=%r snr=%r: no checkpoint", gamma, snr)
                continue
            cc = codec.config
            proto = ProtocolConfig(
                gamma=gamma, T_max=T_max or cc.T_max, m=m or cc.m,
                channel=ChannelParams(snr, spec.feedback_mode, spec.feedback_snr_db))
            results.append(estimate(codec, proto, spec.n_sessions, seed, chunk_size))
    return results, skipped


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return int(v) if isinstance(v, np.integer) else v


def emit_csv(results, path) -> Path:
    """Write one row per result with the fixed column set; floats use ``repr`` precision."""
    results = list(results)
    if not results:
        raise ValueError("no results to write")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([_cell(v) for v in r.row()])
    return path


def emit_plot_data(results, path) -> Path:
    return emit_csv(sorted(results, key=lambda r: r.avg_code_rate), path)


def read_csv(path) -> list[EvalResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                if v == "":
                    kw[k] = None
                elif k in ("n_sessions", "seed"):
                    kw[k] = int(v)
                else:
                    kw[k] = float(v)
            out.append(EvalResult(**kw))
    return out


@dataclass(frozen=True)
class BaselineResult:
    snr_db: float
    n_bits: int
    errors: int
    measured_ber: float
    analytic_ber: float

    @property
    def three_sigma(self) -> float:
        p = self.analytic_ber
        return 3.0 * math.sqrt(p * (1 - p) / self.n_bits)

    @property
    def consistent(self) -> bool:
        return abs(self.measured_ber - self.analytic_ber) <= self.three_sigma


def baseline_uncoded(channel: ChannelParams, n_bits: int, seed: int) -> BaselineResult:
    """Uncoded BPSK through the forward channel, hard decisions by sign.

    The analytic bit error rate is the Gaussian tail ``Q(1/sigma)``.
    """
    if n_bits < 10_000:
        raise ValueError("use at least 10^4 bits for the uncoded baseline")
    bits = NoiseStream(seed, 0, 0).bits(n_bits)
    x = 2.0 * bits - 1.0
    y = transmit_forward(x, channel, NoiseStream(seed, 0, 1))
    errors = int(np.sum((y > 0).astype(np.int64) != bits))
    sigma = math.sqrt(channel.sigma2_forward)
    analytic = float(norm.sf(1.0 / sigma)) if sigma > 0 else 0.0
    return BaselineResult(channel.forward_snr_db, n_bits, errors, errors / n_bits, analytic)


def result_dict(r: EvalResult) -> dict:
    return asdict(r)
