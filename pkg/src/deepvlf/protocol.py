"""Round-by-round feedback session: encode, forward channel, decode, threshold, feed back.

The engine is batched: :func:`unroll` runs ``B`` independent sessions in
lock-step with per-session masks, and is shared by training (with autograd)
and evaluation.  Per-session :class:`SessionTranscript` objects are cut out
of a batch only when a full record is wanted.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .channel import (
    FEEDBACK_STREAM,
    FORWARD_STREAM,
    MESSAGE_STREAM,
    ChannelParams,
    NoiseStream,
    add_noise,
)
from .codec import DTYPE, CodecConfig, CodecState, extend_encoder_knowledge, init_state
from .core import StoppingRecord, compute_code_rate, index_to_group, partition_message

GAMMA_GRID = tuple(1.0 - 10.0 ** -k for k in (3, 4, 5, 6, 7))
DEFAULT_CHUNK = 1024


def mu_schedule(gamma: float) -> int:
    """Baseline first-decoding round as a function of the threshold.

    The published third branch reads ``gamma > 10**-6``; it is taken as
    ``gamma > 1 - 10**-6`` so the three branches partition (0, 1).
    """
    if gamma <= 1.0 - 1e-5:
        return 5
    if gamma <= 1.0 - 1e-6:
        return 6
    return 7


def compute_tau_plus(m: int, forward_snr_db: float, gamma: float) -> int:
    """First round at which decoding is attempted.

    ``max(mu(gamma), floor(2m / log2(1 + snr)))`` with ``snr`` linear.
    """
    if m <= 0:
        raise ValueError("group size m must be positive")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    snr = 10.0 ** (forward_snr_db / 10.0)
    shannon_rounds = math.floor(2 * m / math.log2(1.0 + snr))
    return max(mu_schedule(gamma), shannon_rounds)


@dataclass(frozen=True)
class ProtocolConfig:
    gamma: float = 1.0 - 1e-5
    T_max: int = 15
    channel: ChannelParams = field(default_factory=ChannelParams)
    m: int = 3
    tau_plus_override: int | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("protocol.gamma must lie in (0, 1)")
        if self.T_max < 1:
            raise ValueError("protocol.T_max must be positive")
        if not 1 <= self.tau_plus <= self.T_max:
            raise ValueError(f"tau_plus={self.tau_plus} must lie in [1, T_max={self.T_max}]")

    @property
    def tau_plus(self) -> int:
        if self.tau_plus_override is not None:
            return int(self.tau_plus_override)
        return compute_tau_plus(self.m, self.channel.forward_snr_db, self.gamma)

    def check_codec(self, codec_config: CodecConfig) -> None:
        if codec_config.T_max != self.T_max or codec_config.m != self.m:
            raise ValueError(
                f"codec (m={codec_config.m}, T_max={codec_config.T_max}) does not match "
                f"protocol (m={self.m}, T_max={self.T_max})")


# ---------------------------------------------------------------- batched engine


@dataclass
class Rollout:
    """Everything produced by one batched unroll.

    Per-round lists hold ``(B, Q)`` tensors (``(B, Q, 2**m)`` for beliefs);
    ``active[t]`` is the mask carried *into* round ``t+1``.
    """

    labels: torch.Tensor
    active: list = field(default_factory=list)
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    y_fb: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    tau_star: torch.Tensor | None = None
    forced: torch.Tensor | None = None

    @property
    def rounds(self) -> int:
        return len(self.x)

    def final_log_probs(self) -> torch.Tensor:
        return self.log_probs[-1]

    def decoded_labels(self) -> torch.Tensor:
        # argmax returns the first maximal index, i.e. ties go to the lowest pattern index
        return self.final_log_probs().argmax(dim=-1)


def unroll(codec, bits, config: ProtocolConfig, fwd_noise, fb_noise=None) -> Rollout:
    """Run a batch of sessions to completion.

    ``bits`` has shape ``(B, Q, m)``; noise arrays are standard normal of shape
    ``(B, T_max, Q)`` and get scaled by the channel's noise level.  Gradients
    flow through everything except the hard threshold decisions.
    """
    cc = codec.config
    config.check_codec(cc)
    state = init_state(bits, cc)
    B, Q = state.labels.shape
    fwd = torch.as_tensor(np.asarray(fwd_noise), dtype=DTYPE)
    if fwd.shape != (B, cc.T_max, Q):
        raise ValueError(f"forward noise must have shape {(B, cc.T_max, Q)}")
    ch = config.channel
    if ch.feedback_mode == "awgn":
        fb = torch.as_tensor(np.asarray(fb_noise), dtype=DTYPE)
    tau_star = torch.zeros(B, Q, dtype=torch.long)
    forced = torch.zeros(B, Q, dtype=torch.bool)
    out = Rollout(labels=state.labels)
    zero = torch.zeros(B, Q, dtype=DTYPE)

    for tau in range(1, cc.T_max + 1):
        active = state.active
        if not bool(active.any()):
            break
        x = codec.encode_round(state, tau)
        y = torch.where(active, add_noise(x, fwd[:, tau - 1], ch.sigma2_forward), zero)
        if ch.feedback_mode == "awgn":
            y_fb = torch.where(active, add_noise(y, fb[:, tau - 1], ch.sigma2_feedback), zero)
        else:
            y_fb = y
        log_p, dec_know = codec.decode_round(state, y, tau)

        with torch.no_grad():
            if tau >= config.tau_plus:
                decided = active & _threshold_passes(log_p, config.gamma)
            else:
                decided = torch.zeros_like(active)
            if tau == cc.T_max:
                forced |= active & ~decided
                decided = active.clone()
            tau_star[decided] = tau
            keep = active & ~decided

        enc_know = extend_encoder_knowledge(state.enc_know, x, y_fb, tau, keep, cc)
        out.active.append(active)
        out.x.append(x)
        out.y.append(y)
        out.y_fb.append(y_fb)
        out.log_probs.append(log_p)
        state = CodecState(state.labels, enc_know, dec_know, log_p, keep)

    out.tau_star = tau_star
    out.forced = forced
    return out


def _threshold_passes(log_p: torch.Tensor, gamma: float) -> torch.Tensor:
    return log_p.exp().amax(dim=-1) >= gamma


# ---------------------------------------------------------------- sessions


def session_message(seed: int, session: int, K: int) -> np.ndarray:
    return NoiseStream(seed, session, MESSAGE_STREAM).bits(K)


def session_noise(seed: int, session: int, T_max: int, Q: int):
    fwd = NoiseStream(seed, session, FORWARD_STREAM).normal((T_max, Q))
    fb = NoiseStream(seed, session, FEEDBACK_STREAM).normal((T_max, Q))
    return fwd, fb


@dataclass
class RoundRecord:
    tau: int
    groups: np.ndarray
    transmitted: np.ndarray
    received: np.ndarray
    fed_back: np.ndarray
    beliefs: np.ndarray
    mask: np.ndarray

    def to_json(self, session: int) -> dict:
        return {
            "type": "round",
            "session": session,
            "tau": self.tau,
            "groups": self.groups.tolist(),
            "transmitted": self.transmitted.tolist(),
            "received": self.received.tolist(),
            "fed_back": self.fed_back.tolist(),
            "beliefs": self.beliefs.tolist(),
            "mask": self.mask.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RoundRecord":
        return cls(
            tau=d["tau"],
            groups=np.asarray(d["groups"], dtype=np.int64),
            transmitted=np.asarray(d["transmitted"], dtype=np.float64),
            received=np.asarray(d["received"], dtype=np.float64),
            fed_back=np.asarray(d["fed_back"], dtype=np.float64),
            beliefs=np.asarray(d["beliefs"], dtype=np.float64),
            mask=np.asarray(d["mask"], dtype=np.int8),
        )


@dataclass
class SessionTranscript:
    """Complete record of one session, replayable from ``(seed, session, chunk)``."""

    seed: int
    session: int
    chunk: tuple[int, int]
    gamma: float
    tau_plus: int
    snr_fwd_db: float
    snr_fb_db: float | None
    message: np.ndarray
    rounds: list[RoundRecord]
    record: StoppingRecord
    decoded: np.ndarray
    m: int

    @property
    def K(self) -> int:
        return int(self.message.shape[0])

    @property
    def rate(self) -> float:
        return compute_code_rate(self.record, self.K)

    @property
    def group_errors(self) -> np.ndarray:
        Q = self.record.tau_star.shape[0]
        return np.any(self.message.reshape(Q, -1) != self.decoded.reshape(Q, -1), axis=1)

    @property
    def block_error(self) -> bool:
        return bool(np.any(self.message != self.decoded))

    def all_transmitted(self) -> np.ndarray:
        return np.concatenate([r.transmitted for r in self.rounds])

    def summary(self) -> dict:
        return {
            "type": "summary",
            "session": self.session,
            "seed": self.seed,
            "chunk": list(self.chunk),
            "gamma": self.gamma,
            "tau_plus": self.tau_plus,
            "snr": self.snr_fwd_db,
            "snr_fb": self.snr_fb_db,
            "m": self.m,
            "message": self.message.tolist(),
            "decoded": self.decoded.tolist(),
            "tau_star": self.record.tau_star.tolist(),
            "forced": self.record.forced.tolist(),
            "rate": self.rate,
            "block_error": self.block_error,
        }

    def to_lines(self) -> list[str]:
        lines = [json.dumps(r.to_json(self.session)) for r in self.rounds]
        lines.append(json.dumps(self.summary()))
        return lines


def write_transcripts(transcripts, path) -> None:
    with open(path, "w") as fh:
        for t in transcripts:
            for line in t.to_lines():
                fh.write(line + "\n")


def read_transcripts(path) -> list[SessionTranscript]:
    out, pending = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d["type"] == "round":
                pending.append(RoundRecord.from_json(d))
                continue
            out.append(SessionTranscript(
                seed=d["seed"], session=d["session"], chunk=tuple(d["chunk"]), gamma=d["gamma"],
                tau_plus=d["tau_plus"], snr_fwd_db=d["snr"], snr_fb_db=d["snr_fb"],
                message=np.asarray(d["message"], dtype=np.int64), rounds=pending,
                record=StoppingRecord(np.asarray(d["tau_star"], dtype=np.int64),
                                      np.asarray(d["forced"], dtype=bool)),
                decoded=np.asarray(d["decoded"], dtype=np.int64), m=d["m"]))
            pending = []
    return out


def _chunk_inputs(config: ProtocolConfig, codec_config: CodecConfig, seed: int, start: int,
                  count: int, messages=None):
    Q, m, T = codec_config.Q, codec_config.m, codec_config.T_max
    if messages is None:
        messages = np.stack([session_message(seed, s, Q * m) for s in range(start, start + count)])
    bits = np.stack([partition_message(msg, Q, m) for msg in messages])
    noise = [session_noise(seed, s, T, Q) for s in range(start, start + count)]
    fwd = np.stack([n[0] for n in noise])
    fb = np.stack([n[1] for n in noise])
    return np.asarray(messages), bits, fwd, fb


@torch.no_grad()
def run_chunk(codec, config: ProtocolConfig, seed: int, start: int, count: int, messages=None):
    """Unroll sessions ``start .. start+count-1`` as one batch (inference mode)."""
    if hasattr(codec, "eval"):
        codec.eval()
    msgs, bits, fwd, fb = _chunk_inputs(config, codec.config, seed, start, count, messages)
    return msgs, unroll(codec, bits, config, fwd, fb)


def transcripts_from_rollout(ro: Rollout, messages, config: ProtocolConfig, seed: int,
                             start: int) -> list[SessionTranscript]:
    B, Q = ro.labels.shape
    m = config.m
    act = torch.stack(ro.active, 1).numpy()          # (B, R, Q)
    xs = torch.stack(ro.x, 1).detach().numpy()
    ys = torch.stack(ro.y, 1).detach().numpy()
    fbs = torch.stack(ro.y_fb, 1).detach().numpy()
    P = torch.stack(ro.log_probs, 1).detach().exp().numpy()
    tau_star = ro.tau_star.numpy()
    forced = ro.forced.numpy()
    dec = index_to_group(ro.decoded_labels().numpy(), m).reshape(B, -1)
    ch = config.channel
    out = []
    for b in range(B):
        rounds = []
        R = int(tau_star[b].max())
        for t in range(R):
            g = np.flatnonzero(act[b, t])
            mask_after = (tau_star[b] > t + 1).astype(np.int8)
            rounds.append(RoundRecord(t + 1, g, xs[b, t, g], ys[b, t, g], fbs[b, t, g],
                                      P[b, t], mask_after))
        out.append(SessionTranscript(
            seed=seed, session=start + b, chunk=(start, B), gamma=config.gamma,
            tau_plus=config.tau_plus, snr_fwd_db=ch.forward_snr_db,
            snr_fb_db=None if ch.feedback_mode == "noiseless" else ch.feedback_snr_db,
            message=np.asarray(messages[b], dtype=np.int64), rounds=rounds,
            record=StoppingRecord(tau_star[b].astype(np.int64), forced[b].astype(bool)),
            decoded=dec[b].astype(np.int64), m=m))
    return out


def run_sessions(codec, config: ProtocolConfig, seed: int, start: int = 0, count: int = 1,
                 chunk_size: int = DEFAULT_CHUNK) -> list[SessionTranscript]:
    out = []
    for s in range(start, start + count, chunk_size):
        n = min(chunk_size, start + count - s)
        msgs, ro = run_chunk(codec, config, seed, s, n)
        out.extend(transcripts_from_rollout(ro, msgs, config, seed, s))
    return out


def run_session(message, config: ProtocolConfig, codec, seed: int, session: int = 0
                ) -> SessionTranscript:
    """Run a single session for a given message; noise keyed by ``(seed, session)``."""
    cc = codec.config
    message = np.asarray(message, dtype=np.int64)
    if message.shape != (cc.K,):
        raise ValueError(f"message length {message.shape} does not match K={cc.K}")
    config.check_codec(cc)
    msgs, ro = run_chunk(codec, config, seed, session, 1, messages=message[None])
    return transcripts_from_rollout(ro, msgs, config, seed, session)[0]


@dataclass(frozen=True)
class ReplayResult:
    ok: bool
    round: int | None = None
    field: str | None = None

    def __bool__(self) -> bool:
        return self.ok


_ROUND_FIELDS = ("groups", "transmitted", "received", "fed_back", "beliefs", "mask")


def replay_verify(transcript: SessionTranscript, config: ProtocolConfig, codec) -> ReplayResult:
    """Re-execute the session from its recorded seed and compare every field bit-exactly."""
    start, size = transcript.chunk
    if size == 1 and start == transcript.session:
        fresh = run_session(transcript.message, config, codec, transcript.seed, transcript.session)
    else:
        fresh = run_sessions(codec, config, transcript.seed, start, size, chunk_size=size)[
            transcript.session - start]
    if not np.array_equal(fresh.message, transcript.message):
        return ReplayResult(False, 0, "message")
    for old, new in zip(transcript.rounds, fresh.rounds):
        for name in _ROUND_FIELDS:
            a, b = getattr(old, name), getattr(new, name)
            if a.shape != b.shape or not np.array_equal(a, b):
                return ReplayResult(False, old.tau, name)
    if len(transcript.rounds) != len(fresh.rounds):
        r = min(len(transcript.rounds), len(fresh.rounds)) + 1
        return ReplayResult(False, r, "rounds")
    for name in ("tau_star", "forced"):
        if not np.array_equal(getattr(transcript.record, name), getattr(fresh.record, name)):
            return ReplayResult(False, len(fresh.rounds), name)
    if not np.array_equal(transcript.decoded, fresh.decoded):
        return ReplayResult(False, len(fresh.rounds), "decoded")
    return ReplayResult(True)


# ---------------------------------------------------------------- stub codecs


class OracleCodec:
    """Test double whose decoder is told the truth from round one."""

    def __init__(self, config: CodecConfig):
        self.config = config

    def encode_round(self, state: CodecState, tau: int) -> torch.Tensor:
        msb = state.enc_know[..., 0]
        return torch.where(state.active, msb, torch.zeros_like(msb))

    def decode_round(self, state: CodecState, y, tau: int):
        A = self.config.n_patterns
        onehot = torch.nn.functional.one_hot(state.labels, A).to(DTYPE)
        log_p = torch.log(onehot)
        log_p = torch.where(state.active[..., None], log_p, state.log_beliefs)
        return log_p, state.dec_know


class UniformCodec(OracleCodec):
    """Test double that never learns anything: the belief stays uniform."""

    def decode_round(self, state: CodecState, y, tau: int):
        return state.log_beliefs, state.dec_know
