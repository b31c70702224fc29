"""Losses, the two-phase training loop and the finite-difference gradient check."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .channel import ChannelParams
from .codec import DTYPE, CodecConfig, DeepVLFCodec, init_params, save_checkpoint
from .protocol import GAMMA_GRID, ProtocolConfig, Rollout, unroll

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
LOSS_VARIANTS = ("single", "equal_weight", "exp_weight")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "exp_weight"
    vartheta: float = 10.0
    epsilon: float = 9.0
    tau_plus: int = 1

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"loss variant must be one of {LOSS_VARIANTS}")
        if self.variant == "exp_weight" and self.vartheta < 1.0:
            raise ValueError("vartheta must be at least 1 for the exponential weighting")
        if self.tau_plus < 1:
            raise ValueError("tau_plus must be at least 1")


def round_weights(config: LossConfig, n_rounds: int) -> np.ndarray:
    """Weight of each round ``1..n_rounds`` before masking by the stopping times."""
    tau = np.arange(1, n_rounds + 1, dtype=np.float64)
    if config.variant == "exp_weight":
        w = config.vartheta ** (tau - config.epsilon)
        w[tau < config.tau_plus] = 0.0
        return w
    return np.ones(n_rounds)


def rollout_loss(log_probs: torch.Tensor, labels: torch.Tensor, tau_star: torch.Tensor,
                 config: LossConfig) -> torch.Tensor:
    """Weighted cross-entropy summed over groups and rounds, averaged over the batch.

    ``log_probs`` is ``(B, R, Q, A)`` with round ``t`` at index ``t-1``;
    ``tau_star`` is ``(B, Q)``.  Round ``t`` of group ``q`` counts when
    ``t <= tau_star`` (or only ``t == tau_star`` for the single variant).
    """
    B, R, Q, _ = log_probs.shape
    idx = labels[:, None, :, None].expand(B, R, Q, 1)
    lp_true = log_probs.gather(-1, idx).squeeze(-1)
    lp_true = torch.clamp(lp_true, min=math.log(LOG_CLAMP))
    rounds = torch.arange(1, R + 1)[None, :, None]
    ts = tau_star[:, None, :]
    in_range = rounds == ts if config.variant == "single" else rounds <= ts
    w = torch.as_tensor(round_weights(config, R), dtype=log_probs.dtype)[None, :, None]
    w = w * in_range.to(log_probs.dtype)
    return -(w * lp_true).sum() / B


def _session_loss(beliefs, true_groups, record, config: LossConfig) -> float:
    P = torch.as_tensor(np.asarray(beliefs, dtype=np.float64))
    labels = torch.as_tensor(np.asarray(true_groups, dtype=np.int64))
    ts = torch.as_tensor(np.asarray(record.tau_star, dtype=np.int64))
    if P.shape[0] < int(ts.max()):
        raise ValueError("belief history is shorter than the latest stopping time")
    with np.errstate(divide="ignore"):
        logp = torch.log(P)
    return float(rollout_loss(logp[None], labels[None], ts[None], config))


def loss_exp_weight(beliefs, true_groups, record, config: LossConfig) -> float:
    """Exponentially weighted loss of one session.

    ``beliefs`` is ``(R, Q, 2**m)`` with round ``t`` at row ``t-1``,
    ``true_groups`` the alphabet index of each group.
    """
    return _session_loss(beliefs, true_groups, record, replace(config, variant="exp_weight"))


def loss_equal_weight(beliefs, true_groups, record) -> float:
    return _session_loss(beliefs, true_groups, record, LossConfig(variant="equal_weight"))


def loss_single(beliefs, true_groups, record) -> float:
    return _session_loss(beliefs, true_groups, record, LossConfig(variant="single"))


# ---------------------------------------------------------------- training loop


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8192
    lr: float = 1e-3
    weight_decay: float = 1e-3
    lr_floor: float = 0.01
    gamma_grid: tuple = GAMMA_GRID
    target_gamma: float = 1.0 - 1e-5
    pretrain_steps: int = 2000
    finetune_steps: int = 1000
    loss: str = "exp_weight"
    vartheta: float = 10.0
    epsilon: float = 9.0
    grad_clip: float = 1.0
    log_every: int = 50
    val_every: int = 500
    val_sessions: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("training.batch_size must be at least 1")
        if self.lr <= 0:
            raise ValueError("training.lr must be positive")
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ValueError("step budgets must be non-negative")
        if not self.gamma_grid or not all(0.0 < g < 1.0 for g in self.gamma_grid):
            raise ValueError("training.gamma_grid must be a non-empty list in (0, 1)")
        if not 0.0 < self.target_gamma < 1.0:
            raise ValueError("training.target_gamma must lie in (0, 1)")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"training.loss must be one of {LOSS_VARIANTS}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, codec: DeepVLFCodec):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.codec = codec


@dataclass
class TrainResult:
    codec: DeepVLFCodec
    metrics: list = field(default_factory=list)
    best_state: dict | None = None
    best_key: tuple | None = None


def protocol_for(gamma: float, codec_config: CodecConfig, channel: ChannelParams) -> ProtocolConfig:
    return ProtocolConfig(gamma=gamma, T_max=codec_config.T_max, channel=channel, m=codec_config.m)


def sample_batch(rng: np.random.Generator, batch_size: int, codec_config: CodecConfig):
    Q, m, T = codec_config.Q, codec_config.m, codec_config.T_max
    bits = rng.integers(0, 2, size=(batch_size, Q, m))
    fwd = rng.standard_normal((batch_size, T, Q))
    fb = rng.standard_normal((batch_size, T, Q))
    return bits, fwd, fb


def rollout_metrics(ro: Rollout, K: int) -> dict:
    """Block error rate, average rate and power of one batch rollout."""
    with torch.no_grad():
        decoded = ro.decoded_labels()
        block_err = (decoded != ro.labels).any(dim=-1).double().mean().item()
        uses = ro.tau_star.sum().item()
        x = torch.stack(ro.x)
        act = torch.stack(ro.active)
        power = ((x * x) * act).sum().item() / act.sum().item()
    return {"bler_estimate": block_err, "avg_rate": K * ro.labels.shape[0] / uses,
            "avg_power": power}


def train_step(codec, opt, bits, fwd, fb, proto: ProtocolConfig, loss_cfg: LossConfig):
    codec.train()
    ro = unroll(codec, bits, proto, fwd, fb)
    lp = torch.stack(ro.log_probs, dim=1)
    loss = rollout_loss(lp, ro.labels, ro.tau_star, loss_cfg)
    return loss, ro


def train(config: TrainConfig, codec: DeepVLFCodec, channel: ChannelParams, *,
          phases=("pretrain", "finetune"), log_sink=None, checkpoint_path=None,
          val_fn=None) -> TrainResult:
    """Pretrain over a grid of thresholds, then fine-tune at the target threshold.

    AdamW with decoupled weight decay and cosine learning-rate decay to
    ``lr_floor * lr`` over the total step budget.  ``log_sink`` receives one
    dict per metrics line.  ``val_fn(codec, gamma) -> dict`` supplies
    validation metrics (the CLI wires it to :func:`deepvlf.evaluation.estimate`).
    """
    cc = codec.config
    budgets = {"pretrain": config.pretrain_steps, "finetune": config.finetune_steps}
    total = sum(budgets[p] for p in phases)
    opt = torch.optim.AdamW(codec.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(total, 1), eta_min=config.lr * config.lr_floor)
    result = TrainResult(codec)
    last_good = copy.deepcopy(codec.state_dict())

    def emit(rec):
        result.metrics.append(rec)
        if log_sink is not None:
            log_sink(rec)

    step = 0
    for phase_id, phase in enumerate(phases):
        rng_phase = 0 if phase == "pretrain" else 1
        for k in range(budgets[phase]):
            rng = np.random.default_rng([config.seed, rng_phase, k])
            if phase == "pretrain":
                gamma = float(config.gamma_grid[rng.integers(len(config.gamma_grid))])
            else:
                gamma = config.target_gamma
            proto = protocol_for(gamma, cc, channel)
            loss_cfg = LossConfig(config.loss, config.vartheta, config.epsilon, proto.tau_plus)
            bits, fwd, fb = sample_batch(rng, config.batch_size, cc)
            opt.zero_grad(set_to_none=True)
            loss, ro = train_step(codec, opt, bits, fwd, fb, proto, loss_cfg)
            if not torch.isfinite(loss):
                codec.load_state_dict(last_good)
                raise TrainingDiverged(step, codec)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(codec.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            step += 1
            if step % config.log_every == 0 or k == 0:
                rec = {"kind": "train", "step": step, "phase": phase, "gamma": gamma,
                       "loss": loss.item(), **rollout_metrics(ro, cc.K)}
                emit(rec)
                last_good = copy.deepcopy(codec.state_dict())
            if val_fn is not None and config.val_every and step % config.val_every == 0:
                target = config.target_gamma
                val = val_fn(codec, target)
                emit({"kind": "val", "step": step, "phase": phase, "gamma": target, "loss": None,
                      **val})
                key = (val["bler_estimate"], -val["avg_rate"])
                if result.best_key is None or key <= result.best_key:
                    result.best_key = key
                    result.best_state = copy.deepcopy(codec.state_dict())
                    if checkpoint_path is not None:
                        save_checkpoint(codec, checkpoint_path, extra={"step": step})
    codec.eval()
    return result


@torch.no_grad()
def calibrate_power(codec: DeepVLFCodec, channel: ChannelParams, gamma: float, *,
                    n_sessions: int = 16384, batch_size: int = 4096, seed: int = 0) -> None:
    """Re-estimate the per-round power-normaliser statistics at threshold ``gamma``.

    Statistics become exact averages of batch statistics over ``n_sessions``
    fresh sessions, so inference-time parity symbols have unit average power.
    """
    cc = codec.config
    norm = codec.encoder.normalizer
    proto = protocol_for(gamma, cc, channel)
    saved = norm.momentum
    norm.reset()
    norm.momentum = None
    codec.train()
    try:
        for i in range(0, n_sessions, batch_size):
            rng = np.random.default_rng([seed, 7, i])
            bits, fwd, fb = sample_batch(rng, min(batch_size, n_sessions - i), cc)
            unroll(codec, bits, proto, fwd, fb)
    finally:
        norm.momentum = saved
        codec.eval()


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    n_coords: int
    max_rel_error: float
    q95_rel_error: float
    frac_below_tol: float
    rel_tol: float
    max_tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.q95_rel_error < self.rel_tol and self.max_rel_error < self.max_tol

    def as_dict(self) -> dict:
        return {**self.__dict__, "passed": self.passed}


# tau_vd=2 so the deep extension is exercised within three rounds
TINY_CODEC = CodecConfig(Q=2, m=1, T_max=3, d_latent=8, tau_vd=2)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact zeros from dividing by zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(seed: int = 0, *, config: CodecConfig = TINY_CODEC, batch_size: int = 4,
               step: float = 1e-5, rel_tol: float = 1e-4, max_tol: float = 1e-3,
               gamma: float = 1.0 - 1e-3, snr_db: float = 1.0, loss_scale: float = 1.0,
               return_grads: bool = False):
    """Compare autograd gradients of the end-to-end loss with central differences.

    Runs in double precision on a tiny codec with every parameter perturbed.
    Noise, messages and the training-mode normaliser are fixed across
    evaluations, so the loss is a deterministic function of the parameters.
    """
    t0 = time.perf_counter()
    codec = init_params(config, seed)
    channel = ChannelParams(snr_db)
    proto = ProtocolConfig(gamma=gamma, T_max=config.T_max, channel=channel, m=config.m,
                           tau_plus_override=1)
    loss_cfg = LossConfig("exp_weight", 10.0, 9.0, 1)
    rng = np.random.default_rng([seed, 11])
    bits, fwd, fb = sample_batch(rng, batch_size, config)
    codec.train()
    codec.encoder.normalizer.momentum = 1.0

    def loss_fn():
        ro = unroll(codec, bits, proto, fwd, fb)
        return loss_scale * rollout_loss(torch.stack(ro.log_probs, 1), ro.labels, ro.tau_star,
                                         loss_cfg)

    params = [p for p in codec.parameters()]
    codec.zero_grad()
    loss_fn().backward()
    analytic = np.concatenate([
        (p.grad if p.grad is not None else torch.zeros_like(p)).detach().numpy().ravel()
        for p in params])
    numeric = np.empty_like(analytic)
    i = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                lp = loss_fn().item()
                flat[j] = orig - step
                lm = loss_fn().item()
                flat[j] = orig
                numeric[i] = (lp - lm) / (2 * step)
                i += 1
    rel = relative_errors(analytic, numeric)
    report = GradCheckReport(
        n_coords=int(rel.size), max_rel_error=float(rel.max()),
        q95_rel_error=float(np.quantile(rel, 0.95)),
        frac_below_tol=float(np.mean(rel < rel_tol)), rel_tol=rel_tol, max_tol=max_tol,
        seconds=time.perf_counter() - t0)
    if return_grads:
        return report, analytic, numeric
    return report


def write_metrics_line(fh, rec: dict) -> None:
    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    fh.flush()
