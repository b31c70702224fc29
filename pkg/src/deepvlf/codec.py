"""Neural encoder and decoder of the variable-length feedback code.

Both sides share one structure: per-group knowledge vectors go through a
variable-depth feature extractor, get mixed by masked self-attention over the
groups, and a small GELU header turns each aggregated latent into either a
parity symbol (encoder) or a belief over the ``2**m`` group patterns (decoder).

Knowledge vectors have a fixed, zero-padded layout:

* encoder, width ``m + 2*T_max``: bipolar bits, then ``(parity, feedback)``
  for rounds ``1..T_max``;
* decoder, width ``T_max + 2**m``: received symbol for rounds ``1..T_max``,
  then the previous-round belief.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class CodecConfig:
    Q: int = 17
    m: int = 3
    T_max: int = 15
    d_latent: int = 32
    tau_vd: int = 3
    attn_scale: bool = True
    attn_projection: bool = False
    attn_residual: bool = True
    norm_momentum: float = 0.01
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("Q", "m", "T_max", "d_latent"):
            if getattr(self, name) < 1:
                raise ValueError(f"codec.{name} must be a positive integer")
        if self.tau_vd < 0:
            raise ValueError("codec.tau_vd must be non-negative")
        if not 0.0 < self.norm_momentum <= 1.0:
            raise ValueError("codec.norm_momentum must lie in (0, 1]")

    @property
    def K(self) -> int:
        return self.Q * self.m

    @property
    def n_patterns(self) -> int:
        return 1 << self.m

    @property
    def enc_width(self) -> int:
        return self.m + 2 * self.T_max

    @property
    def dec_width(self) -> int:
        return self.T_max + self.n_patterns

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- knowledge


@dataclass
class CodecState:
    """Batched per-group state shared by the encoder and decoder at one round.

    ``active`` is the decode mask carried into the round (True = undecoded),
    ``log_beliefs`` the decoder's belief from the previous round.
    """

    labels: torch.Tensor
    enc_know: torch.Tensor
    dec_know: torch.Tensor
    log_beliefs: torch.Tensor
    active: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]


def bipolar(bits) -> torch.Tensor:
    b = torch.as_tensor(np.asarray(bits), dtype=DTYPE)
    return 2.0 * b - 1.0


def init_state(bits, config: CodecConfig) -> CodecState:
    """Round-1 state for a batch of grouped messages ``(B, Q, m)``."""
    bits = np.asarray(bits, dtype=np.int64)
    B, Q, m = bits.shape
    if (Q, m) != (config.Q, config.m):
        raise ValueError(f"message groups {(Q, m)} do not match codec ({config.Q}, {config.m})")
    weights = 1 << np.arange(m - 1, -1, -1)
    labels = torch.as_tensor(bits @ weights, dtype=torch.long)
    enc = torch.zeros(B, Q, config.enc_width, dtype=DTYPE)
    enc[..., :m] = bipolar(bits)
    dec = torch.zeros(B, Q, config.dec_width, dtype=DTYPE)
    A = config.n_patterns
    log_p = torch.full((B, Q, A), -math.log(A), dtype=DTYPE)
    active = torch.ones(B, Q, dtype=torch.bool)
    return CodecState(labels, enc, dec, log_p, active)


def _slot_onehot(width: int, positions) -> torch.Tensor:
    e = torch.zeros(width, dtype=DTYPE)
    e[list(positions)] = 1.0
    return e


def extend_encoder_knowledge(enc_know, x, y_fb, tau: int, keep, config: CodecConfig):
    """Append round-``tau`` parity and feedback for groups in ``keep``.

    Groups outside ``keep`` (decoded at ``tau``) keep their vector unchanged.
    Built without in-place writes so gradients flow through ``x`` and ``y_fb``.
    """
    m = config.m
    c_slot = m + 2 * (tau - 1)
    e_c = _slot_onehot(config.enc_width, [c_slot])
    e_y = _slot_onehot(config.enc_width, [c_slot + 1])
    new = enc_know + x[..., None] * e_c + y_fb[..., None] * e_y
    return torch.where(keep[..., None], new, enc_know)


def extend_decoder_knowledge(dec_know, y, log_beliefs, tau: int, active, config: CodecConfig):
    """Write the round-``tau`` received symbol and the previous belief for active groups."""
    T = config.T_max
    e_y = _slot_onehot(T, [tau - 1])
    received = dec_know[..., :T] + y[..., None] * e_y
    new = torch.cat([received, log_beliefs.exp()], dim=-1)
    return torch.where(active[..., None], new, dec_know)


def assemble_knowledge(side: str, tau: int, config: CodecConfig, *, bits=None, x=None,
                       y=None, y_fb=None, masks=None, beliefs=None) -> np.ndarray:
    """Build the knowledge vectors of one session at round ``tau`` from its history.

    This is the direct, non-incremental construction: histories are arrays
    indexed by round (row ``t-1`` is round ``t``) and ``masks[t]`` is the
    decode mask after round ``t`` (``masks[0]`` all ones).  ``beliefs[t]`` is
    the belief matrix after round ``t`` with ``beliefs[0]`` the uniform prior.
    Returns ``(Q, width)``.
    """
    if not 1 <= tau <= config.T_max:
        raise ValueError(f"round {tau} outside [1, {config.T_max}]")
    Q, m, T = config.Q, config.m, config.T_max
    masks = np.asarray(masks)
    if side == "encoder":
        out = np.zeros((Q, config.enc_width))
        out[:, :m] = 2.0 * np.asarray(bits, dtype=np.float64) - 1.0
        for t in range(1, tau):
            for q in range(Q):
                if masks[t][q]:
                    out[q, m + 2 * (t - 1)] = x[t - 1][q]
                    out[q, m + 2 * (t - 1) + 1] = y_fb[t - 1][q]
        return out
    if side == "decoder":
        out = np.zeros((Q, config.dec_width))
        for q in range(Q):
            last = 0
            for t in range(1, tau + 1):
                if masks[t - 1][q]:
                    out[q, t - 1] = y[t - 1][q]
                    last = t
            if last:
                out[q, T:] = beliefs[last - 1][q]
        return out
    raise ValueError(f"unknown side {side!r}")


# ---------------------------------------------------------------- networks


class VDFE(nn.Module):
    """Variable-depth feature extractor.

    Three fully-connected layers up to round ``tau_vd``; afterwards one more
    rectified linear layer is stacked on top.
    """

    def __init__(self, d_in: int, d: int, tau_vd: int):
        super().__init__()
        self.tau_vd = tau_vd
        self.shallow = nn.Sequential(
            nn.Linear(d_in, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d)
        )
        self.deep = nn.Linear(d, d)

    def forward(self, v: torch.Tensor, tau: int) -> torch.Tensor:
        h = self.shallow(v)
        if tau > self.tau_vd:
            h = self.deep(F.relu(h))
        return h


def attention_coeffs(latents: torch.Tensor, active: torch.Tensor, scale: bool = True,
                     queries: torch.Tensor | None = None) -> torch.Tensor:
    """Aggregation weights ``rho[..., i, j]`` of variable node ``i`` into check node ``j``.

    Each check column is a softmax over all ``Q`` variable nodes of the inner
    products ``<latent_i, latent_j>``; decoded variable nodes keep contributing.
    Columns of decoded check nodes are zeroed (they emit nothing).
    """
    keys = latents
    queries = latents if queries is None else queries
    scores = keys @ queries.transpose(-1, -2)
    if scale:
        scores = scores / math.sqrt(latents.shape[-1])
    rho = torch.softmax(scores, dim=-2)
    return rho * active[..., None, :].to(rho.dtype)


class _Side(nn.Module):
    def __init__(self, d_in: int, config: CodecConfig):
        super().__init__()
        d = config.d_latent
        self.config = config
        self.fv = VDFE(d_in, d, config.tau_vd)
        if config.attn_projection:
            self.w_query = nn.Linear(d, d, bias=False)
            self.w_key = nn.Linear(d, d, bias=False)

    def aggregate(self, know, active, tau):
        h = self.fv(know, tau)
        if self.config.attn_projection:
            rho = attention_coeffs(self.w_key(h), active, self.config.attn_scale, self.w_query(h))
        else:
            rho = attention_coeffs(h, active, self.config.attn_scale)
        z = rho.transpose(-1, -2) @ h
        # skip connection around the attention, as in a transformer block
        return z + h if self.config.attn_residual else z


class PowerNormalizer(nn.Module):
    """Per-round affine normalisation of parity symbols over active groups.

    In training mode batch statistics are used and folded into running
    estimates; in eval mode the running estimates are used.  With
    ``momentum=None`` the running estimates become exact cumulative averages,
    which is how :func:`calibrate_power` re-estimates them.
    """

    def __init__(self, T_max: int, momentum: float | None, eps: float):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(T_max, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(T_max, dtype=DTYPE))
        self.register_buffer("num_batches", torch.zeros(T_max, dtype=DTYPE))

    def forward(self, u, active, tau: int):
        r = tau - 1
        if self.training:
            sel = u[active]
            if sel.numel() >= 2:
                mean = sel.mean()
                var = sel.var(unbiased=False)
                with torch.no_grad():
                    n = self.num_batches[r] + 1
                    w = 1.0 / n if self.momentum is None else self.momentum
                    if n == 1:
                        w = 1.0
                    self.running_mean[r] += w * (mean.detach() - self.running_mean[r])
                    self.running_var[r] += w * (var.detach() - self.running_var[r])
                    self.num_batches[r] = n
                return (u - mean) / torch.sqrt(var + self.eps)
        return (u - self.running_mean[r]) / torch.sqrt(self.running_var[r] + self.eps)

    def reset(self):
        self.running_mean.zero_()
        self.running_var.fill_(1.0)
        self.num_batches.zero_()


class Encoder(_Side):
    def __init__(self, config: CodecConfig):
        super().__init__(config.enc_width, config)
        d = config.d_latent
        self.fc = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 1))
        self.normalizer = PowerNormalizer(config.T_max, config.norm_momentum, config.norm_eps)

    def forward(self, know, active, tau):
        z = self.aggregate(know, active, tau)
        u = self.fc(z).squeeze(-1)
        x = self.normalizer(u, active, tau)
        return torch.where(active, x, torch.zeros_like(x))


class Decoder(_Side):
    def __init__(self, config: CodecConfig):
        super().__init__(config.dec_width, config)
        d = config.d_latent
        self.fc = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d), nn.GELU())
        self.classifier = nn.Linear(d, config.n_patterns)

    def forward(self, know, active, tau):
        z = self.aggregate(know, active, tau)
        return torch.log_softmax(self.classifier(self.fc(z)), dim=-1)


class DeepVLFCodec(nn.Module):
    """Encoder/decoder pair driven round by round by :mod:`deepvlf.protocol`."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.to(DTYPE)

    def encode_round(self, state: CodecState, tau: int) -> torch.Tensor:
        """Parity symbols ``(B, Q)`` for round ``tau``; zero for decoded groups."""
        return self.encoder(state.enc_know, state.active, tau)

    def decode_round(self, state: CodecState, y: torch.Tensor, tau: int):
        """Update the belief with the received packet ``y`` of shape ``(B, Q)``.

        Returns ``(log_beliefs, dec_know)``; decoded groups keep their frozen
        belief and knowledge.
        """
        if tuple(y.shape) != tuple(state.active.shape):
            raise ValueError(f"received packet of shape {tuple(y.shape)} is not aligned "
                             f"to {tuple(state.active.shape)} groups")
        know = extend_decoder_knowledge(state.dec_know, y, state.log_beliefs, tau,
                                        state.active, self.config)
        log_p = self.decoder(know, state.active, tau)
        log_p = torch.where(state.active[..., None], log_p, state.log_beliefs)
        return log_p, know


def vdfe_forward(v, tau: int, vdfe: VDFE) -> torch.Tensor:
    return vdfe(torch.as_tensor(v, dtype=DTYPE), tau)


def init_params(config: CodecConfig, seed: int) -> DeepVLFCodec:
    """Freshly initialised codec; deterministic in ``seed`` and leaves global RNG alone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DeepVLFCodec(config)


# ---------------------------------------------------------------- manifest / checkpoint


def manifest(codec: DeepVLFCodec) -> dict:
    arrays = {name: {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
              for name, t in codec.state_dict().items()}
    h = hashlib.sha256()
    for name, t in codec.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(codec.config),
        "config_digest": codec.config.digest(),
        "arrays": arrays,
        "digest": h.hexdigest(),
    }


class CheckpointError(ValueError):
    pass


def save_checkpoint(codec: DeepVLFCodec, path, extra: dict | None = None) -> None:
    """Zip archive with ``manifest.json`` and one ``.npy`` per array.

    Power-normaliser statistics are listed separately under ``normalizer``.
    """
    man = manifest(codec)
    man["normalizer"] = [n for n in man["arrays"] if ".normalizer." in n]
    if extra:
        man["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(man, indent=2, sort_keys=True))
        for name, t in codec.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path, config: CodecConfig | None = None) -> DeepVLFCodec:
    """Load a checkpoint, rejecting it if it disagrees with ``config``."""
    with zipfile.ZipFile(path) as zf:
        man = json.loads(zf.read("manifest.json"))
        if man.get("format_version") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {man.get('format_version')}")
        stored = CodecConfig(**man["config"])
        if config is not None and stored.digest() != config.digest():
            diff = {k: (v, getattr(config, k)) for k, v in asdict(stored).items()
                    if getattr(config, k) != v}
            raise CheckpointError(f"checkpoint config mismatch (stored, runtime): {diff}")
        codec = DeepVLFCodec(stored)
        expected = codec.state_dict()
        state = {}
        for name, meta in man["arrays"].items():
            if name not in expected:
                raise CheckpointError(f"unexpected array {name}")
            arr = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != meta["shape"] or list(expected[name].shape) != meta["shape"]:
                raise CheckpointError(f"shape mismatch for {name}")
            state[name] = torch.from_numpy(arr)
        missing = set(expected) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks arrays {sorted(missing)}")
        codec.load_state_dict(state)
    codec.eval()
    return codec


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))
