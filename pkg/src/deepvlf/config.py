"""Run configuration: TOML file with one table per module, plus dotted overrides.

::

    seed = 0
    [codec]     K, Q, m, d_latent, tau_vd, attn_*
    [channel]   forward_snr_db, feedback_mode, feedback_snr_db
    [protocol]  gamma, T_max, tau_plus (optional)
    [training]  batch_size, lr, weight_decay, ...
    [eval]      n_sessions, chunk_size, gammas, snrs, seed_policy
    [paths]     checkpoint, metrics, csv, transcripts
"""
from __future__ import annotations

import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .channel import ChannelParams
from .codec import CodecConfig
from .protocol import GAMMA_GRID, ProtocolConfig
from .training import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; message names the offending field."""


@dataclass(frozen=True)
class CodeSection:
    K: int = 51
    Q: int = 17
    m: int = 3
    d_latent: int = 32
    tau_vd: int = 3
    attn_scale: bool = True
    attn_projection: bool = False
    attn_residual: bool = True


@dataclass(frozen=True)
class ProtocolSection:
    gamma: float = 1.0 - 1e-5
    T_max: int = 15
    tau_plus: int | None = None


@dataclass(frozen=True)
class EvalSection:
    n_sessions: int = 10000
    chunk_size: int = 1024
    gammas: tuple = GAMMA_GRID
    snrs: tuple = (1.0,)
    seed_policy: str = "shared"


@dataclass(frozen=True)
class PathsSection:
    checkpoint: str = "deepvlf.ckpt"
    metrics: str = "metrics.jsonl"
    csv: str = "results.csv"
    transcripts: str = ""


@dataclass(frozen=True)
class RunConfig:
    codec: CodeSection = field(default_factory=CodeSection)
    channel: ChannelParams = field(default_factory=ChannelParams)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    # ------------------------------------------------------------ derived views

    def codec_config(self) -> CodecConfig:
        c = self.codec
        return CodecConfig(Q=c.Q, m=c.m, T_max=self.protocol.T_max, d_latent=c.d_latent,
                           tau_vd=c.tau_vd, attn_scale=c.attn_scale,
                           attn_projection=c.attn_projection, attn_residual=c.attn_residual)

    def protocol_config(self, gamma: float | None = None, channel: ChannelParams | None = None
                        ) -> ProtocolConfig:
        return ProtocolConfig(
            gamma=self.protocol.gamma if gamma is None else gamma, T_max=self.protocol.T_max,
            channel=channel or self.channel, m=self.codec.m,
            tau_plus_override=self.protocol.tau_plus)

    def train_config(self) -> TrainConfig:
        return replace(self.training, seed=self.seed)

    # ------------------------------------------------------------ (de)serialisation

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["training"]["seed"]           # the top-level seed drives training
        for section in d.values():
            if isinstance(section, dict):
                for k in [k for k, v in section.items() if v is None]:
                    del section[k]
                for k, v in section.items():
                    if isinstance(v, tuple):
                        section[k] = list(v)
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


_SECTIONS = {
    "codec": CodeSection,
    "channel": ChannelParams,
    "protocol": ProtocolSection,
    "training": TrainConfig,
    "eval": EvalSection,
    "paths": PathsSection,
}


def _build(name: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if "seed" in data.get("training", {}):
        raise ConfigError("training.seed is not a key; set the top-level seed instead")
    kw = {name: _build(name, cls, data.get(name, {})) for name, cls in _SECTIONS.items()}
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = RunConfig(seed=seed, **kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    c = cfg.codec
    if c.K != c.Q * c.m:
        raise ConfigError(f"codec.K={c.K} must equal codec.Q * codec.m = {c.Q * c.m}")
    try:
        cfg.codec_config()
        cfg.protocol_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.eval.n_sessions < 1:
        raise ConfigError("eval.n_sessions must be at least 1")
    if cfg.eval.chunk_size < 1:
        raise ConfigError("eval.chunk_size must be at least 1")


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value``; the value is read as a TOML literal, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} addresses a non-table key")
        log.info("override %s = %r", ".".join(path), value)
        node[path[-1]] = value
    return data


def load(path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(apply_overrides(data, overrides))


def loads(text: str, overrides=()) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc
    return from_dict(apply_overrides(data, overrides))
