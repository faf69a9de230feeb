"""Run configuration: TOML sections mirroring every tunable, with strict key checking."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import tomli
import tomli_w

from .data import DegradationParams
from .diffusion import RESIDUAL, TARGETS, NoiseSchedule, SamplerConfig
from .pruning import GEQ, Thresholds
from .unet import UNetTopology


class ConfigError(ValueError):
    pass


@dataclass
class TopologySection:
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    encoder_blocks: list[int] = field(default_factory=lambda: [2, 2, 2])
    bottleneck_blocks: int = 2
    decoder_blocks: list[int] = field(default_factory=lambda: [4, 3, 2])
    attention_in_bottleneck: bool = True
    attention_in_smallest_decoder: bool = True
    time_embed_dim: int = 64
    latent_size: list[int] = field(default_factory=lambda: [32, 32])
    in_channels: int = 3
    out_channels: int = 3
    leaky_slope: float = 0.2

    def build(self) -> UNetTopology:
        tp = UNetTopology.from_counts(
            tuple(self.encoder_blocks),
            self.bottleneck_blocks,
            tuple(self.decoder_blocks),
            self.attention_in_bottleneck,
            self.attention_in_smallest_decoder,
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            time_embed_dim=self.time_embed_dim,
            latent_size=tuple(self.latent_size),
            in_channels=self.in_channels,
            out_channels=self.out_channels,
        )
        tp.validate()
        return tp


@dataclass
class ScheduleSection:
    T_train: int = 1000
    cosine_offset: float = 0.008

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.T_train, self.cosine_offset)


@dataclass
class SamplerSection:
    steps: int = 20
    cfg_scale: float = 5.0
    clip_x0: bool = True


@dataclass
class PruningSection:
    phi_min: float = 0.2
    psi_min: float = 1.0
    mode: str = GEQ

    def thresholds(self) -> Thresholds:
        th = Thresholds(self.phi_min, self.psi_min, self.mode)
        th.validate()
        return th


@dataclass
class TrainingSection:
    lr: float = 5e-5
    pretrain_lr: float = 5e-4
    pretrain_iters: int = 2000
    finetune_iters: int = 1000
    batch_size: int = 2
    cond_dropout: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    target: str = RESIDUAL  # "residual" diffuses HQ - LQ, "image" diffuses HQ


@dataclass
class DataSection:
    n_pairs: int = 64
    n_val: int = 8
    image_size: int = 32
    blur_sigma: float = 1.0
    scale_factor: int = 2
    noise_sigma: float = 0.02

    def degradation(self, seed: int) -> DegradationParams:
        p = DegradationParams(self.blur_sigma, self.scale_factor, self.noise_sigma, seed)
        p.validate()
        return p


@dataclass
class ProfileSection:
    probes: list[str] = field(default_factory=lambda: ["enc1", "enc2", "enc4", "bottleneck", "dec4", "dec2"])
    probe_batch: int = 8
    probe_steps: list[int] = field(default_factory=list)  # empty = all sampling steps


@dataclass
class RunConfig:
    seed: int = 0
    topology: TopologySection = field(default_factory=TopologySection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    pruning: PruningSection = field(default_factory=PruningSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    profile: ProfileSection = field(default_factory=ProfileSection)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        cfg = SamplerConfig(self.sampler.steps, self.sampler.cfg_scale, self.seed if seed is None else seed, self.sampler.clip_x0)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def validate(self) -> None:
        self.topology.build()
        self.pruning.thresholds()
        self.data.degradation(self.seed)
        self.sampler_config()
        if abs(self.topology.leaky_slope - 0.2) > 0:
            raise ConfigError("leaky_slope is fixed at 0.2 in this build")
        if self.data.image_size != self.topology.latent_size[0] or self.data.image_size != self.topology.latent_size[1]:
            raise ConfigError(f"data.image_size {self.data.image_size} must equal topology.latent_size {self.topology.latent_size}")
        t = self.training
        if t.batch_size < 1 or t.pretrain_iters < 0 or t.finetune_iters < 0:
            raise ConfigError("training sizes must be non-negative (batch_size >= 1)")
        if not 0.0 <= t.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if t.target not in TARGETS:
            raise ConfigError(f"training.target must be one of {', '.join(TARGETS)}, got {t.target!r}")


_SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "seed"}


def _section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    obj = cls()
    for key, val in raw.items():
        default = getattr(obj, key)
        if isinstance(default, bool) != isinstance(val, bool):
            raise ConfigError(f"[{name}] {key} must be {type(default).__name__}, got {val!r}")
        if isinstance(default, float) and isinstance(val, int):
            val = float(val)
        if not isinstance(val, type(default)):
            raise ConfigError(f"[{name}] {key} must be {type(default).__name__}, got {val!r}")
        setattr(obj, key, val)
    return obj


def from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {raw['seed']!r}")
        cfg.seed = raw["seed"]
    for name, f in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _section(type(getattr(cfg, name)), raw[name], name))
    return cfg


def loads(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(raw)


def load(path=None, env=None) -> RunConfig:
    """Read a config file (defaults if ``path`` is None); PRUNEDIFF_SEED overrides the seed."""
    env = os.environ if env is None else env
    if path is None:
        cfg = RunConfig()
    else:
        with open(path, encoding="utf-8") as fh:
            cfg = loads(fh.read())
    override = env.get("PRUNEDIFF_SEED")
    if override:
        try:
            cfg.seed = int(override)
        except ValueError:
            raise ConfigError(f"PRUNEDIFF_SEED must be an integer, got {override!r}") from None
    cfg.validate()
    return cfg
