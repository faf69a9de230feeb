"""Toy denoising UNet: topology description, construction, parameter and FLOP counting.

Layout (three scales, factor 2 between them)::

    in_conv -> [inject, enc blocks]@s1 -> down -> [inject, enc blocks]@s2 -> down
            -> [inject, enc blocks]@s4 -> bottleneck blocks@s4
            -> merge(B, E4) -> dec blocks@s4 -> up -> merge(., E2) -> dec blocks@s2
            -> up -> merge(., E1) -> dec blocks@s1 -> out_conv

Every block maps C channels to C channels, so any block can be removed
without touching the channel arithmetic of its neighbours.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCALES = (1, 2, 4)
DECODER_SCALES = (4, 2, 1)
RESIDUAL = "residual"
ATTENTION = "attention"
BLOCK_KINDS = (RESIDUAL, ATTENTION)


class TopologyError(ValueError):
    pass


@dataclass
class UNetTopology:
    """Declarative UNet description.

    ``encoder`` lists block kinds per encoder scale (s=1,2,4); ``decoder`` lists
    them per decoder scale in execution order (s=4,2,1). ``*_origin`` keep the
    index each surviving block had in the unpruned network.
    """

    base_channels: int = 32
    channel_multipliers: tuple[int, int, int] = (1, 2, 4)
    encoder: list[list[str]] = field(default_factory=lambda: [[RESIDUAL] * 2, [RESIDUAL] * 2, [RESIDUAL] * 2])
    bottleneck: list[str] = field(default_factory=lambda: [ATTENTION] * 2)
    decoder: list[list[str]] = field(default_factory=lambda: [[ATTENTION] * 4, [RESIDUAL] * 3, [RESIDUAL] * 2])
    time_embed_dim: int = 64
    latent_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    out_channels: int = 3
    encoder_origin: list[list[int]] | None = None
    bottleneck_origin: list[int] | None = None
    decoder_origin: list[list[int]] | None = None

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.latent_size = tuple(self.latent_size)
        self.encoder = [list(g) for g in self.encoder]
        self.bottleneck = list(self.bottleneck)
        self.decoder = [list(g) for g in self.decoder]
        if self.encoder_origin is None:
            self.encoder_origin = [list(range(len(g))) for g in self.encoder]
        if self.bottleneck_origin is None:
            self.bottleneck_origin = list(range(len(self.bottleneck)))
        if self.decoder_origin is None:
            self.decoder_origin = [list(range(len(g))) for g in self.decoder]

    @classmethod
    def from_counts(
        cls,
        encoder_blocks=(2, 2, 2),
        bottleneck_blocks=2,
        decoder_blocks=(4, 3, 2),
        attention_in_bottleneck: bool = True,
        attention_in_smallest_decoder: bool = True,
        **kw,
    ) -> "UNetTopology":
        enc = [[RESIDUAL] * n for n in encoder_blocks]
        mid = [ATTENTION if attention_in_bottleneck else RESIDUAL] * bottleneck_blocks
        dec = [[RESIDUAL] * n for n in decoder_blocks]
        if attention_in_smallest_decoder:
            dec[0] = [ATTENTION] * decoder_blocks[0]
        return cls(encoder=enc, bottleneck=mid, decoder=dec, **kw)

    @property
    def encoder_blocks(self) -> list[int]:
        return [len(g) for g in self.encoder]

    @property
    def bottleneck_blocks(self) -> int:
        return len(self.bottleneck)

    @property
    def decoder_blocks(self) -> list[int]:
        return [len(g) for g in self.decoder]

    def channels(self, scale: int) -> int:
        return self.base_channels * self.channel_multipliers[SCALES.index(scale)]

    def validate(self) -> None:
        problems = []
        if len(self.channel_multipliers) != 3:
            problems.append("exactly three channel multipliers (scales 1, 2, 4) required")
        if len(self.encoder) != 3 or len(self.decoder) != 3:
            problems.append("encoder and decoder must each describe three scales")
        if any(len(g) < 1 for g in self.encoder) or len(self.bottleneck) < 1 or any(len(g) < 1 for g in self.decoder):
            problems.append("every encoder scale, the bottleneck and every decoder scale need >= 1 block")
        kinds = [k for g in self.encoder + self.decoder for k in g] + self.bottleneck
        if any(k not in BLOCK_KINDS for k in kinds):
            problems.append(f"block kinds must be one of {BLOCK_KINDS}")
        h, w = self.latent_size
        if h % 4 or w % 4 or h < 4 or w < 4:
            problems.append(f"latent size {self.latent_size} must be divisible by 4 (two 2x downsamplings)")
        if self.base_channels < 1 or any(m < 1 for m in self.channel_multipliers):
            problems.append("channel counts must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            problems.append("time_embed_dim must be a positive even number")
        if self.in_channels < 1 or self.out_channels < 1:
            problems.append("in/out channels must be positive")
        shapes = (
            [len(g) for g in self.encoder] != [len(g) for g in self.encoder_origin]
            or len(self.bottleneck) != len(self.bottleneck_origin)
            or [len(g) for g in self.decoder] != [len(g) for g in self.decoder_origin]
        )
        if shapes:
            problems.append("origin index lists do not match block lists")
        if problems:
            raise TopologyError("invalid topology: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["latent_size"] = list(self.latent_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetTopology":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def copy(self) -> "UNetTopology":
        return copy.deepcopy(self)


def default_topology() -> UNetTopology:
    """The fixed desk topology: base 32, multipliers [1,2,4], blocks [2,2,2]/2/[4,3,2], 32x32."""
    return UNetTopology()


# ---------------------------------------------------------------------------
# layers


RELU_GAIN = math.sqrt(2.0 / (1.0 + T.LEAKY_SLOPE**2))


class Conv:
    """3x3 / 1x1 conv; weights ~ N(0, (gain^2) / fan_in), zero bias."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, gain: float = 1.0):
        std = gain / math.sqrt(c_in * k * k)
        self.weight = T.Parameter(rng.standard_normal((c_out, c_in, k, k)) * std)
        self.bias = T.Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = T.Parameter(rng.standard_normal((d_out, d_in)) * gain * math.sqrt(1.0 / d_in))
        self.bias = T.Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """(N,) timesteps -> (N, dim) [sin | cos] features with geometric frequencies."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class Block:
    """Residual conv pair with time-conditioned scale/shift, optionally followed by self-attention."""

    def __init__(self, channels: int, temb_dim: int, kind: str, rng: np.random.Generator, residual_gain: float = 0.1):
        self.kind = kind
        self.channels = channels
        self.conv1 = Conv(channels, channels, 3, rng, gain=RELU_GAIN)
        self.temb = Linear(temb_dim, 2 * channels, rng, gain=0.1)
        self.conv2 = Conv(channels, channels, 3, rng, gain=residual_gain)
        if kind == ATTENTION:
            self.q = Conv(channels, channels, 1, rng, gain=0.5)
            self.k = Conv(channels, channels, 1, rng, gain=0.5)
            self.v = Conv(channels, channels, 1, rng)
            self.proj = Conv(channels, channels, 1, rng, gain=residual_gain)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        c = self.channels
        h = self.conv1(x)
        ss = self.temb(temb)
        scale = T.reshape(T.channel_slice(ss, 0, c), (-1, c, 1, 1))
        shift = T.reshape(T.channel_slice(ss, c, 2 * c), (-1, c, 1, 1))
        h = h * (scale + 1.0) + shift
        h = self.conv2(T.leaky_relu(h))
        out = x + h
        if self.kind == ATTENTION:
            out = out + self._attend(out)
        return out

    def _attend(self, x: Tensor) -> Tensor:
        b, c, hh, ww = x.shape
        n = hh * ww
        q = T.reshape(self.q(x), (b, c, n))
        k = T.reshape(self.k(x), (b, c, n))
        v = T.reshape(self.v(x), (b, c, n))
        logits = T.matmul(T.transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(c))
        attn = T.softmax(logits, axis=-1)  # (b, n_query, n_key)
        out = T.matmul(v, T.transpose(attn, (0, 2, 1)))
        return self.proj(T.reshape(out, (b, c, hh, ww)))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_params(prefix + "conv1.")
        yield from self.temb.named_params(prefix + "temb.")
        yield from self.conv2.named_params(prefix + "conv2.")
        if self.kind == ATTENTION:
            for nm in ("q", "k", "v", "proj"):
                yield from getattr(self, nm).named_params(f"{prefix}attn_{nm}.")


# probe names for the adjacent-timestep analysis
PROBES = ("enc1", "enc2", "enc4", "bottleneck", "dec4", "dec2", "dec1")
FIG3_PROBES = ("enc1", "enc2", "enc4", "bottleneck", "dec4", "dec2")

Recorder = Callable[[str, Tensor], None]
BlockRecorder = Callable[[int, int, Tensor, Tensor], None]
Injector = Callable[[int, Tensor], Tensor]


class UNet:
    def __init__(self, topology: UNetTopology, seed: int = 0, residual_gain: float = 0.1):
        topology.validate()
        self.topology = topology
        rng = np.random.default_rng(seed)
        tp = topology
        c = [tp.channels(s) for s in SCALES]
        d = tp.time_embed_dim
        self.time1 = Linear(d, d, rng)
        self.time2 = Linear(d, d, rng)
        self.in_conv = Conv(tp.in_channels, c[0], 3, rng)
        self.enc_blocks = [[Block(c[i], d, kind, rng, residual_gain) for kind in tp.encoder[i]] for i in range(3)]
        self.down = [Conv(c[0], c[1], 3, rng, stride=2), Conv(c[1], c[2], 3, rng, stride=2)]
        self.mid_blocks = [Block(c[2], d, kind, rng, residual_gain) for kind in tp.bottleneck]
        # decoder index j runs over scales 4, 2, 1
        dec_c = [c[2], c[1], c[0]]
        self.merge = [Conv(2 * dec_c[j], dec_c[j], 3, rng, gain=math.sqrt(0.5)) for j in range(3)]
        self.up = [Conv(c[2], c[1], 3, rng), Conv(c[1], c[0], 3, rng)]
        self.dec_blocks = [[Block(dec_c[j], d, kind, rng, residual_gain) for kind in tp.decoder[j]] for j in range(3)]
        self.out_conv = Conv(c[0], tp.out_channels, 3, rng, gain=0.1)

    def time_embedding(self, t, batch: int) -> Tensor:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
        e = Tensor(sinusoidal_embedding(t, self.topology.time_embed_dim))
        return self.time2(T.leaky_relu(self.time1(e)))

    def __call__(
        self,
        z: Tensor,
        t,
        inject: Injector | None = None,
        record: Recorder | None = None,
        record_block: BlockRecorder | None = None,
    ) -> Tensor:
        tp = self.topology
        if z.ndim != 4 or z.shape[1] != tp.in_channels or tuple(z.shape[2:]) != tuple(tp.latent_size):
            raise ValueError(
                f"UNet input must be (B, {tp.in_channels}, {tp.latent_size[0]}, {tp.latent_size[1]}), got {z.shape}"
            )
        temb = self.time_embedding(t, z.shape[0])
        h = self.in_conv(z)
        skips = []
        for i in range(3):
            if i > 0:
                h = self.down[i - 1](h)
            if inject is not None:
                h = inject(i, h)
            for blk in self.enc_blocks[i]:
                h = blk(h, temb)
            skips.append(h)
            if record:
                record(f"enc{SCALES[i]}", h)
        for blk in self.mid_blocks:
            h = blk(h, temb)
        if record:
            record("bottleneck", h)
        for j in range(3):
            if j > 0:
                h = self.up[j - 1](T.upsample2x(h))
            h = self.merge[j](T.concat([h, skips[2 - j]], axis=1))
            for k, blk in enumerate(self.dec_blocks[j]):
                out = blk(h, temb)
                if record_block:
                    record_block(j, k, h, out)
                h = out
            if record:
                record(f"dec{DECODER_SCALES[j]}", h)
        return self.out_conv(T.leaky_relu(h))

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.time1.named_params(prefix + "time1.")
        yield from self.time2.named_params(prefix + "time2.")
        yield from self.in_conv.named_params(prefix + "in_conv.")
        for i, group in enumerate(self.enc_blocks):
            for k, blk in enumerate(group):
                yield from blk.named_params(f"{prefix}enc.{i}.{k}.")
        for i, conv in enumerate(self.down):
            yield from conv.named_params(f"{prefix}down.{i}.")
        for k, blk in enumerate(self.mid_blocks):
            yield from blk.named_params(f"{prefix}mid.{k}.")
        for j in range(3):
            yield from self.merge[j].named_params(f"{prefix}merge.{j}.")
            if j > 0:
                yield from self.up[j - 1].named_params(f"{prefix}up.{j - 1}.")
            for k, blk in enumerate(self.dec_blocks[j]):
                yield from blk.named_params(f"{prefix}dec.{j}.{k}.")
        yield from self.out_conv.named_params(prefix + "out_conv.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]


def build_model(topology: UNetTopology, seed: int, residual_gain: float = 0.1) -> UNet:
    return UNet(topology, seed, residual_gain)


def count_params(model) -> int:
    """Exact number of scalar parameters of anything exposing ``named_params``."""
    return int(sum(p.size for _, p in model.named_params()))


# ---------------------------------------------------------------------------
# analytic FLOPs (multiply-adds x 2). Per-sample embedding MLPs are excluded:
# they do not depend on the spatial size and the runtime counter skips them too.


def conv_flops(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    return 2 * c_in * c_out * k * k * h_out * w_out


def _block_flops(kind: str, c: int, h: int, w: int) -> int:
    n = 2 * conv_flops(c, c, 3, h, w)
    if kind == ATTENTION:
        hw = h * w
        n += 4 * conv_flops(c, c, 1, h, w)
        n += 2 * (2 * hw * hw * c)
    return n


def estimate_flops(topology: UNetTopology, input_size: tuple[int, int] | None = None) -> int:
    """FLOPs of one UNet forward pass for a single sample."""
    tp = topology
    h, w = input_size or tp.latent_size
    c = [tp.channels(s) for s in SCALES]
    sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
    total = conv_flops(tp.in_channels, c[0], 3, h, w)
    for i in range(3):
        hh, ww = sizes[i]
        if i > 0:
            total += conv_flops(c[i - 1], c[i], 3, hh, ww)
        total += sum(_block_flops(kind, c[i], hh, ww) for kind in tp.encoder[i])
    total += sum(_block_flops(kind, c[2], *sizes[2]) for kind in tp.bottleneck)
    for j in range(3):
        s = 2 - j
        hh, ww = sizes[s]
        if j > 0:
            total += conv_flops(c[s + 1], c[s], 3, hh, ww)
        total += conv_flops(2 * c[s], c[s], 3, hh, ww)
        total += sum(_block_flops(kind, c[s], hh, ww) for kind in tp.decoder[j])
    total += conv_flops(c[0], tp.out_channels, 3, h, w)
    return int(total)
