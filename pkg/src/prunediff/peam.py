"""LQ adapter pyramid and the phase-exchange adapter module (PEAM)."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .spectral import phase_exchange
from .tensor import Tensor
from .unet import RELU_GAIN, SCALES, Conv

FUSION_WIDTH = 64
FUSION_DEPTH = 11


class Adapter:
    """Small conv trunk producing one feature map per encoder scale (1, 2, 4)."""

    def __init__(self, in_channels: int, channels: Sequence[int], rng: np.random.Generator):
        c1, c2, c4 = channels
        self.channels = tuple(channels)
        self.stem = [
            Conv(in_channels, c1, 3, rng, gain=RELU_GAIN),
            Conv(c1, c2, 3, rng, stride=2, gain=RELU_GAIN),
            Conv(c2, c4, 3, rng, stride=2, gain=RELU_GAIN),
        ]
        self.heads = [Conv(c, c, 3, rng, gain=0.5) for c in (c1, c2, c4)]

    def __call__(self, lq: Tensor) -> list[Tensor]:
        feats = []
        h = lq
        for stem, head in zip(self.stem, self.heads):
            h = T.leaky_relu(stem(h))
            feats.append(head(h))
        return feats

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, conv in enumerate(self.stem):
            yield from conv.named_params(f"{prefix}stem.{i}.")
        for i, conv in enumerate(self.heads):
            yield from conv.named_params(f"{prefix}head.{i}.")


def extract_lq_features(adapter: Adapter, lq: Tensor, latent_size: tuple[int, int] | None = None) -> list[Tensor]:
    """Feature pyramid aligned with encoder scales; spatial sizes H, H/2, H/4."""
    if lq.ndim != 4:
        raise ValueError(f"LQ input must be rank-4, got {lq.shape}")
    h, w = lq.shape[2:]
    if latent_size is not None and (h, w) != tuple(latent_size):
        raise ValueError(f"LQ size {(h, w)} does not match latent size {tuple(latent_size)}")
    if h % 4 or w % 4:
        raise ValueError(f"LQ size {(h, w)} must be divisible by 4")
    return adapter(lq)


class FusionNet:
    """concat(H~, H) -> 3x3 conv to 64 + LeakyReLU -> eleven 3x3 convs ending at 2C.

    The last conv starts at zero weights with bias 1 on the multiplicative half
    and 0 on the additive half, so an untrained net returns H~ unchanged.
    """

    def __init__(self, channels: int, rng: np.random.Generator, width: int = FUSION_WIDTH, depth: int = FUSION_DEPTH):
        self.channels = channels
        self.entry = Conv(2 * channels, width, 3, rng, gain=RELU_GAIN)
        self.layers = [Conv(width, width, 3, rng, gain=RELU_GAIN) for _ in range(depth - 1)]
        last = Conv(width, 2 * channels, 3, rng)
        last.weight.data[...] = 0.0
        last.bias.data[:channels] = 1.0
        last.bias.data[channels:] = 0.0
        self.layers.append(last)

    def __call__(self, h_cat: Tensor) -> Tensor:
        x = T.leaky_relu(self.entry(h_cat))
        for conv in self.layers[:-1]:
            x = T.leaky_relu(conv(x))
        return self.layers[-1](x)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.entry.named_params(prefix + "entry.")
        for i, conv in enumerate(self.layers):
            yield from conv.named_params(f"{prefix}layer.{i}.")


def fuse(h: Tensor, h_tilde: Tensor, net: FusionNet) -> Tensor:
    """Modulate the exchanged feature: (1)-half * H~ + (2)-half."""
    if h.shape != h_tilde.shape:
        raise ValueError(f"fuse needs matching shapes, got {h.shape} and {h_tilde.shape}")
    c = h.shape[1]
    if c != net.channels:
        raise ValueError(f"fusion net built for C={net.channels}, features have C={c}")
    coeff = net(T.concat([h_tilde, h], axis=1))
    return T.channel_slice(coeff, 0, c) * h_tilde + T.channel_slice(coeff, c, 2 * c)


class PEAM:
    """One fusion net per encoder scale."""

    def __init__(self, channels: Sequence[int], rng: np.random.Generator, width: int = FUSION_WIDTH):
        self.nets = [FusionNet(c, rng, width) for c in channels]

    def __call__(self, i: int, f: Tensor, h: Tensor) -> Tensor:
        return fuse(h, phase_exchange(f, h), self.nets[i])

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, net in enumerate(self.nets):
            yield from net.named_params(f"{prefix}{i}.")


ADD = "add"
PHASE = "peam"


class Conditioner:
    """Turns an LQ batch into an encoder injection callback.

    Both modes inject additively before each encoder scale's first block:
    ``mode="add"`` gives H + F (plain adapter) and ``mode="peam"`` gives H + Ĥ,
    the fused phase-exchanged feature. Null conditioning zeroes F per sample,
    which leaves H untouched in both modes: in peam mode a null sample bypasses
    the module instead of taking the (degenerate) phase of a zero feature.
    """

    def __init__(self, adapter: Adapter, peam: PEAM | None = None, mode: str = ADD):
        if mode not in (ADD, PHASE):
            raise ValueError(f"unknown conditioning mode {mode!r}")
        if mode == PHASE and peam is None:
            raise ValueError("peam mode needs a PEAM instance")
        self.adapter = adapter
        self.peam = peam
        self.mode = mode

    def features(self, lq: Tensor, keep: np.ndarray | None = None) -> list[Tensor]:
        feats = self.adapter(lq)
        if keep is not None:
            mask = Tensor(np.asarray(keep, dtype=np.float32).reshape(-1, 1, 1, 1))
            feats = [f * mask for f in feats]
        return feats

    def injector(self, feats: list[Tensor], keep: np.ndarray | None = None):
        if self.mode == ADD:
            return lambda i, h: h + feats[i]
        if keep is None:
            return lambda i, h: h + self.peam(i, feats[i], h)
        keep = np.asarray(keep, dtype=np.float32).reshape(-1, 1, 1, 1)
        if not keep.any():
            return lambda i, h: h
        on = Tensor(keep)

        def inject(i, h):
            return h + self.peam(i, feats[i], h) * on

        return inject

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.adapter.named_params(prefix + "adapter.")
        if self.peam is not None:
            yield from self.peam.named_params(prefix + "peam.")


def adapter_channels(topology) -> list[int]:
    return [topology.channels(s) for s in SCALES]


def estimate_conditioner_flops(topology, mode: str, width: int = FUSION_WIDTH, depth: int = FUSION_DEPTH) -> int:
    """FLOPs of adapter (+ fusion nets) for one sample; FFTs are not counted."""
    from .unet import conv_flops

    h, w = topology.latent_size
    cs = adapter_channels(topology)
    sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
    total = 0
    prev = topology.in_channels
    for c, (hh, ww) in zip(cs, sizes):
        total += conv_flops(prev, c, 3, hh, ww) + conv_flops(c, c, 3, hh, ww)
        prev = c
    if mode == PHASE:
        for c, (hh, ww) in zip(cs, sizes):
            total += conv_flops(2 * c, width, 3, hh, ww)
            total += (depth - 1) * conv_flops(width, width, 3, hh, ww)
            total += conv_flops(width, 2 * c, 3, hh, ww)
    return int(total)
