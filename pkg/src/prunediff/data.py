"""Synthetic HQ/LQ pairs.

HQ images come from three procedural families (oriented edges, sinusoidal
gratings, smooth blobs), each tinted per channel. LQ images are produced by
blur -> bicubic downsample -> additive noise -> bicubic upsample back to the
HQ size, so both live on the same pixel grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import Tensor

FAMILIES = ("edges", "grating", "blobs")


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 1.0
    scale_factor: int = 2
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.blur_sigma < 0 or self.noise_sigma < 0 or self.seed < 0:
            raise ValueError(f"degradation parameters must be non-negative: {self}")
        if self.scale_factor < 1:
            raise ValueError(f"scale_factor must be >= 1, got {self.scale_factor}")

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        return np.ones(1)
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the last two axes with reflected borders."""
    if sigma <= 0:
        return img.astype(np.float64, copy=True)
    k = gaussian_kernel(sigma)
    out = correlate1d(img.astype(np.float64), k, axis=-2, mode="reflect")
    return correlate1d(out, k, axis=-1, mode="reflect")


def _keys_cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres, clamped borders, rows sum to 1."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        for tap in range(base - 1, base + 3):
            wgt = float(_keys_cubic(np.array(src - tap)))
            if wgt != 0.0:
                m[i, min(max(tap, 0), n_in - 1)] += wgt
    return m / m.sum(axis=1, keepdims=True)


def resize_bicubic(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[-2:]
    mh = bicubic_matrix(h, size[0])
    mw = bicubic_matrix(w, size[1])
    return np.einsum("ih,...hw,jw->...ij", mh, img.astype(np.float64), mw)


def degrade(hq: np.ndarray, p: DegradationParams) -> np.ndarray:
    """Degrade a (..., H, W) image in [0, 1]; result keeps the HQ resolution."""
    p.validate()
    hq = np.asarray(hq.data if isinstance(hq, Tensor) else hq)
    h, w = hq.shape[-2:]
    s = p.scale_factor
    if h % s or w % s:
        raise ValueError(f"image size {(h, w)} is not divisible by scale_factor {s}")
    out = gaussian_blur(hq, p.blur_sigma)
    if s > 1:
        out = resize_bicubic(out, (h // s, w // s))
    if p.noise_sigma > 0:
        rng = np.random.default_rng(p.seed)
        out = out + rng.standard_normal(out.shape) * p.noise_sigma
    if s > 1:
        out = resize_bicubic(out, (h, w))
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# procedural HQ images


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _edges(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.full((size, size), rng.uniform(0.2, 0.8))
    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.3, 0.3)
        d = (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta) - offset
        img += rng.uniform(-0.4, 0.4) * (d > 0)
    return img


def _grating(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.5, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    return 0.5 + rng.uniform(0.2, 0.45) * np.sin(2 * np.pi * freq * u + phase)


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.full((size, size), rng.uniform(0.3, 0.7))
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.05, 0.25)
        img += rng.uniform(-0.4, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return img


_GENERATORS = {"edges": _edges, "grating": _grating, "blobs": _blobs}


def procedural_image(rng: np.random.Generator, size: int, channels: int = 3, family: str | None = None) -> np.ndarray:
    """One (channels, size, size) image in [0, 1]."""
    family = family or FAMILIES[int(rng.integers(len(FAMILIES)))]
    base = _GENERATORS[family](rng, size)
    tint = rng.uniform(0.6, 1.0, size=channels)
    offset = rng.uniform(-0.1, 0.1, size=channels)
    img = base[None] * tint[:, None, None] + offset[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_dataset(n: int, image_size: int, seed: int, p: DegradationParams, channels: int = 3) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (hq, lq) pairs of shape (channels, size, size); item i depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size < 1 or image_size & (image_size - 1):
        raise ValueError(f"image_size must be a power of two, got {image_size}")
    pairs = []
    for i in range(n):
        rng = item_rng(seed, i)
        hq = procedural_image(rng, image_size, channels, FAMILIES[i % len(FAMILIES)])
        noise_seed = int(rng.integers(0, 2**31 - 1))
        lq = degrade(hq, DegradationParams(p.blur_sigma, p.scale_factor, p.noise_sigma, noise_seed))
        pairs.append((hq, lq))
    return pairs


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    hq = np.stack([h for h, _ in pairs]).astype(np.float32)
    lq = np.stack([l for _, l in pairs]).astype(np.float32)
    return hq, lq


def save_dataset(path, pairs) -> None:
    hq, lq = stack_pairs(pairs)
    np.savez(path, hq=hq, lq=lq)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["hq"].astype(np.float32), z["lq"].astype(np.float32)
