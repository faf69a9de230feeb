"""Feature redundancy metrics.

Both metrics compare two equal-shaped (B, C, H, W) feature maps position by
position: at every (b, h, w) the C-vector of channel values is treated as one
sample, and the result is the mean over all B*H*W positions. All arithmetic is
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

KL_EPS = 1e-12


@dataclass(frozen=True)
class MetricValue:
    phi_cos: float
    psi_kl: float
    count: int


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    y = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"metric inputs must have identical shapes, got {x.shape} and {y.shape}")
    if x.ndim != 4 or x.shape[1] < 1:
        raise ValueError(f"metric inputs must be (B, C>=1, H, W), got {x.shape}")
    return x, y


def cosine_dissimilarity(a, b) -> float:
    """Mean over positions of 1 - cos(a_pos, b_pos); result lies in [0, 2].

    A position where both vectors are zero contributes 0; where exactly one is
    zero it contributes 1.
    """
    x, y = _pair(a, b)
    dot = np.einsum("bchw,bchw->bhw", x, y)
    nx = np.sqrt(np.einsum("bchw,bchw->bhw", x, x))
    ny = np.sqrt(np.einsum("bchw,bchw->bhw", y, y))
    both = (nx > 0) & (ny > 0)
    cos = np.where(both, dot / np.where(both, nx * ny, 1.0), 0.0)
    d = np.where(both, 1.0 - np.clip(cos, -1.0, 1.0), np.where((nx > 0) | (ny > 0), 1.0, 0.0))
    return float(d.mean())


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kl_metric(a, b) -> float:
    """Mean over positions of KL(softmax_c(a) || softmax_c(b)); argument order matters."""
    x, y = _pair(a, b)
    p = np.exp(_log_softmax(x))
    q = np.exp(_log_softmax(y))
    kl = (p * (np.log(np.maximum(p, KL_EPS)) - np.log(np.maximum(q, KL_EPS)))).sum(axis=1)
    return float(kl.mean())


def metric_pair(a, b) -> MetricValue:
    x, _ = _pair(a, b)
    return MetricValue(cosine_dissimilarity(a, b), kl_metric(a, b), x.shape[0] * x.shape[2] * x.shape[3])
