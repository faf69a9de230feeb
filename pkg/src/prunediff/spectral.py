"""Per-channel 2-D Fourier analysis of (B, C, H, W) feature maps.

Conventions: unnormalized forward transform, 1/(H*W) inverse. Phase is taken
in (-pi, pi] and defined as 0 wherever the amplitude is exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _accumulate, _make

IMAG_RESIDUAL_TOL = 1e-4
# bins this far below the largest bin of their plane are roundoff and count as zero amplitude
ZERO_AMP_REL = 1e-10


class NumericalConsistencyError(ArithmeticError):
    pass


@dataclass
class Spectrum:
    """Complex spectrum of a rank-4 real tensor, stored as separate re/im planes."""

    re: np.ndarray
    im: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


def _data(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 (B, C, H, W) array, got shape {arr.shape}")
    if arr.shape[2] < 1 or arr.shape[3] < 1:
        raise ValueError(f"fft2 needs h, w >= 1, got spatial size {arr.shape[2:]}")
    return arr


def _mirror(z: np.ndarray) -> np.ndarray:
    """z[..., (-u) mod h, (-v) mod w]."""
    return np.roll(np.flip(z, axis=(-2, -1)), 1, axis=(-2, -1))


def _real_fft2(x: np.ndarray) -> np.ndarray:
    """Spectrum of a real array with conjugate symmetry enforced bit-exactly."""
    z = np.fft.fft2(x.astype(np.float64), axes=(-2, -1))
    return 0.5 * (z + np.conj(_mirror(z)))


def fft2(x) -> Spectrum:
    """Forward transform over the last two axes, computed in float64."""
    return Spectrum.from_complex(_real_fft2(_data(x)))


def ifft2(s: Spectrum) -> np.ndarray:
    """Complex inverse transform (includes the 1/(H*W) factor)."""
    return np.fft.ifft2(s.complex, axes=(-2, -1))


def _zero_amp(z: np.ndarray) -> np.ndarray:
    a = np.abs(z)
    peak = a.max(axis=(-2, -1), keepdims=True) if a.size else a
    return a <= ZERO_AMP_REL * peak


def _phase(z: np.ndarray) -> np.ndarray:
    ph = np.angle(z)
    # np.angle gives -pi for (-x, -0.0); fold onto the closed upper end
    ph = np.where(ph <= -np.pi, np.pi, ph)
    return np.where(_zero_amp(z), 0.0, ph)


def amp_phase(s: Spectrum) -> tuple[Tensor, Tensor]:
    z = s.complex
    return Tensor(np.abs(z)), Tensor(_phase(z))


def _recombine_np(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    if amplitude.shape != phase.shape:
        raise ValueError(f"amplitude {amplitude.shape} and phase {phase.shape} must match")
    z = np.fft.ifft2(amplitude.astype(np.float64) * np.exp(1j * phase.astype(np.float64)), axes=(-2, -1))
    resid = float(np.max(np.abs(z.imag))) if z.size else 0.0
    if resid >= IMAG_RESIDUAL_TOL:
        raise NumericalConsistencyError(
            f"inverse transform has imaginary residual {resid:.3g} >= {IMAG_RESIDUAL_TOL}; "
            "amplitude/phase are not conjugate-symmetric"
        )
    return z.real


def recombine(amplitude, phase) -> Tensor:
    """Real part of ifft2(amplitude * exp(j*phase)); the imaginary residual is checked."""
    a = amplitude.data if isinstance(amplitude, Tensor) else np.asarray(amplitude)
    p = phase.data if isinstance(phase, Tensor) else np.asarray(phase)
    return Tensor(_recombine_np(a, p))


def phase_only_reconstruction(x, normalize: bool = True) -> Tensor:
    """Inverse transform of unit amplitude (DC zeroed) with the phase of ``x``.

    With ``normalize`` each (batch, channel) plane is min-max scaled to [0, 1];
    constant planes map to 0.
    """
    z = _real_fft2(_data(x))
    amp = np.ones(z.shape)
    amp[..., 0, 0] = 0.0
    out = _recombine_np(amp, _phase(z))
    if normalize:
        lo = out.min(axis=(-2, -1), keepdims=True)
        span = out.max(axis=(-2, -1), keepdims=True) - lo
        out = np.where(span > 0, (out - lo) / np.where(span > 0, span, 1.0), 0.0)
    return Tensor(out)


def phase_exchange(f: Tensor, h: Tensor) -> Tensor:
    """Feature with the amplitude spectrum of ``h`` and the phase spectrum of ``f``.

    Differentiable in both arguments. Bins where either amplitude is zero pass
    no gradient through the corresponding magnitude/phase.
    """
    if f.shape != h.shape:
        raise ValueError(f"phase_exchange needs identical shapes, got {f.shape} and {h.shape}")
    _data(h)
    n = h.shape[-1] * h.shape[-2]
    u = _real_fft2(f.data)
    v = _real_fft2(h.data)
    abs_u = np.where(_zero_amp(u), 0.0, np.abs(u))
    abs_v = np.abs(v)
    safe_u = np.where(abs_u > 0, abs_u, 1.0)
    safe_v = np.where(abs_v > 0, abs_v, 1.0)
    # unit phasor of f; exactly 1 (phase 0) where |U| = 0
    unit = np.where(abs_u > 0, u / safe_u, 1.0)
    out = _recombine_np(abs_v, _phase(u))

    def bw(g):
        gz = np.fft.fft2(g.astype(np.float64), axes=(-2, -1)) / n
        if h.requires_grad:
            g_amp = np.real(np.conj(gz) * unit)
            g_v = np.where(abs_v > 0, g_amp * v / safe_v, 0.0)
            _accumulate(h, np.real(np.fft.ifft2(g_v, axes=(-2, -1))) * n)
        if f.requires_grad:
            g_p = abs_v * gz
            g_u = np.where(abs_u > 0, 1j * unit * np.imag(np.conj(unit) * g_p) / safe_u, 0.0)
            _accumulate(f, np.real(np.fft.ifft2(g_u, axes=(-2, -1))) * n)

    return _make(out.astype(h.data.dtype), (f, h), bw)
