"""Noise schedule, conditional SR denoiser, AdamW training and the Euler sampler."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .peam import ADD, PEAM, Adapter, Conditioner, adapter_channels
from .tensor import Tensor
from .unet import UNet, UNetTopology, build_model

log = logging.getLogger(__name__)

# what the UNet diffuses: the HQ-minus-LQ residual, or the HQ image itself
RESIDUAL, IMAGE = "residual", "image"
TARGETS = (RESIDUAL, IMAGE)


class NoiseSchedule:
    """Cosine cumulative-signal schedule over ``t in [0, T_train]``."""

    def __init__(self, T_train: int = 1000, s: float = 0.008):
        self.T_train = T_train
        self.s = s

    def _f(self, t):
        return np.cos((np.asarray(t, dtype=np.float64) / self.T_train + self.s) / (1 + self.s) * np.pi / 2) ** 2

    def alpha_bar(self, t):
        return np.clip(self._f(t) / self._f(0.0), 0.0, 1.0)

    def sigma(self, t):
        ab = self.alpha_bar(t)
        return np.sqrt((1.0 - ab) / ab)

    def check(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T_train):
            raise ValueError(f"timestep out of range [0, {self.T_train}]: {t}")


def noising(x0, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar)*x0 + sqrt(1-abar)*noise; ``t`` scalar or one value per sample."""
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 {x0.shape} and noise {noise.shape} must match")
    schedule.check(t)
    ab = schedule.alpha_bar(t)
    ab = np.reshape(ab, (-1,) + (1,) * (x0.ndim - 1)) if np.ndim(ab) else ab
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(np.float32)


@dataclass
class SamplerConfig:
    steps: int = 20
    cfg_scale: float = 5.0
    seed: int = 0
    clip_x0: bool = True

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


class SRModel:
    """Denoising UNet plus its LQ conditioner; the unit that is trained, pruned and checkpointed."""

    def __init__(self, unet: UNet, conditioner: Conditioner, target: str = RESIDUAL):
        if target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
        self.unet = unet
        self.conditioner = conditioner
        self.target = target

    @property
    def x0_bound(self) -> float:
        """Clean-sample range [-b, b] in model space."""
        return 2.0 if self.target == RESIDUAL else 1.0

    def encode(self, hq: np.ndarray, lq: np.ndarray) -> np.ndarray:
        """Map an HQ image in [0, 1] to the diffused clean sample."""
        if self.target == RESIDUAL:
            return (hq - lq) * 2.0
        return hq * 2.0 - 1.0

    def decode(self, x0: np.ndarray, lq: np.ndarray) -> np.ndarray:
        """Inverse of ``encode``, clipped to [0, 1]."""
        img = lq + x0 * 0.5 if self.target == RESIDUAL else (x0 + 1.0) * 0.5
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    @property
    def topology(self) -> UNetTopology:
        return self.unet.topology

    def eps(self, z: Tensor, t, lq: Tensor, keep=None, record=None, record_block=None) -> Tensor:
        feats = self.conditioner.features(lq, keep)
        return self.unet(z, t, self.conditioner.injector(feats, keep), record, record_block)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.unet.named_params(prefix + "unet.")
        yield from self.conditioner.named_params(prefix + "cond.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def attach_peam(self, seed: int) -> None:
        """Switch conditioning to the phase-exchange path with freshly initialised fusion nets."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EA]))
        peam = PEAM(adapter_channels(self.topology), rng)
        self.conditioner = Conditioner(self.conditioner.adapter, peam, mode="peam")


def build_sr_model(topology: UNetTopology, seed: int, mode: str = ADD, target: str = RESIDUAL) -> SRModel:
    unet = build_model(topology, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA]))
    adapter = Adapter(topology.in_channels, adapter_channels(topology), rng)
    model = SRModel(unet, Conditioner(adapter), target)
    if mode != ADD:
        model.attach_peam(seed)
    return model


# ---------------------------------------------------------------------------
# optimisation


class AdamW:
    """AdamW with decoupled weight decay (defaults as in the common reference implementation)."""

    def __init__(self, params: list[Tensor], lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None or lr == 0.0:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            den = np.sqrt(v * (1.0 / c2))
            den += self.eps
            upd = m * (lr / c1)
            upd /= den
            p.data *= np.float32(1.0 - lr * self.wd)
            p.data -= upd.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


class NaNLossError(FloatingPointError):
    pass


def train_step(
    model: SRModel,
    batch: tuple[np.ndarray, np.ndarray],
    opt: AdamW,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    lr: float | None = None,
    cond_dropout: float = 0.1,
    grad_clip: float = 1.0,
) -> float:
    """One epsilon-prediction MSE step; ``batch`` is (lq, hq) in [0, 1]."""
    lq, hq = batch
    if lq.shape != hq.shape:
        raise ValueError(f"lq {lq.shape} and hq {hq.shape} must match")
    b = hq.shape[0]
    x0 = model.encode(hq, lq)
    t = rng.integers(0, schedule.T_train, size=b)
    noise = rng.standard_normal(hq.shape)
    keep = (rng.random(b) >= cond_dropout).astype(np.float32)
    z = Tensor(noising(x0, t, noise, schedule))
    target = Tensor(noise)
    lq_t = Tensor(lq * 2.0 - 1.0)
    opt.zero_grad()
    with T.Tape() as tape:
        pred = model.eps(z, t.astype(np.float64), lq_t, keep)
        loss = T.mse(pred, target)
    value = loss.item()
    if not math.isfinite(value):
        raise NaNLossError(f"non-finite loss {value} at optimizer step {opt.t + 1}")
    tape.backward(loss)
    if grad_clip:
        clip_grad_norm(opt.params, grad_clip)
    opt.step(lr)
    return value


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for g in grads:
            g *= scale
    return norm


def train(
    model: SRModel,
    data: tuple[np.ndarray, np.ndarray],
    iters: int,
    lr: float,
    batch_size: int,
    seed: int,
    schedule: NoiseSchedule | None = None,
    cond_dropout: float = 0.1,
    weight_decay: float = 0.01,
    log_every: int = 0,
    grad_clip: float = 1.0,
) -> list[float]:
    """Run ``iters`` AdamW steps with cosine-annealed lr; returns the loss curve.

    ``data`` is (hq, lq) stacked arrays. Batches are drawn from a seeded
    permutation, so the trajectory depends only on (model, data, seed).
    """
    schedule = schedule or NoiseSchedule()
    hq, lq = data
    n = hq.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    order = rng.permutation(n)
    cursor = 0
    for it in range(iters):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        step_lr = cosine_lr(lr, it, iters)
        losses.append(train_step(model, (lq[idx], hq[idx]), opt, rng, schedule, step_lr, cond_dropout, grad_clip))
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d/%d loss %.5f lr %.2e", it + 1, iters, float(np.mean(losses[-log_every:])), step_lr)
    return losses


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


_STAGE_STREAM = {"coarse": 1, "fine": 2, "unfine": 2}


def staged_finetune(
    model: SRModel,
    stage: str,
    data: tuple[np.ndarray, np.ndarray],
    iters: int,
    lr: float,
    batch_size: int,
    seed: int,
    schedule: NoiseSchedule | None = None,
    loss_csv=None,
    cond_dropout: float = 0.1,
    weight_decay: float = 0.01,
    grad_clip: float = 1.0,
) -> SRModel:
    """Fine-tune all surviving UNet parameters plus the conditioner after a pruning stage.

    The fine and unfine stages share one batch/noise stream so the two are
    compared under identical data order.
    """
    if stage not in _STAGE_STREAM:
        raise ValueError(f"unknown stage {stage!r}")
    stage_seed = int(np.random.SeedSequence([seed, _STAGE_STREAM[stage]]).generate_state(1)[0])
    losses = train(model, data, iters, lr, batch_size, stage_seed, schedule, cond_dropout, weight_decay,
                   grad_clip=grad_clip)
    if loss_csv is not None:
        write_loss_csv(loss_csv, losses)
    return model


# ---------------------------------------------------------------------------
# sampling


def sampling_timesteps(steps: int, T_train: int) -> np.ndarray:
    """``steps`` uniformly spaced indices from T_train-1 down to (but excluding) 0."""
    return np.linspace(T_train - 1, 0, steps + 1)[:-1]


ProbeHook = Callable[[int, str, Tensor], None]
BlockHook = Callable[[int, int, int, Tensor, Tensor], None]


def euler_sample(
    model: SRModel,
    lq: np.ndarray,
    cfg: SamplerConfig,
    schedule: NoiseSchedule | None = None,
    probe_hook: ProbeHook | None = None,
    block_hook: BlockHook | None = None,
) -> np.ndarray:
    """Deterministic Euler ODE sampler in sigma space with classifier-free guidance.

    Returns the x0 estimate in model space; ``model.decode`` maps it to an
    image. With ``cfg.clip_x0`` the clean estimate implied by each guided
    epsilon is clamped to [-b, b] (``model.x0_bound``) before the step. Hooks only see the conditional branch (or the
    single branch when one evaluation suffices).
    """
    cfg.validate()
    schedule = schedule or NoiseSchedule()
    lq = np.asarray(lq, dtype=np.float32)
    b = lq.shape[0]
    tp = model.topology
    shape = (b, tp.out_channels) + tuple(tp.latent_size)
    rng = np.random.default_rng(cfg.seed)
    ts = sampling_timesteps(cfg.steps, schedule.T_train)
    sigmas = np.append(schedule.sigma(ts), 0.0)
    x = rng.standard_normal(shape) * sigmas[0]
    lq_t = Tensor(lq * 2.0 - 1.0)
    null = np.zeros(b, dtype=np.float32)
    s = cfg.cfg_scale
    bound = model.x0_bound
    for i, t in enumerate(ts):
        z = Tensor(x / math.sqrt(1.0 + sigmas[i] ** 2))
        rec = (lambda name, h, _i=i: probe_hook(_i, name, h)) if probe_hook else None
        recb = (lambda j, k, a, o, _i=i: block_hook(_i, j, k, a, o)) if block_hook else None
        if s == 1.0:
            eps = model.eps(z, t, lq_t, None, rec, recb).data
        elif s == 0.0:
            eps = model.eps(z, t, lq_t, null, rec, recb).data
        else:
            e_c = model.eps(z, t, lq_t, None, rec, recb).data
            e_u = model.eps(z, t, lq_t, null).data
            eps = e_u + s * (e_c - e_u)
        eps = eps.astype(np.float64)
        if cfg.clip_x0:
            # keep the implied clean estimate inside the data range
            x0 = np.clip(x - sigmas[i] * eps, -bound, bound)
            eps = (x - x0) / sigmas[i]
        x = x + (sigmas[i + 1] - sigmas[i]) * eps
    return x.astype(np.float32)


def validation_mse(model: SRModel, data: tuple[np.ndarray, np.ndarray], seed: int, schedule: NoiseSchedule | None = None, batch_size: int = 16) -> float:
    """Mean epsilon-prediction MSE on a fixed seeded set of (t, noise) draws."""
    schedule = schedule or NoiseSchedule()
    hq, lq = data
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    t = rng.integers(0, schedule.T_train, size=hq.shape[0])
    noise = rng.standard_normal(hq.shape)
    total = 0.0
    for lo in range(0, hq.shape[0], batch_size):
        sl = slice(lo, lo + batch_size)
        z = Tensor(noising(model.encode(hq[sl], lq[sl]), t[sl], noise[sl], schedule))
        pred = model.eps(z, t[sl].astype(np.float64), Tensor(lq[sl] * 2.0 - 1.0)).data.astype(np.float64)
        total += float(((pred - noise[sl]) ** 2).sum())
    return total / noise.size
