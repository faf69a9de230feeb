"""Feature capture over a sampling run and the two redundancy analyses.

Coarse: metrics between the same probe's features at adjacent sampling steps.
Fine: metrics between each decoder block's input and output at chosen steps.
Only the conditional branch of guided sampling is observed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, SamplerConfig, SRModel, euler_sample
from .metrics import metric_pair
from .pruning import FineEntry
from .unet import DECODER_SCALES, PROBES


class ProbeError(ValueError):
    pass


@dataclass
class FeatureTrace:
    """``features[probe]`` is (T, B, C, H, W); ``blocks[(j, k)]`` maps step -> (D_in, D_out)."""

    features: dict[str, np.ndarray]
    metadata: dict
    blocks: dict[tuple[int, int], dict[int, tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return next(iter(self.features.values())).shape[0] if self.features else 0


def _check_probes(probes) -> list[str]:
    probes = list(probes)
    bad = [p for p in probes if p not in PROBES]
    if bad:
        raise ProbeError(f"unknown probe(s) {bad}; valid probes are {list(PROBES)}")
    if len(set(probes)) != len(probes):
        raise ProbeError(f"duplicate probes in {probes}")
    return probes


def capture_trace(
    model: SRModel,
    cfg: SamplerConfig,
    lq: np.ndarray,
    probes,
    schedule: NoiseSchedule | None = None,
    block_steps=(),
) -> FeatureTrace:
    """Sample once from ``lq`` and keep the probed features of every step.

    ``block_steps`` optionally lists step indices at which every decoder
    block's (input, output) pair is stored as well.
    """
    probes = _check_probes(probes)
    if cfg.steps < 2:
        raise ValueError("a trace needs at least two sampling steps")
    block_steps = set(int(s) for s in block_steps)
    per_step: dict[str, list[np.ndarray]] = {p: [] for p in probes}
    blocks: dict[tuple[int, int], dict[int, tuple[np.ndarray, np.ndarray]]] = {}

    def probe_hook(step, name, h):
        if name in per_step:
            per_step[name].append(h.data.copy())

    def block_hook(step, j, k, a, o):
        if step in block_steps:
            blocks.setdefault((j, k), {})[step] = (a.data.copy(), o.data.copy())

    euler_sample(model, lq, cfg, schedule, probe_hook, block_hook if block_steps else None)
    features = {p: np.stack(v) for p, v in per_step.items()}
    meta = {
        "seed": int(cfg.seed),
        "steps": int(cfg.steps),
        "cfg_scale": float(cfg.cfg_scale),
        "topology_hash": model.topology.hash(),
        "probes": probes,
        "batch": int(lq.shape[0]),
    }
    return FeatureTrace(features, meta, blocks)


@dataclass
class CoarseSeries:
    phi: np.ndarray
    psi: np.ndarray

    def summary(self) -> dict:
        out = {}
        for name, v in (("phi", self.phi), ("psi", self.psi)):
            q1, med, q3 = np.percentile(v, [25, 50, 75])
            out[name] = {"min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3), "max": float(v.max())}
        return out


def coarse_profile(trace: FeatureTrace) -> dict[str, CoarseSeries]:
    """phi[t] = Phi(f[t+1], f[t]) and psi[t] = Psi(f[t+1], f[t]) per probe, length T-1."""
    out = {}
    for name, f in trace.features.items():
        if f.shape[0] < 2:
            raise ValueError(f"probe {name!r} has {f.shape[0]} steps; need at least 2")
        vals = [metric_pair(f[t + 1], f[t]) for t in range(f.shape[0] - 1)]
        out[name] = CoarseSeries(np.array([v.phi_cos for v in vals]), np.array([v.psi_kl for v in vals]))
    return out


def fine_profile(
    model: SRModel,
    lq: np.ndarray,
    cfg: SamplerConfig,
    probe_steps=None,
    schedule: NoiseSchedule | None = None,
) -> list[FineEntry]:
    """Per decoder block, the mean over ``probe_steps`` (default all) of Phi/Psi(D_in, D_out)."""
    steps = range(cfg.steps) if probe_steps is None else sorted(set(int(s) for s in probe_steps))
    if any(s < 0 or s >= cfg.steps for s in steps) or not steps:
        raise ValueError(f"probe steps must be a non-empty subset of 0..{cfg.steps - 1}")
    wanted = set(steps)
    acc: dict[tuple[int, int], list[tuple[float, float]]] = {}

    def block_hook(step, j, k, a, o):
        if step in wanted:
            v = metric_pair(a.data, o.data)
            acc.setdefault((j, k), []).append((v.phi_cos, v.psi_kl))

    euler_sample(model, lq, cfg, schedule, block_hook=block_hook)
    entries = []
    for j, n in enumerate(model.topology.decoder_blocks):
        for k in range(n):
            vals = np.array(acc[(j, k)], dtype=np.float64)
            entries.append(FineEntry(j, k, float(vals[:, 0].mean()), float(vals[:, 1].mean())))
    return entries


def fine_from_pairs(blocks: dict[tuple[int, int], dict[int, tuple[np.ndarray, np.ndarray]]]) -> list[FineEntry]:
    """Fine metrics recomputed from stored (D_in, D_out) pairs."""
    entries = []
    for (j, k) in sorted(blocks):
        vals = [metric_pair(a, o) for _, (a, o) in sorted(blocks[(j, k)].items())]
        entries.append(FineEntry(j, k, float(np.mean([v.phi_cos for v in vals])), float(np.mean([v.psi_kl for v in vals]))))
    return entries


@dataclass
class RedundancyReport:
    coarse: dict[str, CoarseSeries] = field(default_factory=dict)
    fine: list[FineEntry] = field(default_factory=list)
    topology_hash: str = ""
    decoder_origin: list[list[int]] | None = None

    def to_dict(self) -> dict:
        coarse = {
            name: {"phi": [float(x) for x in s.phi], "psi": [float(x) for x in s.psi], "summary": s.summary()}
            for name, s in self.coarse.items()
        }
        fine = []
        for e in self.fine:
            d = {"scale": e.scale, "group": e.group, "block_index": e.block_index, "phi": e.phi, "psi": e.psi}
            if self.decoder_origin is not None:
                d["origin_index"] = self.decoder_origin[e.group][e.block_index]
            fine.append(d)
        return {"topology_hash": self.topology_hash, "coarse": coarse, "fine": fine}

    @classmethod
    def from_dict(cls, d: dict) -> "RedundancyReport":
        coarse = {n: CoarseSeries(np.array(s["phi"]), np.array(s["psi"])) for n, s in d.get("coarse", {}).items()}
        fine = [FineEntry(int(e["group"]), int(e["block_index"]), float(e["phi"]), float(e["psi"])) for e in d.get("fine", [])]
        origin = None
        if fine and all("origin_index" in e for e in d["fine"]):
            origin = [[] for _ in DECODER_SCALES]
            for e in d["fine"]:
                origin[int(e["group"])].append(int(e["origin_index"]))
        return cls(coarse, fine, d.get("topology_hash", ""), origin)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()
