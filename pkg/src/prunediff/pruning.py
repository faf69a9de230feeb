"""Block-removal plans: coarse (encoder/bottleneck to one block), fine (threshold rule), unfine (positional)."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from .unet import DECODER_SCALES, SCALES, UNet, UNetTopology

ENCODER = "encoder"
BOTTLENECK = "bottleneck"
DECODER = "decoder"
MODULES = (ENCODER, BOTTLENECK, DECODER)
STAGES = ("coarse", "fine", "unfine")
GEQ = "prune-if-geq"
LT = "prune-if-lt"
GUARD_NOTE = "retained: last-block guard"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    phi_min: float = 0.2
    psi_min: float = 1.0
    mode: str = GEQ

    def validate(self) -> None:
        if not 0.0 <= self.phi_min <= 2.0:
            raise PlanError(f"phi_min must lie in [0, 2], got {self.phi_min}")
        if self.psi_min < 0.0:
            raise PlanError(f"psi_min must be >= 0, got {self.psi_min}")
        if self.mode not in (GEQ, LT):
            raise PlanError(f"threshold mode must be {GEQ!r} or {LT!r}, got {self.mode!r}")

    def selects(self, phi: float, psi: float) -> bool:
        if self.mode == GEQ:
            return phi >= self.phi_min and psi >= self.psi_min
        return phi < self.phi_min and psi < self.psi_min


@dataclass(frozen=True)
class Removal:
    """One block removal; ``block_index`` is the position in the topology the plan targets."""

    module: str
    scale: int
    block_index: int
    stage: str
    trigger: tuple[float, float] | None = None

    def key(self) -> tuple[str, int, int]:
        return (self.module, self.scale, self.block_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trigger"] = None if self.trigger is None else {"phi": self.trigger[0], "psi": self.trigger[1]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Removal":
        trig = d.get("trigger")
        trig = None if trig is None else (float(trig["phi"]), float(trig["psi"]))
        return cls(d["module"], int(d["scale"]), int(d["block_index"]), d["stage"], trig)


@dataclass
class PruningPlan:
    removals: list[Removal] = field(default_factory=list)
    stage: str = "coarse"
    source_report_hash: str | None = None
    thresholds: Thresholds | None = None
    retained: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.removals)

    def keys(self) -> set[tuple[str, int, int]]:
        return {r.key() for r in self.removals}

    def validate(self, topology: UNetTopology) -> None:
        """Raise :class:`PlanError` unless the plan can be applied to ``topology``."""
        seen = set()
        counts = _group_sizes(topology)
        removed = {g: 0 for g in counts}
        for r in self.removals:
            if r.module not in MODULES or r.stage not in STAGES:
                raise PlanError(f"bad removal {r}")
            if r.key() in seen:
                raise PlanError(f"duplicate removal {r.key()}")
            seen.add(r.key())
            group = (r.module, r.scale)
            if group not in counts:
                raise PlanError(f"no {r.module} group at scale {r.scale}")
            if not 0 <= r.block_index < counts[group]:
                raise PlanError(f"{r.module}@s{r.scale} has {counts[group]} blocks, index {r.block_index} is out of range")
            if r.stage == "fine" and r.trigger is None:
                raise PlanError(f"fine removal {r.key()} lacks trigger values")
            if r.stage == "coarse" and r.trigger is not None:
                raise PlanError(f"coarse removal {r.key()} must not carry trigger values")
            removed[group] += 1
        for group, n in counts.items():
            if n - removed[group] < 1:
                raise PlanError(f"plan removes every block of {group[0]}@s{group[1]}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "source_report_hash": self.source_report_hash,
            "thresholds": None if self.thresholds is None else asdict(self.thresholds),
            "removals": [r.to_dict() for r in self.removals],
            "retained": list(self.retained),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        th = d.get("thresholds")
        return cls(
            removals=[Removal.from_dict(r) for r in d["removals"]],
            stage=d["stage"],
            source_report_hash=d.get("source_report_hash"),
            thresholds=None if th is None else Thresholds(**th),
            retained=list(d.get("retained", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        return cls.from_dict(json.loads(text))


def _group_sizes(tp: UNetTopology) -> dict[tuple[str, int], int]:
    sizes = {(ENCODER, s): len(g) for s, g in zip(SCALES, tp.encoder)}
    sizes[(BOTTLENECK, 4)] = len(tp.bottleneck)
    sizes.update({(DECODER, s): len(g) for s, g in zip(DECODER_SCALES, tp.decoder)})
    return sizes


# ---------------------------------------------------------------------------
# planners


def plan_coarse(topology: UNetTopology) -> PruningPlan:
    """Keep the first block of every encoder scale and of the bottleneck."""
    removals = []
    for s, group in zip(SCALES, topology.encoder):
        removals += [Removal(ENCODER, s, k, "coarse") for k in range(1, len(group))]
    removals += [Removal(BOTTLENECK, 4, k, "coarse") for k in range(1, len(topology.bottleneck))]
    return PruningPlan(removals, stage="coarse")


@dataclass(frozen=True)
class FineEntry:
    """Aggregated metric pair of one decoder block (``group`` 0, 1, 2 = scales 4, 2, 1)."""

    group: int
    block_index: int
    phi: float
    psi: float

    @property
    def scale(self) -> int:
        return DECODER_SCALES[self.group]


def plan_fine(entries, thresholds: Thresholds = Thresholds(), source_report_hash: str | None = None) -> PruningPlan:
    """Threshold rule on decoder blocks, walking them in execution order.

    ``entries`` must cover every decoder block exactly once. A block that
    satisfies the rule but is the only one left at its scale is kept and
    recorded under ``retained``.
    """
    thresholds.validate()
    entries = sorted(entries, key=lambda e: (e.group, e.block_index))
    sizes = [0, 0, 0]
    for e in entries:
        sizes[e.group] += 1
    for g, n in enumerate(sizes):
        idx = [e.block_index for e in entries if e.group == g]
        if idx != list(range(n)) or n < 1:
            raise PlanError(f"fine report must cover decoder scale {DECODER_SCALES[g]} blocks 0..n-1 exactly once, got {idx}")
    removals, retained = [], []
    left = list(sizes)
    for e in entries:
        if not thresholds.selects(e.phi, e.psi):
            continue
        if left[e.group] == 1:
            retained.append({"module": DECODER, "scale": e.scale, "block_index": e.block_index,
                             "phi": e.phi, "psi": e.psi, "note": GUARD_NOTE})
            continue
        left[e.group] -= 1
        removals.append(Removal(DECODER, e.scale, e.block_index, "fine", (float(e.phi), float(e.psi))))
    return PruningPlan(removals, stage="fine", source_report_hash=source_report_hash,
                       thresholds=thresholds, retained=retained)


def plan_unfine(topology: UNetTopology, k: int) -> PruningPlan:
    """Remove the last ``k`` decoder blocks in execution order, never emptying a scale."""
    total = sum(topology.decoder_blocks)
    if k < 0:
        raise PlanError(f"k must be >= 0, got {k}")
    if k >= total:
        raise PlanError(f"k={k} must be smaller than the number of decoder blocks ({total})")
    positions = [(g, b) for g, group in enumerate(topology.decoder) for b in range(len(group))]
    left = list(topology.decoder_blocks)
    removals = []
    for g, b in reversed(positions):
        if len(removals) == k:
            break
        if left[g] == 1:
            continue
        left[g] -= 1
        removals.append(Removal(DECODER, DECODER_SCALES[g], b, "unfine"))
    if len(removals) < k:
        raise PlanError(f"cannot remove {k} decoder blocks without emptying a scale (at most {len(removals)})")
    return PruningPlan(removals, stage="unfine")


# ---------------------------------------------------------------------------
# application


def pruned_topology(topology: UNetTopology, plan: PruningPlan) -> UNetTopology:
    plan.validate(topology)
    drop = plan.keys()
    tp = topology.copy()

    def keep(module, scale, kinds, origin):
        idx = [k for k in range(len(kinds)) if (module, scale, k) not in drop]
        return [kinds[k] for k in idx], [origin[k] for k in idx]

    for i, s in enumerate(SCALES):
        tp.encoder[i], tp.encoder_origin[i] = keep(ENCODER, s, topology.encoder[i], topology.encoder_origin[i])
    tp.bottleneck, tp.bottleneck_origin = keep(BOTTLENECK, 4, topology.bottleneck, topology.bottleneck_origin)
    for j, s in enumerate(DECODER_SCALES):
        tp.decoder[j], tp.decoder_origin[j] = keep(DECODER, s, topology.decoder[j], topology.decoder_origin[j])
    tp.validate()
    return tp


def _prune_unet(unet: UNet, plan: PruningPlan) -> UNet:
    tp = pruned_topology(unet.topology, plan)
    drop = plan.keys()
    out = copy.deepcopy(unet)
    out.topology = tp
    out.enc_blocks = [[b for k, b in enumerate(g) if (ENCODER, s, k) not in drop] for s, g in zip(SCALES, out.enc_blocks)]
    out.mid_blocks = [b for k, b in enumerate(out.mid_blocks) if (BOTTLENECK, 4, k) not in drop]
    out.dec_blocks = [[b for k, b in enumerate(g) if (DECODER, s, k) not in drop] for s, g in zip(DECODER_SCALES, out.dec_blocks)]
    return out


def apply_plan(model, plan: PruningPlan):
    """Return a pruned copy of a ``UNet`` or ``SRModel``; surviving blocks keep their weights."""
    if isinstance(model, UNet):
        return _prune_unet(model, plan)
    if hasattr(model, "unet") and hasattr(model, "conditioner"):
        out = copy.copy(model)
        out.unet = _prune_unet(model.unet, plan)
        out.conditioner = copy.deepcopy(model.conditioner)
        return out
    raise TypeError(f"cannot prune object of type {type(model).__name__}")


def remap_plan(plan: PruningPlan, before: UNetTopology, first: PruningPlan) -> PruningPlan:
    """Re-express ``plan`` (indices valid after ``first``) in the indices of ``before``."""
    drop = first.keys()
    sizes = _group_sizes(before)
    survivors = {g: [k for k in range(n) if (g[0], g[1], k) not in drop] for g, n in sizes.items()}
    removals = []
    for r in plan.removals:
        alive = survivors.get((r.module, r.scale))
        if alive is None or not 0 <= r.block_index < len(alive):
            raise PlanError(f"removal {r.key()} does not exist after the first plan")
        removals.append(Removal(r.module, r.scale, alive[r.block_index], r.stage, r.trigger))
    return PruningPlan(removals, plan.stage, plan.source_report_hash, plan.thresholds, list(plan.retained))


def compose_plans(before: UNetTopology, first: PruningPlan, second: PruningPlan) -> PruningPlan:
    """Union of ``first`` and ``second`` (given in post-``first`` indices), in ``before`` indices."""
    second = remap_plan(second, before, first)
    merged = PruningPlan(first.removals + second.removals, stage=second.stage,
                         source_report_hash=second.source_report_hash, thresholds=second.thresholds,
                         retained=first.retained + second.retained)
    merged.validate(before)
    return merged
