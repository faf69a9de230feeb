"""The staged desk pipeline, shared by the CLI and the acceptance tests.

pretrain -> coarse profile -> coarse prune (+ phase-exchange conditioning)
-> finetune -> fine profile -> fine prune -> finetune -> sample, with the
positional "unfine" baseline branched off the coarse-finetuned model.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import report as R
from .config import RunConfig
from .data import make_dataset, save_dataset, stack_pairs
from .diffusion import (
    SRModel,
    build_sr_model,
    euler_sample,
    staged_finetune,
    train,
    validation_mse,
    write_loss_csv,
)
from .peam import estimate_conditioner_flops
from .profiler import RedundancyReport, capture_trace, coarse_profile, fine_profile
from .pruning import apply_plan, compose_plans, plan_coarse, plan_fine, plan_unfine
from .serialization import save_checkpoint, save_trace
from .unet import count_params, estimate_flops

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    probe: tuple[np.ndarray, np.ndarray]


def _pairs(cfg: RunConfig):
    d = cfg.data
    n = d.n_pairs + d.n_val + cfg.profile.probe_batch
    pairs = make_dataset(n, d.image_size, cfg.seed, d.degradation(cfg.seed), cfg.topology.in_channels)
    a, b = d.n_pairs, d.n_pairs + d.n_val
    return pairs[:a], pairs[a:b], pairs[b:]


def make_splits(cfg: RunConfig) -> Splits:
    """Train, held-out and probe sets drawn from one seeded item stream."""
    return Splits(*(stack_pairs(p) for p in _pairs(cfg)))


def save_splits(cfg: RunConfig, out: Path) -> Splits:
    parts = _pairs(cfg)
    for name, p in zip(("train", "val", "probe"), parts):
        save_dataset(out / f"{name}.npz", p)
    return Splits(*(stack_pairs(p) for p in parts))


def model_stats(model: SRModel) -> dict:
    return {
        "params": count_params(model.unet),
        "flops": estimate_flops(model.topology),
        "conditioner_params": count_params(model.conditioner),
        "conditioner_flops": estimate_conditioner_flops(model.topology, model.conditioner.mode),
    }


def evaluate(model: SRModel, val: tuple[np.ndarray, np.ndarray], cfg: RunConfig) -> dict:
    hq, lq = val
    x = euler_sample(model, lq, cfg.sampler_config(cfg.seed + 1), cfg.schedule.build())
    img = model.decode(x, lq)
    return {"psnr": R.psnr(img, hq), "ssim": R.ssim(img, hq), "samples": img}


def finetune(model: SRModel, stage: str, splits: Splits, cfg: RunConfig, loss_csv=None) -> SRModel:
    t = cfg.training
    return staged_finetune(model, stage, splits.train, t.finetune_iters, t.lr, t.batch_size, cfg.seed,
                           cfg.schedule.build(), loss_csv, t.cond_dropout, t.weight_decay, t.grad_clip)


def pretrain(cfg: RunConfig, splits: Splits, loss_csv=None) -> SRModel:
    t = cfg.training
    model = build_sr_model(cfg.topology.build(), cfg.seed, target=cfg.training.target)
    losses = train(model, splits.train, t.pretrain_iters, t.pretrain_lr, t.batch_size, cfg.seed,
                   cfg.schedule.build(), t.cond_dropout, t.weight_decay, log_every=100, grad_clip=t.grad_clip)
    if loss_csv is not None:
        write_loss_csv(loss_csv, losses)
    return model


def run_pipeline(cfg: RunConfig, out, baseline: bool = True) -> dict:
    """Run every stage, writing artifacts under ``out``; returns the report document."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = round(now - clock, 3)
        clock = now
        log.info("stage %s done in %.1fs", name, timings[name])

    schedule = cfg.schedule.build()
    sampler = cfg.sampler_config()
    splits = save_splits(cfg, out)
    lap("gen-data")

    model = pretrain(cfg, splits, out / "loss_pretrain.csv")
    save_checkpoint(model, out / "model.ckpt")
    full = model_stats(model)
    lap("train")

    trace = capture_trace(model, sampler, splits.probe[1], cfg.profile.probes, schedule)
    save_trace(trace, out / "trace.pgpt")
    coarse_series = coarse_profile(trace)
    lap("profile")

    topo0 = model.topology
    p_coarse = plan_coarse(topo0)
    coarse = apply_plan(model, p_coarse)
    coarse.attach_peam(cfg.seed)
    val_mse_pruned = validation_mse(coarse, splits.val, cfg.seed, schedule)
    finetune(coarse, "coarse", splits, cfg, out / "loss_coarse.csv")
    val_mse_tuned = validation_mse(coarse, splits.val, cfg.seed, schedule)
    save_checkpoint(coarse, out / "coarse.ckpt")
    (out / "plan_coarse.json").write_text(p_coarse.to_json() + "\n")
    lap("coarse")

    probe_steps = cfg.profile.probe_steps or None
    fine_entries = fine_profile(coarse, splits.probe[1], sampler, probe_steps, schedule)
    fine_report = RedundancyReport(coarse_series, fine_entries, topo0.hash(), coarse.topology.decoder_origin)
    p_fine = plan_fine(fine_entries, cfg.pruning.thresholds(), fine_report.hash())
    (out / "plan_fine.json").write_text(p_fine.to_json() + "\n")
    lap("fine-profile")

    final = apply_plan(coarse, p_fine)
    finetune(final, "fine", splits, cfg, out / "loss_fine.csv")
    save_checkpoint(final, out / "final.ckpt")
    lap("fine")

    result = evaluate(final, splits.val, cfg)
    np.save(out / "samples_final.npy", result.pop("samples"))
    lap("sample")

    extra = {
        "pipeline": {
            "seed": cfg.seed,
            "final_topology_hash": final.topology.hash(),
            "coarse_topology_hash": coarse.topology.hash(),
            "encoder_blocks": final.topology.encoder_blocks,
            "bottleneck_blocks": final.topology.bottleneck_blocks,
            "decoder_blocks": final.topology.decoder_blocks,
            "val_mse_coarse_pruned": val_mse_pruned,
            "val_mse_coarse_finetuned": val_mse_tuned,
            "fine_removals": len(p_fine),
            "final": {**model_stats(final), **result},
            "unpruned": full,
            "lq_psnr": R.psnr(splits.val[1], splits.val[0]),
        }
    }
    if baseline:
        p_unfine = plan_unfine(coarse.topology, len(p_fine))
        (out / "plan_unfine.json").write_text(p_unfine.to_json() + "\n")
        unfine = apply_plan(coarse, p_unfine)
        finetune(unfine, "unfine", splits, cfg, out / "loss_unfine.csv")
        save_checkpoint(unfine, out / "unfine.ckpt")
        base = evaluate(unfine, splits.val, cfg)
        base.pop("samples")
        extra["pipeline"]["unfine"] = {**model_stats(unfine), **base,
                                       "removals": [r.to_dict() for r in p_unfine.removals]}
        lap("unfine-baseline")

    plan = compose_plans(topo0, p_coarse, p_fine)
    stats = {
        "params_before": full["params"],
        "params_after": count_params(final.unet),
        "flops_before": full["flops"],
        "flops_after": estimate_flops(final.topology),
    }
    doc = R.write_report(fine_report.to_dict(), plan.to_dict(), stats, out / "report.json", extra)
    R.write_boxplot_svg(out / "coarse_psi.svg", doc["coarse"], "psi")
    R.write_boxplot_svg(out / "coarse_phi.svg", doc["coarse"], "phi")
    lap("report")
    timings["total"] = round(sum(timings.values()), 3)
    (out / "meta.json").write_text(json.dumps({"timings_s": timings, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}, indent=2) + "\n")
    return doc
