"""``prunediff`` command line.

Every subcommand reads an optional ``--config`` TOML file and writes under
``--out``. Failures print one JSON line ``{"error": ..., "message": ...}`` to
stderr and exit 1; argument errors print usage and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import report as R

log = logging.getLogger("prunediff")


class CLIError(Exception):
    pass


def _dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _splits(args, cfg):
    from .data import load_dataset
    from .pipeline import make_splits

    if getattr(args, "data", None):
        d = Path(args.data)
        parts = [load_dataset(d / f"{n}.npz") if (d / f"{n}.npz").exists() else None for n in ("train", "val", "probe")]
        if any(p is None for p in parts):
            raise CLIError(f"{d} must contain train.npz, val.npz and probe.npz (see gen-data)")
        from .pipeline import Splits

        return Splits(*parts)
    return make_splits(cfg)


def cmd_gen_data(args, cfg):
    from .pipeline import save_splits

    out = _dir(args.out)
    s = save_splits(cfg, out)
    if args.png:
        png = _dir(out / "png")
        for i, (h, l) in enumerate(zip(*s.train)):
            R.write_png(png / f"{i:03d}_hq.png", h)
            R.write_png(png / f"{i:03d}_lq.png", l)
    print(f"wrote {s.train[0].shape[0]} train, {s.val[0].shape[0]} val, {s.probe[0].shape[0]} probe pairs to {out}")


def cmd_train(args, cfg):
    from .pipeline import pretrain
    from .serialization import save_checkpoint

    out = _dir(args.out)
    model = pretrain(cfg, _splits(args, cfg), out / "loss_pretrain.csv")
    save_checkpoint(model, out / "model.ckpt")
    print(f"wrote {out / 'model.ckpt'}")


def cmd_profile(args, cfg):
    from .pipeline import model_stats
    from .profiler import RedundancyReport, capture_trace, coarse_profile, fine_profile
    from .serialization import load_checkpoint, save_trace

    out = _dir(args.out)
    model = load_checkpoint(args.checkpoint)
    lq = _splits(args, cfg).probe[1]
    sampler = cfg.sampler_config()
    schedule = cfg.schedule.build()
    rep = RedundancyReport(topology_hash=model.topology.hash(), decoder_origin=model.topology.decoder_origin)
    if args.stage in ("coarse", "both"):
        trace = capture_trace(model, sampler, lq, cfg.profile.probes, schedule)
        save_trace(trace, out / "trace.pgpt")
        rep.coarse = coarse_profile(trace)
    if args.stage in ("fine", "both"):
        rep.fine = fine_profile(model, lq, sampler, cfg.profile.probe_steps or None, schedule)
    st = model_stats(model)
    stats = {"params_before": st["params"], "params_after": st["params"], "flops_before": st["flops"], "flops_after": st["flops"]}
    R.write_report(rep.to_dict(), None, stats, out / "report.json", {"report_hash": rep.hash()})
    if rep.coarse:
        R.write_boxplot_svg(out / "coarse_psi.svg", rep.to_dict()["coarse"], "psi")
    print(f"wrote {out / 'report.json'}")


def _fine_entries(report_path, model):
    from .profiler import RedundancyReport

    doc = json.loads(Path(report_path).read_text())
    rep = RedundancyReport.from_dict(doc)
    if not rep.fine:
        raise CLIError(f"{report_path} has no fine section; run `profile --stage fine` first")
    if rep.topology_hash != model.topology.hash():
        raise CLIError("report was produced for a different topology than the checkpoint")
    return rep.fine, doc.get("report_hash", rep.hash())


def cmd_prune(args, cfg):
    from .pruning import apply_plan, plan_coarse, plan_fine, plan_unfine
    from .serialization import load_checkpoint, save_checkpoint

    model = load_checkpoint(args.checkpoint)
    if args.stage == "coarse":
        plan = plan_coarse(model.topology)
    elif args.stage == "fine":
        if not args.report:
            raise CLIError("--report is required for the fine stage")
        entries, rhash = _fine_entries(args.report, model)
        plan = plan_fine(entries, cfg.pruning.thresholds(), rhash)
    else:
        if args.k is None:
            raise CLIError("--k is required for the unfine stage")
        plan = plan_unfine(model.topology, args.k)
    pruned = apply_plan(model, plan)
    if args.stage == "coarse" and not args.no_peam and pruned.conditioner.mode != "peam":
        pruned.attach_peam(cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pruned, out)
    (out.parent / "plan.json").write_text(plan.to_json() + "\n")
    print(R.format_plan_table(plan.to_dict()))


def cmd_finetune(args, cfg):
    from .pipeline import finetune
    from .serialization import load_checkpoint, save_checkpoint

    out = _dir(args.out)
    model = load_checkpoint(args.checkpoint)
    finetune(model, args.stage, _splits(args, cfg), cfg, out / f"loss_{args.stage}.csv")
    save_checkpoint(model, out / "model.ckpt")
    print(f"wrote {out / 'model.ckpt'}")


def cmd_sample(args, cfg):
    from .diffusion import euler_sample
    from .serialization import load_checkpoint

    out = _dir(args.out)
    model = load_checkpoint(args.checkpoint)
    if args.input:
        lq = np.stack([R.read_png(p) for p in args.input])
    else:
        lq = _splits(args, cfg).val[1]
    img = model.decode(euler_sample(model, lq, cfg.sampler_config(), cfg.schedule.build()), lq)
    np.save(out / "samples.npy", img)
    for i, im in enumerate(img):
        R.write_png(out / f"sample_{i:03d}.png", im)
    print(f"wrote {len(img)} samples to {out}")


def cmd_por(args, cfg):
    from .spectral import phase_only_reconstruction

    img = R.read_png(args.input)
    R.write_png(args.out, phase_only_reconstruction(img[None]).data[0])
    print(f"wrote {args.out}")


def cmd_eval(args, cfg):
    from .diffusion import validation_mse
    from .pipeline import evaluate, model_stats
    from .serialization import load_checkpoint

    out = _dir(args.out)
    model = load_checkpoint(args.checkpoint)
    val = _splits(args, cfg).val
    res = evaluate(model, val, cfg)
    res.pop("samples")
    res["val_mse"] = validation_mse(model, val, cfg.seed, cfg.schedule.build())
    res.update(model_stats(model))
    (out / "eval.json").write_text(R.dump_json(res))
    print(json.dumps(res, sort_keys=True))


def cmd_report(args, cfg):
    if args.emit_default_config:
        text = C.RunConfig().to_toml()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return
    from .pruning import PruningPlan, compose_plans
    from .serialization import load_checkpoint
    from .unet import count_params, estimate_flops

    if not (args.before and args.after and args.out):
        raise CLIError("report needs --before, --after and --out (or --emit-default-config)")
    before, after = load_checkpoint(args.before), load_checkpoint(args.after)
    plan = None
    if args.plan:
        plans = [PruningPlan.from_json(Path(p).read_text()) for p in args.plan]
        plan = plans[0]
        topo = before.topology
        for nxt in plans[1:]:
            plan = compose_plans(topo, plan, nxt)
        plan = plan.to_dict()
    profile = json.loads(Path(args.profile).read_text()) if args.profile else None
    stats = {
        "params_before": count_params(before.unet),
        "params_after": count_params(after.unet),
        "flops_before": estimate_flops(before.topology),
        "flops_after": estimate_flops(after.topology),
    }
    out = _dir(args.out)
    doc = R.write_report(profile, plan, stats, out / "report.json")
    R.validate_report(doc)
    print(f"wrote {out / 'report.json'}")


def cmd_pipeline(args, cfg):
    from .pipeline import run_pipeline

    doc = run_pipeline(cfg, args.out, baseline=not args.no_baseline)
    print(json.dumps({"reduction": doc["reduction"], "psnr": doc["pipeline"]["final"]["psnr"]}, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunediff", description="Redundancy profiling, progressive pruning and phase-guided SR on a toy diffusion UNet.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML run configuration")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate seeded train/val/probe HQ-LQ pairs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--png", action="store_true", help="also export train pairs as PNG")

    sp = add("train", cmd_train, "train the unpruned model from scratch")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)

    sp = add("profile", cmd_profile, "coarse and/or fine redundancy profiling")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--stage", choices=("coarse", "fine", "both"), default="both")
    sp.add_argument("--out", required=True)

    sp = add("prune", cmd_prune, "build and apply a pruning plan")
    sp.add_argument("--stage", choices=("coarse", "fine", "unfine"), required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--report")
    sp.add_argument("--k", type=int, help="number of decoder blocks for the unfine stage")
    sp.add_argument("--no-peam", action="store_true", help="keep additive conditioning after the coarse stage")
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "fine-tune a pruned checkpoint")
    sp.add_argument("--stage", choices=("coarse", "fine", "unfine"), required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, "Euler sampling with classifier-free guidance")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--in", dest="input", nargs="+", help="LQ PNG files (instead of the val split)")
    sp.add_argument("--out", required=True)

    sp = add("por", cmd_por, "phase-only reconstruction of a PNG")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "PSNR/SSIM/validation MSE on the held-out split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "assemble report.json or emit the default config")
    sp.add_argument("--emit-default-config", action="store_true")
    sp.add_argument("--profile", help="report.json from `profile`")
    sp.add_argument("--plan", nargs="+", help="plan.json files in application order")
    sp.add_argument("--before")
    sp.add_argument("--after")
    sp.add_argument("--out")

    sp = add("pipeline", cmd_pipeline, "run every stage end to end")
    sp.add_argument("--no-baseline", action="store_true", help="skip the unfine baseline branch")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = C.load(args.config)
        args.fn(args, cfg)
    except (CLIError, C.ConfigError, OSError, ValueError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
