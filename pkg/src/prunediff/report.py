"""Fidelity metrics, PNG I/O and the JSON/CSV/SVG report writers."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .tensor import Tensor

SCHEMA_VERSION = 1
PSNR_INF = float("inf")
SCALE_NOTE = (
    "Desk-scale toy model. The full-scale reductions reported for the large "
    "SR backbone (FLOPs 2993 G -> 1555 G, parameters 2567 M -> 984.5 M) are not "
    "reproduced here; only the relative structure of the procedure is."
)


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical inputs give +inf."""
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise ValueError(f"psnr inputs must have identical shapes, got {x.shape} and {y.shape}")
    mse = float(((x - y) ** 2).mean())
    return PSNR_INF if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b, sigma: float = 1.5) -> float:
    """Mean single-scale SSIM over (B, C) planes with a Gaussian window, data range 1."""
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim inputs must have identical shapes, got {x.shape} and {y.shape}")
    c1, c2 = 0.01**2, 0.03**2
    sig = (0,) * (x.ndim - 2) + (sigma, sigma)
    blur = lambda z: gaussian_filter(z, sig, mode="reflect", truncate=3.5)
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# PNG


def read_png(path) -> np.ndarray:
    """(C, H, W) float32 in [0, 1]; grayscale gives C=1, alpha is dropped."""
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "I", "I;16", "1", "LA") else im.convert("RGB")
        a = np.asarray(im, dtype=np.float32) / 255.0
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1)


def write_png(path, img) -> None:
    """Write a (C, H, W) or (H, W) array in [0, 1] as 8-bit grayscale or RGB."""
    a = np.clip(_arr(img), 0.0, 1.0)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# reports


def reduction(before: float, after: float) -> float:
    return 0.0 if before == after else 1.0 - after / before


def build_report(profile: dict | None, plan: dict | None, stats: dict, extra: dict | None = None) -> dict:
    """Assemble the report document.

    ``stats`` holds params_before/after and flops_before/after (ints);
    ``profile`` is a redundancy report dict (or None).
    """
    profile = profile or {"topology_hash": "", "coarse": {}, "fine": []}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "topology_hash": profile.get("topology_hash", ""),
        "coarse": profile.get("coarse", {}),
        "fine": profile.get("fine", []),
        "plan": plan,
        "stats": {k: int(stats[k]) for k in ("params_before", "params_after", "flops_before", "flops_after")},
        "reduction": {
            "params": reduction(stats["params_before"], stats["params_after"]),
            "flops": reduction(stats["flops_before"], stats["flops_after"]),
        },
        "notes": [SCALE_NOTE],
    }
    if extra:
        doc.update(extra)
    return doc


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_report(profile: dict | None, plan: dict | None, stats: dict, path, extra: dict | None = None) -> dict:
    """Write report.json (plus CSV companions in the same directory); returns the document."""
    path = Path(path)
    doc = build_report(profile, plan, stats, extra)
    path.write_text(dump_json(doc))
    write_coarse_csv(path.parent / "coarse_series.csv", doc["coarse"])
    write_fine_csv(path.parent / "fine_blocks.csv", doc["fine"])
    return doc


def write_coarse_csv(path, coarse: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "t", "phi_cos", "psi_kl"])
        for name in sorted(coarse):
            for t, (p, q) in enumerate(zip(coarse[name]["phi"], coarse[name]["psi"])):
                w.writerow([name, t, repr(float(p)), repr(float(q))])


def write_fine_csv(path, fine: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "block_index", "origin_index", "phi_cos", "psi_kl"])
        for e in fine:
            w.writerow([e["scale"], e["block_index"], e.get("origin_index", ""), repr(float(e["phi"])), repr(float(e["psi"]))])


def load_schema() -> dict:
    return json.loads(resources.files("prunediff").joinpath("report.schema.json").read_text())


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, load_schema())


def write_boxplot_svg(path, coarse: dict, metric: str = "psi") -> bool:
    """Box plots of one coarse metric per probe; returns False if matplotlib is missing."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    names = list(coarse)
    fig, ax = plt.subplots(figsize=(1.2 * max(len(names), 2) + 1, 3))
    ax.boxplot([coarse[n][metric] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel({"psi": "KL divergence", "phi": "cosine dissimilarity"}[metric])
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def format_plan_table(plan: dict) -> str:
    rows = [f"{'stage':<7} {'module':<11} {'scale':>5} {'block':>5} {'phi':>9} {'psi':>9}"]
    for r in plan["removals"]:
        t = r.get("trigger") or {}
        phi = f"{t['phi']:.4f}" if t else "-"
        psi = f"{t['psi']:.4f}" if t else "-"
        rows.append(f"{r['stage']:<7} {r['module']:<11} {r['scale']:>5} {r['block_index']:>5} {phi:>9} {psi:>9}")
    for r in plan.get("retained", []):
        rows.append(f"{'kept':<7} {r['module']:<11} {r['scale']:>5} {r['block_index']:>5} {r['phi']:>9.4f} {r['psi']:>9.4f}  {r['note']}")
    if len(rows) == 1:
        rows.append("(no removals)")
    return "\n".join(rows)
