"""Paired-folder evaluation, the six-ordering mixed benchmark, and ablation tables.

A "restorer" is any callable (lq_image, sample_info) -> restored_image;
the harness never inspects model internals, so identity or oracle
restorers plug in directly for calibration.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .degrade import DegradationChain, DegradationOp, load_manifest
from .errors import ContractViolation
from .imaging import Image, MetricReport, load_png, psnr, ssim

# optional perceptual metric plugin: callable(a: Image, b: Image) -> float
_PERCEPTUAL_PLUGIN: Callable | None = None


def register_perceptual_plugin(fn: Callable | None) -> None:
    global _PERCEPTUAL_PLUGIN
    _PERCEPTUAL_PLUGIN = fn


@dataclass
class EvalPair:
    name: str
    lq_path: Path
    hq_path: Path
    chain: DegradationChain | None = None
    order: str | None = None


def find_pairs(paired_dir: str | Path, warn=None) -> list[EvalPair]:
    """Match lq/<name>.png with hq/<name>.png; unmatched files are skipped."""
    paired_dir = Path(paired_dir)
    lq_dir = paired_dir / "lq"
    hq_dir = paired_dir / "hq"
    if not lq_dir.is_dir() or not hq_dir.is_dir():
        raise ContractViolation(f"{paired_dir} must contain lq/ and hq/ subdirectories")
    lq_names = {p.name for p in lq_dir.glob("*.png")}
    hq_names = {p.name for p in hq_dir.glob("*.png")}
    unmatched = sorted(lq_names ^ hq_names)
    if unmatched:
        print(
            f"warning: skipping {len(unmatched)} unmatched files: {unmatched}",
            file=warn or sys.stderr,
        )
    pairs = [
        EvalPair(name=name, lq_path=lq_dir / name, hq_path=hq_dir / name)
        for name in sorted(lq_names & hq_names)
    ]
    if not pairs:
        raise ContractViolation(f"no matched lq/hq pairs under {paired_dir}")
    return pairs


def evaluate_pairs(restorer: Callable, pairs: list[EvalPair]) -> MetricReport:
    per_image = []
    for pair in pairs:
        lq = load_png(pair.lq_path)
        hq = load_png(pair.hq_path)
        restored = restorer(lq, pair)
        value_psnr = psnr(restored, hq).value
        value_ssim = ssim(restored, hq)
        per_image.append((pair.name, value_psnr, value_ssim))
    lpips = None
    if _PERCEPTUAL_PLUGIN is not None:
        scores = []
        for pair in pairs:
            lq = load_png(pair.lq_path)
            hq = load_png(pair.hq_path)
            scores.append(_PERCEPTUAL_PLUGIN(restorer(lq, pair), hq))
        lpips = float(np.mean(scores))
    return MetricReport(
        psnr=float(np.mean([p for _, p, _ in per_image])),
        ssim=float(np.mean([s for _, _, s in per_image])),
        per_image=per_image,
        lpips=lpips,
    )


def evaluate(restorer: Callable, paired_dir: str | Path) -> MetricReport:
    return evaluate_pairs(restorer, find_pairs(paired_dir))


def identity_restorer(lq: Image, pair=None) -> Image:
    return lq


# ----------------------------------------------------------------------
# Mixed-distortion benchmark (six orderings)
# ----------------------------------------------------------------------

def chain_from_manifest_record(record: dict) -> DegradationChain:
    ops = []
    for kind_short in record["order"].split("-"):
        kind = {"noise": "gaussian_noise"}.get(kind_short, kind_short)
        ops.append(
            DegradationOp(kind, dict(record["op_params"][kind]), int(record["seeds"][kind]))
        )
    return DegradationChain(tuple(ops))


def run_mixed_benchmark(restorer: Callable, manifest_path: str | Path) -> dict[str, MetricReport]:
    """One (PSNR, SSIM) row per distortion ordering in the manifest."""
    records = load_manifest(manifest_path)
    by_order: dict[str, list] = {}
    for record in records:
        by_order.setdefault(record["order"], []).append(record)
    if len(by_order) != 6:
        raise ContractViolation(f"expected 6 orderings in manifest, found {len(by_order)}")
    table = {}
    for order in sorted(by_order):
        per_image = []
        for record in by_order[order]:
            lq = load_png(record["lq_path"])
            hq = load_png(record["hq_path"])
            pair = EvalPair(
                name=Path(record["lq_path"]).name,
                lq_path=Path(record["lq_path"]),
                hq_path=Path(record["hq_path"]),
                chain=chain_from_manifest_record(record),
                order=order,
            )
            restored = restorer(lq, pair)
            per_image.append((pair.name, psnr(restored, hq).value, ssim(restored, hq)))
        table[order] = MetricReport(
            psnr=float(np.mean([p for _, p, _ in per_image])),
            ssim=float(np.mean([s for _, _, s in per_image])),
            per_image=per_image,
        )
    return table


# ----------------------------------------------------------------------
# Report rendering
# ----------------------------------------------------------------------

def report_rows(reports: dict[str, MetricReport]) -> list[list[str]]:
    rows = [["variant", "psnr", "ssim", "lpips"]]
    for name in reports:
        r = reports[name]
        lpips = f"{r.lpips:.4f}" if r.lpips is not None else "n/a"
        rows.append([name, f"{r.psnr:.3f}", f"{r.ssim:.4f}", lpips])
    return rows


def write_report_csv(path: str | Path, reports: dict[str, MetricReport]) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(report_rows(reports))


def format_report_table(reports: dict[str, MetricReport]) -> str:
    rows = report_rows(reports)
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def ablation_report(reports: dict[str, MetricReport]) -> str:
    required = set(reports)
    if not required:
        raise ContractViolation("ablation report needs at least one variant")
    return format_report_table(reports)


def directional_checks(reports: dict[str, MetricReport]) -> list[tuple[str, bool]]:
    """Structural expectations between ablation variants, by mean PSNR."""
    checks = []

    def better(a, b):
        return reports[a].psnr > reports[b].psnr

    if "visual" in reports and "blank" in reports:
        checks.append(("visual > blank grounding", better("visual", "blank")))
    if "visual" in reports and "none" in reports:
        checks.append(("with instruction > without", better("visual", "none")))
    if "visual" in reports and "naive" in reports:
        checks.append(("degradation space > naive image space", better("visual", "naive")))
    return checks
