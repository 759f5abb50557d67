"""Per-scale PSNR/SSIM tables in the Full / 1/2 / 1/4 / 1/8 / Avg layout."""

from __future__ import annotations

import csv

import numpy as np

from .metrics import psnr, ssim

SCALES = (1.0, 0.5, 0.25, 0.125)
LABELS = {1.0: "full", 0.5: "1/2", 0.25: "1/4", 0.125: "1/8"}
COLUMNS = ("full", "half", "quarter", "eighth", "avg")
SSIM_WINDOW = 11


def score_pairs(pairs):
    """``pairs`` of (scale, prediction rgb, ground-truth rgb) -> {scale or "avg": (psnr, ssim)}.

    Each scale averages over its views; "avg" averages the per-scale means.
    SSIM is NaN for images smaller than its window.
    """
    per = {}
    for scale, pred, gt in pairs:
        small = min(np.shape(pred)[:2]) < SSIM_WINDOW
        per.setdefault(float(scale), []).append(
            (psnr(pred, gt), float("nan") if small else ssim(pred, gt)))
    if not per:
        raise ValueError("nothing to evaluate")
    out = {s: (float(np.mean([p for p, _ in v])), float(np.mean([q for _, q in v])))
           for s, v in per.items()}
    out["avg"] = (float(np.mean([v[0] for v in out.values()])),
                  float(np.mean([v[1] for v in out.values()])))
    return out


def _fmt(x):
    if np.isnan(x):
        return "nan"
    return "inf" if np.isinf(x) else f"{x:.6f}"


def write_metrics(path, scene: str, scores: dict):
    """One row per metric family: psnr_full .. psnr_avg, ssim_full .. ssim_avg."""
    keys = list(SCALES) + ["avg"]
    header = ["scene"] + [f"{m}_{c}" for m in ("psnr", "ssim") for c in COLUMNS]
    row = [scene]
    for m in (0, 1):
        row += [_fmt(scores[k][m]) if k in scores else "" for k in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerow(row)


def write_metrics_long(path, scene: str, scores: dict):
    """(scene, scale, psnr, ssim) rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "scale", "psnr", "ssim"])
        for k in list(SCALES) + ["avg"]:
            if k in scores:
                w.writerow([scene, LABELS.get(k, k), _fmt(scores[k][0]), _fmt(scores[k][1])])
