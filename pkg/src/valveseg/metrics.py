"""Dice, HD95 and Conformity, plus per-phase reports laid out like the usual results tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure


class UndefinedMetricError(ValueError):
    """Metric undefined for the given masks (empty mask, no true positives)."""


KEY_TAGS = ("ES", "MD", "MD-1", "ED")


def _pair(A, B):
    A = np.asarray(A).astype(bool)
    B = np.asarray(B).astype(bool)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return A, B


def dice(A, B) -> float:
    A, B = _pair(A, B)
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((A & B).sum()) / total


def conformity(A, B) -> float:
    """1 - (FP + FN) / TP with ``A`` the prediction and ``B`` the reference."""
    A, B = _pair(A, B)
    tp = int((A & B).sum())
    if tp == 0:
        raise UndefinedMetricError("conformity undefined without true positives")
    fp = int((A & ~B).sum())
    fn = int((~A & B).sum())
    return 1.0 - (fp + fn) / tp


def boundary(mask) -> np.ndarray:
    """Voxels removed by one 6-connected erosion (the grid outside counts as background)."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~binary_erosion(mask, generate_binary_structure(mask.ndim, 1), border_value=0)


def _directed(bA, bB, spacing):
    # nearest bB voxel for every position, then exact distances from integer offsets
    idx = distance_transform_edt(~bB, return_distances=False, return_indices=True)
    pts = np.argwhere(bA)
    near = idx[(slice(None),) + tuple(pts.T)].T
    off = near - pts
    return np.sqrt((off * off).sum(1).astype(np.float64)) * float(spacing)


def surface_distances(A, B, spacing=1.0) -> np.ndarray:
    """Pooled boundary-to-boundary distances A->B then B->A, in mm."""
    A, B = _pair(A, B)
    if not A.any() or not B.any():
        raise UndefinedMetricError("HD95 undefined for an empty mask")
    bA, bB = boundary(A), boundary(B)
    return np.concatenate([_directed(bA, bB, spacing), _directed(bB, bA, spacing)])


def hd95(A, B, spacing=1.0) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface distances."""
    return float(np.percentile(surface_distances(A, B, spacing), 95))


# --------------------------------------------------------------------------- reports


@dataclass
class PhaseMetrics:
    phase_index: int
    tag: str
    dice: Optional[float]  # percent
    hd95: Optional[float]  # mm
    conformity: Optional[float]  # percent
    labeled: bool = False


@dataclass
class MetricsReport:
    patient_id: str
    rows: list
    gaps: list = field(default_factory=list)  # phases without ground truth

    def aggregate(self, which: str = "all") -> dict:
        if which == "all":
            rows = self.rows
        elif which == "key":
            rows = [r for r in self.rows if r.tag in KEY_TAGS]
        elif which == "unlabeled":
            rows = [r for r in self.rows if not r.labeled]
        else:
            raise ValueError(f"unknown aggregate {which!r}")
        return {m: _mean([getattr(r, m) for r in rows]) for m in ("dice", "hd95", "conformity")}

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "phases": [asdict(r) for r in self.rows],
            "aggregates": {
                "All Phases": self.aggregate("all"),
                "Key Phases": self.aggregate("key"),
                "Unlabeled Phases": self.aggregate("unlabeled"),
            },
            "gaps": list(self.gaps),
        }


def _mean(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None


def phase_tags(sequence, ground_truth=None) -> dict:
    """ES/ED from the labeled indices; MD is the unlabeled phase whose mask overlaps ES least."""
    t_es, t_ed = sequence.labeled_indices
    tags = {t: "other" for t in range(sequence.n_phases)}
    tags[t_es], tags[t_ed] = "ES", "ED"
    gt = ground_truth if ground_truth is not None else sequence.ground_truth
    if gt is None or gt[t_es] is None:
        return tags
    candidates = [t for t in sequence.unlabeled_indices if gt[t] is not None]
    if not candidates:
        return tags
    t_md = min(candidates, key=lambda t: (dice(gt[t], gt[t_es]), t))
    tags[t_md] = "MD"
    t_prev = t_md + 1 if t_ed > t_md else t_md - 1
    if t_prev in tags and tags[t_prev] == "other":
        tags[t_prev] = "MD-1"
    return tags


def evaluate_sequence(predictions: Sequence, sequence, phase_tags_: Optional[dict] = None,
                      threshold: float = 0.5) -> MetricsReport:
    """Per-phase metrics for every phase that has ground truth."""
    if len(predictions) != sequence.n_phases:
        raise ValueError(f"{len(predictions)} predictions for {sequence.n_phases} phases")
    gt = sequence.ground_truth or [p.label for p in sequence.phases]
    tags = phase_tags_ or phase_tags(sequence, gt)
    spacing = sequence.spacing
    rows, gaps = [], []
    for t, (P, Y) in enumerate(zip(predictions, gt)):
        if Y is None:
            gaps.append(t)
            continue
        A = np.asarray(P) > threshold
        B = np.asarray(Y) > 0
        try:
            h = hd95(A, B, spacing)
        except UndefinedMetricError:
            h = None
        try:
            c = 100.0 * conformity(A, B)
        except UndefinedMetricError:
            c = None
        rows.append(PhaseMetrics(t, tags.get(t, "other"), 100.0 * dice(A, B), h, c,
                                 t in sequence.labeled_indices))
    return MetricsReport(sequence.patient_id, rows, gaps)


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Means over patients per phase tag, plus All/Key/Unlabeled aggregates."""
    out = {}
    for tag in KEY_TAGS:
        rows = [r for rep in reports for r in rep.rows if r.tag == tag]
        out[tag] = {m: _mean([getattr(r, m) for r in rows]) for m in ("dice", "hd95", "conformity")}
    for name, which in (("All Phases", "all"), ("Key Phases", "key"), ("Unlabeled Phases", "unlabeled")):
        out[name] = {m: _mean([rep.aggregate(which)[m] for rep in reports]) for m in ("dice", "hd95", "conformity")}
    return out


def per_phase_dice(reports: Sequence[MetricsReport]) -> dict:
    acc = {}
    for rep in reports:
        for r in rep.rows:
            acc.setdefault(r.phase_index, []).append(r.dice)
    return {t: _mean(v) for t, v in sorted(acc.items())}


def write_reports(reports: Sequence[MetricsReport], out_dir) -> dict:
    """``report.csv`` (one row per patient phase plus aggregates) and ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(reports)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "phase", "tag", "dice_pct", "hd95_mm", "conf_pct"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.patient_id, r.phase_index, r.tag, _fmt(r.dice), _fmt(r.hd95), _fmt(r.conformity)])
        for name, agg in summary.items():
            w.writerow(["*", "", name, _fmt(agg["dice"]), _fmt(agg["hd95"]), _fmt(agg["conformity"])])
    payload = {"patients": [rep.to_dict() for rep in reports], "summary": summary,
               "per_phase_dice": {str(k): v for k, v in per_phase_dice(reports).items()}}
    with open(out / "report.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return payload


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def compare_reports(a: dict, b: dict, names=("A", "B")) -> list:
    """Side-by-side rows (section, metric, a, b, b - a) from two ``report.json`` payloads."""
    rows = []
    for section in list(KEY_TAGS) + ["All Phases", "Key Phases", "Unlabeled Phases"]:
        sa, sb = a["summary"].get(section, {}), b["summary"].get(section, {})
        for m in ("dice", "hd95", "conformity"):
            va, vb = sa.get(m), sb.get(m)
            diff = None if va is None or vb is None else vb - va
            rows.append((section, m, va, vb, diff))
    return rows
