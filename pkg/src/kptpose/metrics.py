"""Evaluation metrics: MPJPE, MRRPE, scale-translation-aligned error, AUC.

MPJPE root-aligns each hand separately (predictions and ground truth both
re-rooted at their own wrist) before averaging Euclidean distances.  The
aligned error solves least-squares scale + translation first, matching the
hand-object benchmark convention; AUC integrates the fraction of joints
under a threshold swept from 0 to `max_threshold`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def mpjpe(pred_joints, gt_joints):
    """Mean per-joint error (mm) after per-hand root alignment.

    Accepts (21, 3) for one hand or (n_hands, 21, 3); each hand is aligned
    independently.
    """
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"mpjpe: {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    p = p - p[:, :1]
    g = g - g[:, :1]
    return float(np.linalg.norm(p - g, axis=-1).mean())


def mrrpe(pred_t_lr, gt_t_lr):
    """Error of the left-hand root expressed in the right-root frame (mm)."""
    d = np.asarray(pred_t_lr, np.float64) - np.asarray(gt_t_lr, np.float64)
    return float(np.linalg.norm(d))


def scale_translation_align(pred, gt):
    """Least-squares s, t minimizing sum ||s*pred + t - gt||^2.

    Returns (s, t, aligned_pred, mean_residual).  Coincident predictions
    cannot fix a scale; they get s = 1 and a pure translation fit.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise ValueError(f"scale_translation_align: {p.shape} vs {g.shape}")
    pc = p - p.mean(axis=0)
    gc = g - g.mean(axis=0)
    denom = float((pc * pc).sum())
    s = float((pc * gc).sum() / denom) if denom > 1e-12 else 1.0
    t = g.mean(axis=0) - s * p.mean(axis=0)
    aligned = s * p + t
    residual = float(np.linalg.norm(aligned - g, axis=1).mean())
    return s, t, aligned, residual


def pck_curve(errors, max_threshold=50.0, steps=100):
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    thresholds = np.linspace(0.0, max_threshold, steps + 1)
    frac = np.array([(errors <= t).mean() for t in thresholds]) if errors.size else \
        np.zeros(steps + 1)
    return thresholds, frac


def auc_pck(errors, max_threshold=50.0, steps=100):
    """Trapezoid-integrated fraction-correct curve, normalized to [0, 1]."""
    thresholds, frac = pck_curve(errors, max_threshold, steps)
    return float(np.trapezoid(frac, thresholds) / max_threshold)


@dataclass
class MetricReport:
    mpjpe_mm: float = float("nan")
    mpjpe_single_mm: float = float("nan")
    mpjpe_inter_mm: float = float("nan")
    mrrpe_mm: float = float("nan")
    aligned_joint_err_cm: float = float("nan")
    auc: float = float("nan")
    mssd_cm: float = float("nan")
    mssd_cm_per_object: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def lines(self):
        out = [
            f"MPJPE (mm)          all={self.mpjpe_mm:.3f} "
            f"single={self.mpjpe_single_mm:.3f} inter={self.mpjpe_inter_mm:.3f}",
            f"MRRPE (mm)          {self.mrrpe_mm:.3f}",
            f"aligned err (cm)    {self.aligned_joint_err_cm:.4f}",
            f"AUC (0-50mm)        {self.auc:.4f}",
            f"MSSD (cm)           {self.mssd_cm:.3f}",
        ]
        for name, val in sorted(self.mssd_cm_per_object.items()):
            out.append(f"  MSSD[{name}] (cm)  {val:.3f}")
        out.append("counts              " + " ".join(f"{k}={v}" for k, v in sorted(self.counts.items())))
        return out

    def __str__(self):
        return "\n".join(self.lines())


def _mean(vals):
    return float(np.mean(vals)) if vals else float("nan")


def compute_report(per_sample, objects=None):
    """Aggregate per-sample prediction records into a MetricReport.

    Each record: {"interacting": bool, "hand_errors": [(pred (21,3),
    gt (21,3)), ...], "t_lr": (pred, gt) or None, "mssd_mm": float or None,
    "object_name": str or None, "skipped": bool}.
    """
    mp_all, mp_single, mp_inter = [], [], []
    mrrpes = []
    aligned_cm = []
    joint_errors = []
    mssds = []
    per_object = {}
    counts = {"total": len(per_sample), "single": 0, "interacting": 0, "skipped": 0}
    for rec in per_sample:
        bucket = "interacting" if rec["interacting"] else "single"
        counts[bucket] += 1
        if rec.get("skipped"):
            counts["skipped"] += 1
            continue
        for pred, gt in rec.get("hand_errors", []):
            e = mpjpe(pred, gt)
            mp_all.append(e)
            (mp_inter if rec["interacting"] else mp_single).append(e)
            _, _, aligned, resid = scale_translation_align(
                np.asarray(pred) - np.asarray(pred)[0],
                np.asarray(gt) - np.asarray(gt)[0])
            aligned_cm.append(resid / 10.0)
            g = np.asarray(gt) - np.asarray(gt)[0]
            joint_errors.extend(np.linalg.norm(aligned - g, axis=1).tolist())
        if rec.get("t_lr") is not None:
            mrrpes.append(mrrpe(*rec["t_lr"]))
        if rec.get("mssd_mm") is not None:
            mssds.append(rec["mssd_mm"] / 10.0)
            name = rec.get("object_name", "object")
            per_object.setdefault(name, []).append(rec["mssd_mm"] / 10.0)
    return MetricReport(
        mpjpe_mm=_mean(mp_all),
        mpjpe_single_mm=_mean(mp_single),
        mpjpe_inter_mm=_mean(mp_inter),
        mrrpe_mm=_mean(mrrpes),
        aligned_joint_err_cm=_mean(aligned_cm),
        auc=auc_pck(joint_errors) if joint_errors else float("nan"),
        mssd_cm=_mean(mssds),
        mssd_cm_per_object={k: _mean(v) for k, v in per_object.items()},
        counts=counts)
