"""Evaluation metrics: per-class Dice with a presence restriction, expected
calibration error, precision-recall AUC, and cross-case aggregation.

Dice is computed over whole volumes and reported only for classes present in
the ground truth, so all-background predictions cannot inflate scores.  ECE
uses equal-width confidence bins.  PRAUC integrates the precision-recall
curve step-wise (no interpolation), grouping tied scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice_per_class: dict  # class index -> float, absent classes omitted
    ece: float
    prauc: float | None  # None when no positive pixels exist


def dice(pred, gt, c: int) -> float | None:
    """2|P∩G| / (|P|+|G|) for class c over the full volume.

    Returns None when the ground truth contains no pixel of class c.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == c
    g = gt == c
    n_g = int(g.sum())
    if n_g == 0:
        return None
    n_p = int(p.sum())
    inter = int((p & g).sum())
    return 2.0 * inter / (n_p + n_g)


def ece(confidence, correct, n_bins: int = 15) -> float:
    """Binned |mean confidence - mean accuracy| gap, weighted by bin mass."""
    conf = np.asarray(confidence, float).ravel()
    corr = np.asarray(correct, bool).ravel()
    if conf.size == 0:
        raise ValueError("empty inputs")
    if conf.size != corr.size:
        raise ValueError("confidence/correct length mismatch")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    total = 0.0
    n = conf.size
    for b in range(n_bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt == 0:
            continue
        gap = abs(conf[sel].mean() - corr[sel].mean())
        total += (cnt / n) * gap
    return float(total)


def bin_stats(confidence, correct, n_bins: int = 15):
    """Per-bin (count, mean confidence, mean accuracy) for reliability plots."""
    conf = np.asarray(confidence, float).ravel()
    corr = np.asarray(correct, bool).ravel()
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt:
            out.append((cnt, float(conf[sel].mean()),
                        float(corr[sel].mean())))
        else:
            out.append((0, float("nan"), float("nan")))
    return out


def prauc(scores, positives) -> float | None:
    """Step-wise area under the precision-recall curve.

    Thresholds sweep the distinct score values in descending order; tied
    scores enter together.  Returns None when there are no positives.
    """
    s = np.asarray(scores, float).ravel()
    y = np.asarray(positives, bool).ravel()
    if s.size != y.size:
        raise ValueError("scores/labels length mismatch")
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s = s[order]
    y = y[order]
    # indices where a new (lower) score value starts the next threshold group
    boundaries = np.flatnonzero(np.diff(s)) + 1
    group_ends = np.append(boundaries, s.size)
    tp_cum = np.cumsum(y)
    tp = tp_cum[group_ends - 1]
    pred_pos = group_ends
    precision = tp / pred_pos
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def fluid_probability(mean_probs: np.ndarray) -> np.ndarray:
    """Summed probability of all non-background classes."""
    return np.asarray(mean_probs, float)[..., 1:].sum(axis=-1)


def case_metrics(case_id: str, mean_probs, pred_labels, gt_labels,
                 num_classes: int, n_bins: int = 15) -> CaseMetrics:
    """All metrics for one case from its mean probability map."""
    mean_probs = np.asarray(mean_probs, float)
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    dice_pc = {}
    for c in range(1, num_classes):
        d = dice(pred_labels, gt_labels, c)
        if d is not None:
            dice_pc[c] = d
    conf = mean_probs.max(axis=-1)
    correct = pred_labels == gt_labels
    return CaseMetrics(
        case_id=case_id,
        dice_per_class=dice_pc,
        ece=ece(conf, correct, n_bins),
        prauc=prauc(fluid_probability(mean_probs), gt_labels > 0),
    )


@dataclass
class Summary:
    n_cases: int
    per_class: dict  # class -> (mean, std, count) over cases where present
    mean_foreground_dice: float
    mean_ece: float
    mean_prauc: float | None
    prauc_count: int = 0

    def row(self, num_classes: int) -> dict:
        out = {"n_cases": self.n_cases}
        for c in range(1, num_classes):
            if c in self.per_class:
                m, s, n = self.per_class[c]
                out[f"dice_c{c}"] = f"{m:.4f}"
                out[f"dice_c{c}_std"] = f"{s:.4f}"
                out[f"dice_c{c}_n"] = n
            else:
                out[f"dice_c{c}"] = "absent"
                out[f"dice_c{c}_std"] = "absent"
                out[f"dice_c{c}_n"] = 0
        out["dice_mean"] = (f"{self.mean_foreground_dice:.4f}"
                            if np.isfinite(self.mean_foreground_dice)
                            else "absent")
        out["ece"] = f"{self.mean_ece:.6f}"
        out["prauc"] = (f"{self.mean_prauc:.4f}"
                        if self.mean_prauc is not None else "absent")
        return out


def aggregate(case_metrics_list) -> Summary:
    """Per-class mean +/- population std over cases where the class exists."""
    if not case_metrics_list:
        raise ValueError("no case metrics to aggregate")
    per_class = {}
    classes = sorted({c for cm in case_metrics_list
                      for c in cm.dice_per_class})
    class_means = []
    for c in classes:
        vals = [cm.dice_per_class[c] for cm in case_metrics_list
                if c in cm.dice_per_class]
        per_class[c] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
        class_means.append(np.mean(vals))
    praucs = [cm.prauc for cm in case_metrics_list if cm.prauc is not None]
    return Summary(
        n_cases=len(case_metrics_list),
        per_class=per_class,
        mean_foreground_dice=(float(np.mean(class_means))
                              if class_means else float("nan")),
        mean_ece=float(np.mean([cm.ece for cm in case_metrics_list])),
        mean_prauc=float(np.mean(praucs)) if praucs else None,
        prauc_count=len(praucs),
    )


def write_summary_csv(path, rows, fieldnames=None) -> None:
    """One row per method/config; columns per class plus means."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
