"""Average precision with size-tier stratification."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..boxes import box_iou
from .data import TIERS, tier_of


@dataclass
class EvalReport:
    ap: dict  # tier -> AP or None when the tier has no ground truth
    n_gt: dict
    curves: dict = field(default_factory=dict)  # tier -> (recall, interpolated precision)

    def to_dict(self, digits=12):
        # rounded so independent implementations serialize identically
        def r(v):
            return None if v is None else round(float(v), digits)
        return {
            "ap": {k: r(v) for k, v in self.ap.items()},
            "n_gt": self.n_gt,
            "curves": {k: {"recall": [r(x) for x in rec], "precision": [r(x) for x in prec]}
                       for k, (rec, prec) in self.curves.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def greedy_match(dets, gts, iou_thresh=0.5):
    """Score-descending greedy matching across all images.

    ``dets``: image_id -> (N, 5) [x1, y1, x2, y2, score];
    ``gts``: image_id -> (M, 4). Ties in score keep input order (images in
    ``dets`` iteration order, then row). Each detection takes the unmatched GT
    of its image with the highest IoU >= ``iou_thresh``.

    Returns (scores, matched) in processing order, where matched holds
    (image_id, gt_index) or None."""
    rows = []
    for img, d in dets.items():
        d = np.asarray(d, dtype=np.float64).reshape(-1, 5)
        rows += [(img, j, d[j]) for j in range(len(d))]
    order = sorted(range(len(rows)), key=lambda i: -rows[i][2][4])
    used = {img: np.zeros(len(np.asarray(g).reshape(-1, 4)), bool) for img, g in gts.items()}
    ious = {}
    scores, matched = [], []
    for i in order:
        img, j, d = rows[i]
        scores.append(float(d[4]))
        g = np.asarray(gts.get(img, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
        if len(g) == 0:
            matched.append(None)
            continue
        if img not in ious:
            dd = np.asarray(dets[img], dtype=np.float64).reshape(-1, 5)
            ious[img] = box_iou(dd[:, :4], g)
        ov = np.where(used[img], -1.0, ious[img][j])
        k = int(np.argmax(ov))
        if ov[k] >= iou_thresh:
            used[img][k] = True
            matched.append((img, k))
        else:
            matched.append(None)
    return np.asarray(scores), matched


def average_precision(tp, fp, n_gt):
    """Area under the monotone (interpolated) PR curve."""
    if n_gt == 0:
        return None, ([], [])
    tp, fp = np.cumsum(tp), np.cumsum(fp)
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return ap, (mrec[1:-1].tolist(), mpre[1:-1].tolist())


def evaluate_ap(dets, gts, iou_thresh=0.5, tier_areas=(32 ** 2, 96 ** 2)):
    """Overall and per-tier AP. Within a tier, detections matched to GT of
    another tier are ignored rather than counted as false positives."""
    scores, matched = greedy_match(dets, gts, iou_thresh)
    gt_tier = {img: [tier_of(b, tier_areas) for b in np.asarray(g).reshape(-1, 4)] for img, g in gts.items()}
    ap, n_gt, curves = {}, {}, {}
    for tier in ("overall",) + TIERS:
        tp, fp = [], []
        for m in matched:
            if m is None:
                tp.append(0), fp.append(1)
            elif tier == "overall" or gt_tier[m[0]][m[1]] == tier:
                tp.append(1), fp.append(0)
        n = sum(1 for ts in gt_tier.values() for t in ts if tier == "overall" or t == tier)
        ap[tier], curve = average_precision(np.asarray(tp, float), np.asarray(fp, float), n)
        n_gt[tier] = n
        curves[tier] = curve
    return EvalReport(ap, n_gt, curves)


def plot_pr(report: EvalReport, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for tier, (rec, prec) in report.curves.items():
        if rec:
            ax.plot(rec, prec, label=f"{tier} (AP {report.ap[tier]:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
