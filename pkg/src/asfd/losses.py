"""Distance-based regression + margin-based classification (DRMC) loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import EPS, box_iou, decode_boxes, encode_deltas


@dataclass
class DrmcConfig:
    margin: float = 0.35
    scale: float = 30.0
    w_reg: float = 1.0
    w_cls: float = 1.0
    w_aux: float = 1.0
    reg: str = "diou"  # diou | smooth_l1
    cls: str = "margin_cos"  # margin_cos | softmax
    neg_pos_ratio: int = 3

    def __post_init__(self):
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if min(self.w_reg, self.w_cls) <= 0 or self.w_aux < 0:
            raise ValueError("loss weights must be positive (w_aux may be 0)")
        if self.reg not in ("diou", "smooth_l1") or self.cls not in ("margin_cos", "softmax"):
            raise ValueError(f"unknown loss components {self.reg!r}/{self.cls!r}")


# Ablation presets: one per loss table row.
LOSS_PRESETS = {
    "smooth-l1+softmax": dict(reg="smooth_l1", cls="softmax", w_aux=0.0),
    "+aux": dict(reg="smooth_l1", cls="softmax", w_aux=1.0),
    "+MC": dict(reg="smooth_l1", cls="margin_cos", w_aux=1.0),
    "+DR": dict(reg="diou", cls="softmax", w_aux=1.0),
    "+DRMC": dict(reg="diou", cls="margin_cos", w_aux=1.0),
}


# The tiny desk-scale heads collapse at s=30, m=0.35 (see notes); the margin
# presets use a softer scale there.
DESK_MARGIN = dict(scale=5.0, margin=0.1)


def loss_preset(name, desk=False, **overrides):
    if name not in LOSS_PRESETS:
        raise KeyError(f"unknown loss preset {name!r}; choose from {sorted(LOSS_PRESETS)}")
    base = {**LOSS_PRESETS[name], **(DESK_MARGIN if desk else {})}
    return DrmcConfig(**{**base, **overrides})


def diou_loss(pred, target):
    """Elementwise 1 - IoU + rho^2 / c^2 for (..., 4) boxes.

    rho is the distance between box centres and c the diagonal of the smallest
    enclosing box. Coincident boxes (including zero-area ones) give exactly 0."""
    px1, py1, px2, py2 = pred.unbind(-1)
    tx1, ty1, tx2, ty2 = target.unbind(-1)
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    iou = inter / (union + EPS)
    rho2 = ((px1 + px2 - tx1 - tx2) ** 2 + (py1 + py2 - ty1 - ty2) ** 2) / 4
    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    c2 = cw ** 2 + ch ** 2
    loss = 1 - iou + rho2 / (c2 + EPS)
    same = (pred == target).all(-1)
    return torch.where(same, torch.zeros_like(loss), loss)


def cosine_logits(features, class_weights):
    """Cosines between L2-normalized features (N,E) and class weights (K,E)."""
    return F.normalize(features, dim=-1, eps=EPS) @ F.normalize(class_weights, dim=-1, eps=EPS).t()


def margin_cos_loss(cosines, labels, margin=0.35, scale=30.0, reduction="mean"):
    """Cross-entropy over s*(cos - m*[target]) logits.

    Two-class inputs use the closed form softplus(z_other - z_target), which
    keeps tiny losses representable; otherwise log-softmax is used. Returns 0
    for an empty anchor set."""
    if cosines.shape[0] == 0:
        return cosines.sum() * 0.0
    onehot = F.one_hot(labels, cosines.shape[-1]).to(cosines.dtype)
    logits = scale * (cosines - margin * onehot)
    if cosines.shape[-1] == 2:
        z_t = (logits * onehot).sum(-1)
        z_o = (logits * (1 - onehot)).sum(-1)
        per = F.softplus(z_o - z_t)
    else:
        per = -(F.log_softmax(logits, dim=-1) * onehot).sum(-1)
    return per.mean() if reduction == "mean" else per


@dataclass
class MatchResult:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignore
    targets: np.ndarray  # (A, 4) target box of each anchor (zeros unless positive)
    gt_index: np.ndarray  # (A,) matched GT index or -1

    @property
    def positives(self):
        return np.flatnonzero(self.labels == 1)


def match_anchors(anchors, gt_boxes, pos_iou=0.5, neg_iou=0.4):
    """Label anchors positive / negative / ignore against ground truth.

    Each GT additionally claims its best anchor (the best one not already
    claimed by an earlier GT when possible), so every GT has a positive."""
    if not 0 <= neg_iou <= pos_iou <= 1:
        raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if len(gt) == 0:
        return MatchResult(np.zeros(n, np.int64), np.zeros((n, 4)), np.full(n, -1))
    iou = box_iou(anchors, gt)
    best_gt = iou.argmax(1)
    best = iou[np.arange(n), best_gt]
    labels = np.where(best >= pos_iou, 1, np.where(best < neg_iou, 0, -1))
    gt_index = np.where(labels == 1, best_gt, -1)
    claimed = set()
    for g in range(len(gt)):
        order = np.argsort(-iou[:, g], kind="stable")
        a = next((int(i) for i in order if int(i) not in claimed), int(order[0]))
        claimed.add(a)
        labels[a], gt_index[a] = 1, g
    targets = np.zeros((n, 4))
    pos = labels == 1
    targets[pos] = gt[gt_index[pos]]
    return MatchResult(labels.astype(np.int64), targets, gt_index)


def hard_negative_mask(cls_loss, labels, ratio=3):
    """Positives plus the hardest ``ratio`` negatives per positive (at least
    ``ratio`` negatives when an image has no positives)."""
    pos = labels == 1
    neg = labels == 0
    n_neg = min(ratio * max(int(pos.sum()), 1), int(neg.sum()))
    mask = pos.clone()
    if n_neg > 0:
        masked = torch.where(neg, cls_loss.detach(), torch.full_like(cls_loss, -float("inf")))
        mask[torch.topk(masked, n_neg).indices] = True
    return mask


def _cls_terms(shot, labels, cfg):
    """Per-anchor classification loss (labels 0/1; ignore anchors get label 0)."""
    target = labels.clamp(min=0)
    needed = "class_weight" if cfg.cls == "margin_cos" else "logits"
    if needed not in shot:
        raise ValueError(f"loss cls={cfg.cls!r} needs a head exposing {needed!r}")
    if cfg.cls == "margin_cos":
        cos = cosine_logits(shot["embed"], shot["class_weight"])
        return margin_cos_loss(cos, target, cfg.margin, cfg.scale, reduction="none")
    return F.cross_entropy(shot["logits"], target, reduction="none")


def single_shot_loss(shot, anchors, match_labels, match_targets, cfg: DrmcConfig):
    """Classification and regression terms of one shot over a batch.

    ``shot`` holds per-anchor tensors of shape (B, A, ...): ``deltas`` and
    either ``embed``+``class_weight`` or ``logits``."""
    b = match_labels.shape[0]
    cls_sum, reg_sum, n_pos, n_cls = 0.0, 0.0, 0, 0
    for i in range(b):
        labels = match_labels[i]
        per_img = {k: (v[i] if k != "class_weight" else v) for k, v in shot.items()}
        cls = _cls_terms(per_img, labels, cfg)
        mask = hard_negative_mask(cls, labels, cfg.neg_pos_ratio)
        cls_sum = cls_sum + cls[mask].sum()
        n_cls += int(mask.sum())
        pos = labels == 1
        if pos.any():
            if cfg.reg == "diou":
                boxes = decode_boxes(anchors[pos], per_img["deltas"][pos])
                reg = diou_loss(boxes, match_targets[i][pos])
            else:
                tgt = encode_deltas(anchors[pos], match_targets[i][pos])
                reg = F.smooth_l1_loss(per_img["deltas"][pos], tgt, reduction="none").sum(-1)
            reg_sum = reg_sum + reg.sum()
            n_pos += int(pos.sum())
    zero = shot["deltas"].sum() * 0.0
    cls_loss = cls_sum / n_cls if n_cls else zero
    reg_loss = reg_sum / n_pos if n_pos else zero
    return cls_loss, reg_loss, n_pos, n_cls


def drmc_total(first, second, anchors, match_labels, match_targets, cfg: DrmcConfig):
    """total = w_cls*MC(second) + w_reg*DR(second) + w_aux*[MC(first) + DR(first)].

    ``first`` may be None when the auxiliary weight is 0."""
    if first is not None and first["deltas"].shape != second["deltas"].shape:
        raise ValueError("shots disagree on anchor count")
    cls2, reg2, n_pos, n_cls = single_shot_loss(second, anchors, match_labels, match_targets, cfg)
    total = cfg.w_cls * cls2 + cfg.w_reg * reg2
    out = {"cls": cls2, "reg": reg2, "num_pos": n_pos, "empty_cls": n_cls == 0}
    if cfg.w_aux > 0 and first is not None:
        cls1, reg1, _, _ = single_shot_loss(first, anchors, match_labels, match_targets, cfg)
        total = total + cfg.w_aux * (cls1 + reg1)
        out.update(aux_cls=cls1, aux_reg=reg1)
    out["total"] = total
    return out
