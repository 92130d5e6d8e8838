"""Box geometry shared by the loss, detector and evaluation code."""
import math

import numpy as np
import torch

EPS = 1e-9
# exp() overflow guard on size deltas (same constant torchvision uses)
DELTA_CLAMP = math.log(1000.0 / 16)


def box_iou(a, b):
    """Pairwise IoU between (N,4) and (M,4) x1y1x2y2 boxes, torch or numpy."""
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
        area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
        area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        lt = np.maximum(a[:, None, :2], b[None, :, :2])
        rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[..., 0] * wh[..., 1]
        union = area_a[:, None] + area_b[None, :] - inter
        return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=EPS)


def encode_deltas(anchors, boxes):
    """(dx, dy, dw, dh) of ``boxes`` relative to ``anchors``; inverse of decode_boxes."""
    lib = torch if isinstance(anchors, torch.Tensor) else np
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    ax, ay = anchors[..., 0] + aw / 2, anchors[..., 1] + ah / 2
    bw, bh = boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1]
    bx, by = boxes[..., 0] + bw / 2, boxes[..., 1] + bh / 2
    return lib.stack([(bx - ax) / aw, (by - ay) / ah, lib.log(bw / aw), lib.log(bh / ah)], -1)


def decode_boxes(anchors, deltas, image_size=None):
    """Centre-size delta decoding. Boxes are clipped to [0, image_size] only
    when ``image_size`` is given (clipping breaks the encode round trip)."""
    lib = torch if isinstance(deltas, torch.Tensor) else np
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    ax, ay = anchors[..., 0] + aw / 2, anchors[..., 1] + ah / 2
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * lib.exp(lib.clip(deltas[..., 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ah * lib.exp(lib.clip(deltas[..., 3], -DELTA_CLAMP, DELTA_CLAMP))
    out = lib.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)
    if image_size is not None:
        out = lib.clip(out, 0, image_size)
    return out
