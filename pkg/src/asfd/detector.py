"""Dual-shot anchor-based face detector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autofem import N_LEVELS, STRIDES, AutoFEM, AutoFemBundle, CpmBank, DerivedFPN, PlainFPN, SearchFPN
from .boxes import box_iou, decode_boxes, encode_deltas  # noqa: F401  (re-exported)
from .losses import cosine_logits


@dataclass
class BackboneSpec:
    stem_width: int = 16
    widths: tuple = (16, 24, 32, 48, 64, 64)
    depths: tuple = (1, 1, 1, 1, 1, 1)

    def __post_init__(self):
        self.widths, self.depths = tuple(self.widths), tuple(self.depths)
        if len(self.widths) != N_LEVELS or len(self.depths) != N_LEVELS:
            raise ValueError(f"backbone needs {N_LEVELS} stages")
        if min(self.widths) < 1 or min(self.depths) < 1 or self.stem_width < 1:
            raise ValueError("backbone widths and depths must be positive")


@dataclass
class HeadSpec:
    depth: int = 2
    width: int = 32
    embed_dim: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("head depth must be >= 1")


@dataclass
class DetectorConfig:
    resolution: int = 128
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    width: int = 32  # feature-module width C
    fpn: str = "none"  # none | plain | autofem | search
    cpm: str = "none"  # none | autofem | search
    fpn_repeats: int = 1
    head: HeadSpec = field(default_factory=HeadSpec)
    classifier: str = "margin_cos"  # margin_cos | softmax
    cos_scale: float = 30.0
    anchor_scale: float = 4.0
    # search-mode supernet settings
    n_nodes: int = 6
    channel_k: int = 4
    search_mode: str = "single_path"  # single_path | mixed

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        if isinstance(self.head, dict):
            self.head = HeadSpec(**self.head)
        if self.fpn not in ("none", "plain", "autofem", "search"):
            raise ValueError(f"unknown fpn kind {self.fpn!r}")
        if self.cpm not in ("none", "autofem", "search"):
            raise ValueError(f"unknown cpm kind {self.cpm!r}")
        if self.classifier not in ("margin_cos", "softmax"):
            raise ValueError(f"unknown classifier {self.classifier!r}")


def padded_resolution(resolution, max_stride=STRIDES[-1]):
    """Inputs are zero-padded up to a multiple of the coarsest stride."""
    return -(-resolution // max_stride) * max_stride


def generate_anchors(resolution, strides=STRIDES, scales=(4.0,)):
    """Square anchors of side scale*stride centred at (i+0.5)*stride.

    Ordered level-major, then row-major over locations, then by scale."""
    res = padded_resolution(resolution, max(strides))
    out = []
    for s in strides:
        c = (np.arange(res // s) + 0.5) * s
        cy, cx = np.meshgrid(c, c, indexing="ij")
        ctr = np.stack([cx.ravel(), cy.ravel()], -1)[:, None, :]
        half = (np.asarray(scales, dtype=np.float64) * s / 2)[None, :, None]
        out.append(np.concatenate([ctr - half, ctr + half], -1).reshape(-1, 4))
    return np.concatenate(out, 0)


def anchor_levels(resolution, strides=STRIDES, n_scales=1):
    res = padded_resolution(resolution, max(strides))
    return np.concatenate([np.full((res // s) ** 2 * n_scales, i) for i, s in enumerate(strides)])


def conv_relu(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class Backbone(nn.Module):
    """Plain stacked stride-2 conv stages emitting C2..C7 (strides 4..128)."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, spec.stem_width, 3, 2, 1, bias=False), nn.BatchNorm2d(spec.stem_width), nn.ReLU(inplace=True)
        )
        stages, cin = [], spec.stem_width
        for w, d in zip(spec.widths, spec.depths):
            layers = []
            for j in range(d):
                layers += [nn.Conv2d(cin, w, 3, 2 if j == 0 else 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
                cin = w
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Heads(nn.Module):
    """Regression and classification heads shared by all levels and both shots."""

    def __init__(self, width, spec: HeadSpec, classifier="margin_cos", cos_scale=30.0):
        super().__init__()
        def trunk():
            return nn.Sequential(*[conv_relu(width if i == 0 else spec.width, spec.width) for i in range(spec.depth)])
        self.loc_trunk, self.cls_trunk = trunk(), trunk()
        self.loc_out = nn.Conv2d(spec.width, 4, 3, 1, 1)
        self.cls_out = nn.Conv2d(spec.width, spec.embed_dim, 3, 1, 1)
        self.classifier, self.cos_scale = classifier, cos_scale
        if classifier == "margin_cos":
            self.class_weight = nn.Parameter(torch.randn(2, spec.embed_dim) / spec.embed_dim ** 0.5)
        else:
            self.linear = nn.Linear(spec.embed_dim, 2)

    @staticmethod
    def _flat(t):
        b, c = t.shape[:2]
        return t.permute(0, 2, 3, 1).reshape(b, -1, c)

    def forward(self, levels):
        deltas = torch.cat([self._flat(self.loc_out(self.loc_trunk(x))) for x in levels], 1)
        embed = torch.cat([self._flat(self.cls_out(self.cls_trunk(x))) for x in levels], 1)
        shot = {"deltas": deltas, "embed": embed}
        if self.classifier == "margin_cos":
            shot["class_weight"] = self.class_weight
        else:
            shot["logits"] = self.linear(embed)
        return shot

    def scores(self, shot):
        """Face probability per anchor, in [0, 1]."""
        if self.classifier == "margin_cos":
            logits = self.cos_scale * cosine_logits(shot["embed"], shot["class_weight"])
        else:
            logits = shot["logits"]
        return F.softmax(logits, -1)[..., 1]


def build_autofem(cfg: DetectorConfig, bundle: AutoFemBundle | None = None):
    w = cfg.width
    if cfg.fpn == "none":
        fpn = None
    elif cfg.fpn == "plain":
        fpn = PlainFPN(w)
    elif cfg.fpn == "search":
        fpn = SearchFPN(w, k=cfg.channel_k, mode=cfg.search_mode)
    else:
        if bundle is None or bundle.fpn_spec is None:
            raise ValueError("fpn='autofem' needs a bundle with an FPN spec")
        fpn = DerivedFPN(bundle.fpn_spec, w, cfg.fpn_repeats)
    if cfg.cpm == "none":
        cpm = None
    elif cfg.cpm == "search":
        cpm = CpmBank.searchable(w, cfg.n_nodes, k=cfg.channel_k, mode=cfg.search_mode)
    else:
        if bundle is None or bundle.cpm_genotypes is None:
            raise ValueError("cpm='autofem' needs a bundle with CPM genotypes")
        cpm = CpmBank.derived(bundle.cpm_genotypes)
    if bundle is not None and bundle.width != w:
        raise ValueError(f"bundle width {bundle.width} != detector width {w}")
    if fpn is None and cpm is None:
        return None
    return AutoFEM(fpn, cpm)


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, bundle: AutoFemBundle | None = None):
        super().__init__()
        self.cfg = cfg
        self.resolution = padded_resolution(cfg.resolution)
        self.backbone = Backbone(cfg.backbone)
        self.lateral = nn.ModuleList(nn.Conv2d(c, cfg.width, 1) for c in cfg.backbone.widths)
        self.autofem = build_autofem(cfg, bundle)
        self.heads = Heads(cfg.width, cfg.head, cfg.classifier, cfg.cos_scale)
        self.register_buffer("anchors", torch.as_tensor(
            generate_anchors(self.resolution, scales=(cfg.anchor_scale,)), dtype=torch.float32), persistent=False)

    def arch_parameters(self):
        return [p for n, p in self.named_parameters() if n.rsplit(".", 1)[-1].startswith("arch_")]

    def weight_parameters(self):
        return [p for n, p in self.named_parameters() if not n.rsplit(".", 1)[-1].startswith("arch_")]

    def pad(self, images):
        h, w = images.shape[-2:]
        if h != self.cfg.resolution or w != self.cfg.resolution:
            raise ValueError(f"expected {self.cfg.resolution}x{self.cfg.resolution} input, got {h}x{w}")
        extra = self.resolution - self.cfg.resolution
        return F.pad(images, (0, extra, 0, extra)) if extra else images

    def forward(self, images):
        """Returns (first_shot, second_shot); each maps names to (B, A, ...) tensors."""
        x = self.pad(images)
        raw = [lat(f) for lat, f in zip(self.lateral, self.backbone(x))]
        first = self.heads(raw)
        second = self.heads(self.autofem(raw)) if self.autofem is not None else first
        return first, second

    @torch.no_grad()
    def detect(self, images, **nms_kw):
        was_training = self.training
        self.eval()
        _, second = self(images)
        self.train(was_training)
        scores = self.heads.scores(second)
        boxes = decode_boxes(self.anchors, second["deltas"], image_size=self.cfg.resolution)
        levels = anchor_levels(self.resolution)
        out = []
        for b in range(images.shape[0]):
            s, bx = scores[b].double().numpy(), boxes[b].double().numpy()
            keep = nms_inference(bx, s, **nms_kw)
            out.append([Detection(tuple(bx[i]), float(s[i]), int(levels[i])) for i in keep])
        return out


def dual_shot_forward(images, model: Detector):
    return model(images)


@dataclass
class Detection:
    box: tuple
    score: float
    level: int = -1


def nms_inference(boxes, scores, pre_topk=5000, iou=0.3, post_topk=750, score_floor=0.01):
    """Greedy NMS; returns kept indices ordered by score desc, then index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    cand = np.flatnonzero(scores >= score_floor)
    if cand.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = cand[np.argsort(-scores[cand], kind="stable")][:pre_topk]
    b = boxes[order]
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        if len(keep) == post_topk:
            break
        rest = np.arange(i + 1, len(order))[alive[i + 1:]]
        if rest.size == 0:
            continue
        lt = np.maximum(b[i, :2], b[rest, :2])
        rb = np.minimum(b[i, 2:], b[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ov = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        alive[rest[ov > iou]] = False
    return np.asarray(keep, dtype=np.int64)
