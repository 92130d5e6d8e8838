"""Synthetic face-detection scenes: soft elliptical "faces" with eyes and a
mouth over textured backgrounds, plus face-free distractor shapes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TIERS = ("small", "medium", "large")


@dataclass
class CorpusParams:
    resolution: int = 128
    faces: tuple = (1, 10)  # inclusive range of faces per scene
    tier_mix: tuple = (0.2, 0.3, 0.5)  # small / medium / large
    tier_areas: tuple = (32 ** 2, 96 ** 2)  # small < a0 <= medium < a1 <= large
    min_side: int = 8
    aspect: tuple = (1.1, 1.4)  # face height / width
    distractors: tuple = (2, 6)
    occlusion: float = 0.0  # probability a face gets a partial occluder
    center_single: bool = False  # one face centred in the image

    def __post_init__(self):
        self.faces, self.tier_mix = tuple(self.faces), tuple(self.tier_mix)
        self.tier_areas, self.aspect, self.distractors = tuple(self.tier_areas), tuple(self.aspect), tuple(self.distractors)
        if len(self.tier_mix) != 3 or abs(sum(self.tier_mix) - 1) > 1e-9 or min(self.tier_mix) < 0:
            raise ValueError("tier_mix must be three non-negative fractions summing to 1")
        if not 1 <= self.faces[0] <= self.faces[1]:
            raise ValueError("faces range must satisfy 1 <= lo <= hi")
        for t, frac in enumerate(self.tier_mix):
            if frac > 0:
                lo, hi = self.area_range(t)
                if lo > hi:
                    raise ValueError(f"tier {TIERS[t]!r} faces cannot fit a {self.resolution}px image")

    def max_area(self):
        # largest box with the minimum aspect that fits inside the image
        w = min(self.resolution, self.resolution / self.aspect[0])
        return int(w * w * self.aspect[0])

    def area_range(self, tier):
        lo = [self.min_side ** 2 * self.aspect[0], self.tier_areas[0], self.tier_areas[1]][tier]
        hi = [self.tier_areas[0] - 1, self.tier_areas[1] - 1, self.max_area()][tier]
        return lo, min(hi, self.max_area())


def tier_of(box, tier_areas=(32 ** 2, 96 ** 2)):
    area = (box[2] - box[0]) * (box[3] - box[1])
    return TIERS[int(area >= tier_areas[0]) + int(area >= tier_areas[1])]


@dataclass
class SynthScene:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    gt_boxes: np.ndarray  # (N, 4) float64 x1y1x2y2
    tiers: list = field(default_factory=list)
    seed: tuple = ()

    def to_bytes(self):
        return self.image.tobytes() + self.gt_boxes.tobytes() + ",".join(self.tiers).encode()


def _background(rng, res):
    coarse = rng.uniform(0.15, 0.85, size=(3, 8, 8))
    idx = np.minimum((np.arange(res) * 8) // res, 7)
    img = coarse[:, idx][:, :, idx]
    yy, xx = np.mgrid[0:res, 0:res] / res
    freq, phase = rng.uniform(2, 12, 2), rng.uniform(0, 2 * np.pi, 2)
    img = img + 0.08 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase[0])
    return img + rng.normal(0, 0.03, size=(3, res, res))


def _soft_ellipse(res, cx, cy, rx, ry, soft=1.5):
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1 - d) * min(rx, ry) / soft, 0, 1)


def _draw_face(img, rng, box):
    res = img.shape[-1]
    x1, y1, x2, y2 = box
    cx, cy, rx, ry = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2, (y2 - y1) / 2
    skin = np.array([0.85, 0.62, 0.5]) + rng.normal(0, 0.05, 3)
    m = _soft_ellipse(res, cx, cy, rx, ry)
    img[:] = img * (1 - m) + skin[:, None, None] * m
    for ex in (cx - 0.38 * rx, cx + 0.38 * rx):
        e = _soft_ellipse(res, ex, cy - 0.2 * ry, max(0.14 * rx, 0.7), max(0.1 * ry, 0.7), soft=0.8)
        img[:] = img * (1 - e) + 0.08 * e
    mouth = _soft_ellipse(res, cx, cy + 0.45 * ry, max(0.35 * rx, 0.8), max(0.07 * ry, 0.6), soft=0.8)
    img[:] = img * (1 - mouth) + np.array([0.5, 0.1, 0.1])[:, None, None] * mouth


def _draw_distractor(img, rng):
    res = img.shape[-1]
    color = rng.uniform(0, 1, 3)[:, None, None]
    w, h = rng.uniform(4, res / 3, 2)
    x, y = rng.uniform(0, res - w), rng.uniform(0, res - h)
    if rng.random() < 0.5:
        m = np.zeros((res, res))
        m[int(y):int(y + h), int(x):int(x + w)] = 1.0
    else:  # plain blob without facial marks
        m = _soft_ellipse(res, x + w / 2, y + h / 2, w / 2, h / 2)
    img[:] = img * (1 - m) + color * m


def _sample_box(rng, p: CorpusParams, tier):
    lo, hi = p.area_range(tier)
    area = rng.uniform(lo, hi)
    aspect = rng.uniform(*p.aspect)
    w = np.sqrt(area / aspect)
    h = w * aspect
    scale = min(1.0, p.resolution / h, p.resolution / w)
    w, h = w * scale, h * scale
    if p.center_single:
        x, y = (p.resolution - w) / 2, (p.resolution - h) / 2
    else:
        x, y = rng.uniform(0, p.resolution - w), rng.uniform(0, p.resolution - h)
    return np.array([x, y, x + w, y + h])


def _overlap(box, boxes):
    if not boxes:
        return False
    b = np.asarray(boxes)
    iw = np.minimum(box[2], b[:, 2]) - np.maximum(box[0], b[:, 0])
    ih = np.minimum(box[3], b[:, 3]) - np.maximum(box[1], b[:, 1])
    return bool(np.any((iw > 0) & (ih > 0)))


def generate_scene(params: CorpusParams, seed, index=0):
    rng = np.random.default_rng([seed, index])
    p, res = params, params.resolution
    img = _background(rng, res)
    for _ in range(rng.integers(p.distractors[0], p.distractors[1] + 1)):
        _draw_distractor(img, rng)
    n = 1 if p.center_single else int(rng.integers(p.faces[0], p.faces[1] + 1))
    boxes, tiers = [], []
    for _ in range(n):
        tier = int(rng.choice(3, p=p.tier_mix))
        for _attempt in range(30):
            box = _sample_box(rng, p, tier)
            if not _overlap(box, boxes):
                break
        boxes.append(box)
        tiers.append(TIERS[tier])
    # paint larger faces first so small ones stay visible on overlap
    for i in sorted(range(n), key=lambda i: -(boxes[i][2] - boxes[i][0]) * (boxes[i][3] - boxes[i][1])):
        _draw_face(img, rng, boxes[i])
        if rng.random() < p.occlusion:
            x1, y1, x2, y2 = boxes[i]
            m = np.zeros((res, res))
            m[int(y1):int((y1 + y2) / 2), int(x1):int((x1 + x2) / 2)] = 1.0
            img[:] = img * (1 - m) + rng.uniform(0, 1, 3)[:, None, None] * m
    img = np.clip(img, 0, 1).astype(np.float32)
    gt = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return SynthScene(img, gt, [tier_of(b, p.tier_areas) for b in gt], (seed, index))


def generate_corpus(n, params: CorpusParams | None = None, seed=0):
    """Deterministic list of ``n`` scenes; scene i depends only on (seed, i, params)."""
    if n <= 0:
        raise ValueError("n must be positive")
    params = params or CorpusParams()
    return [generate_scene(params, seed, i) for i in range(n)]


def split(scenes, frac=0.5):
    k = int(round(len(scenes) * frac))
    return scenes[:k], scenes[k:]


def batches(scenes, batch_size, rng=None):
    """Yield (images, gt list) batches; shuffled when ``rng`` is given."""
    import torch

    order = np.arange(len(scenes)) if rng is None else rng.permutation(len(scenes))
    for i in range(0, len(order), batch_size):
        chunk = [scenes[j] for j in order[i:i + batch_size]]
        yield torch.from_numpy(np.stack([s.image for s in chunk])), [s.gt_boxes for s in chunk]
