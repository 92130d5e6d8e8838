"""Bilevel architecture search and detector training loops."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .detector import Detector
from .harness.evaluate import evaluate_ap
from .losses import DrmcConfig, drmc_total, match_anchors
from .nas_core import alpha_entropy

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


class DivergenceError(RuntimeError):
    def __init__(self, msg, checkpoint=None, batch=None):
        super().__init__(msg)
        self.checkpoint, self.batch = checkpoint, batch


@dataclass
class TrainSchedule:
    epochs: int = 50
    batch_size: int = 48
    warmup_start: float = 1e-6
    peak_lr: float = 0.015
    warmup_iters: int = 500
    decay_epochs: tuple = (25, 40)
    decay_div: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_grad_norm: float | None = None

    @classmethod
    def reference(cls):
        return cls()

    @classmethod
    def desk(cls, epochs=10, batch_size=8, warmup_iters=50, peak_lr=0.015, clip_grad_norm=5.0):
        # decay points keep the 25/50 and 40/50 ratios; the small unnormalized
        # heads die at the peak rate without a gradient clip
        return cls(epochs=epochs, batch_size=batch_size, warmup_iters=warmup_iters, peak_lr=peak_lr,
                   decay_epochs=(round(epochs * 0.5), round(epochs * 0.8)), clip_grad_norm=clip_grad_norm)


def lr_at(it, iters_per_epoch, sched: TrainSchedule):
    """Linear warmup from warmup_start to peak over warmup_iters, then peak
    divided by decay_div at every decay epoch reached."""
    if it < sched.warmup_iters:
        return sched.warmup_start + (sched.peak_lr - sched.warmup_start) * it / sched.warmup_iters
    lr = sched.peak_lr
    epoch = it // iters_per_epoch
    for e in sched.decay_epochs:
        if epoch >= e:
            lr = lr / sched.decay_div
    return lr


@dataclass
class SearchSchedule:
    total_epochs: int = 50
    arch_start_epoch: int = 20
    arch_lr: float = 0.01
    arch_weight_decay: float = 5e-4
    weights: TrainSchedule = field(default_factory=lambda: TrainSchedule(epochs=50, decay_epochs=()))

    @classmethod
    def reference(cls):
        return cls()

    @classmethod
    def desk(cls, epochs=10, arch_start=4, batch_size=8):
        w = TrainSchedule(epochs=epochs, batch_size=batch_size, warmup_iters=50, decay_epochs=(), clip_grad_norm=5.0)
        return cls(total_epochs=epochs, arch_start_epoch=arch_start, weights=w)


def match_targets(anchors, scenes, pos_iou=0.5, neg_iou=0.4):
    """Per-scene anchor labels (S, A) and regression targets (S, A, 4)."""
    a = anchors.double().numpy() if isinstance(anchors, torch.Tensor) else anchors
    ms = [match_anchors(a, s.gt_boxes, pos_iou, neg_iou) for s in scenes]
    labels = torch.as_tensor(np.stack([m.labels for m in ms]), dtype=torch.long)
    targets = torch.as_tensor(np.stack([m.targets for m in ms]), dtype=torch.float32)
    return labels, targets


class _Batcher:
    """Deterministic shuffled batches with precomputed anchor targets."""

    def __init__(self, model, scenes, batch_size, seed):
        self.scenes, self.batch_size = scenes, batch_size
        self.images = torch.from_numpy(np.stack([s.image for s in scenes]))
        self.labels, self.targets = match_targets(model.anchors, scenes)
        self.rng = np.random.default_rng(seed)

    def bounds(self):
        n, bs = len(self.scenes), self.batch_size
        starts = list(range(0, n, bs))
        if len(starts) > 1 and n - starts[-1] == 1:
            starts.pop()  # a lone trailing sample joins the previous batch (BatchNorm needs >1)
        return list(zip(starts, starts[1:] + [n]))

    def __len__(self):
        return len(self.bounds())

    def epoch(self):
        order = torch.as_tensor(self.rng.permutation(len(self.scenes)))
        for a, b in self.bounds():
            idx = order[a:b]
            yield self.images[idx], self.labels[idx], self.targets[idx]


def model_loss(model: Detector, images, labels, targets, loss_cfg: DrmcConfig):
    first, second = model(images)
    return drmc_total(first, second, model.anchors, labels, targets, loss_cfg)


def _check_finite(value, what, checkpoint, batch):
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged ({value})", checkpoint, batch)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def make_checkpoint(model, optimizer=None, epoch=0, it=0, **extra):
    return {
        "model": copy.deepcopy(model.state_dict()),
        "optimizer": None if optimizer is None else copy.deepcopy(optimizer.state_dict()),
        "position": {"epoch": epoch, "iter": it},
        "config": asdict(model.cfg),
        **extra,
    }


def masked_step(opt):
    """Optimizer step that leaves untouched any architecture entries whose loss
    gradient is exactly zero (edges the single-path forward did not sample),
    so coupled weight decay and Adam moments cannot move them."""
    saved = []
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is None:
                continue
            g = p.grad.reshape(p.shape[0], -1) if p.dim() > 1 else p.grad.reshape(-1, 1)
            frozen = (g == 0).all(1)
            if frozen.any():
                state = {k: v[frozen].clone() for k, v in opt.state.get(p, {}).items()
                         if torch.is_tensor(v) and v.shape == p.shape}
                saved.append((p, frozen, p.detach()[frozen].clone(), state))
    opt.step()
    with torch.no_grad():
        for p, frozen, value, state in saved:
            p[frozen] = value
            for k, v in opt.state[p].items():
                if torch.is_tensor(v) and v.shape == p.shape:
                    v[frozen] = state[k] if k in state else 0  # fresh moments start at zero


def bilevel_search(model: Detector, train_scenes, val_scenes, sched: SearchSchedule,
                   loss_cfg: DrmcConfig | None = None, seed=0, retain_k=2, output_rule="cat_leaf"):
    """First-order alternating search. Weights step on ``train_scenes`` every
    iteration; from ``arch_start_epoch`` on, architecture params also step on
    ``val_scenes`` (Adam). Returns (AutoFemBundle, per-epoch log)."""
    loss_cfg = loss_cfg or DrmcConfig()
    arch, weights = model.arch_parameters(), model.weight_parameters()
    if not arch:
        raise ValueError("model has no architecture parameters (use fpn/cpm='search')")
    ws = sched.weights
    w_opt = torch.optim.SGD(weights, lr=ws.warmup_start, momentum=ws.momentum, weight_decay=ws.weight_decay)
    a_opt = torch.optim.Adam(arch, lr=sched.arch_lr, weight_decay=sched.arch_weight_decay)
    train = _Batcher(model, train_scenes, ws.batch_size, seed)
    val = _Batcher(model, val_scenes, ws.batch_size, seed + 1)
    history, it = [], 0
    last_good = make_checkpoint(model, w_opt, 0, 0)
    model.train()
    for epoch in range(sched.total_epochs):
        update_arch = epoch >= sched.arch_start_epoch
        w_losses, a_losses = [], []
        val_iter = val.epoch()
        for images, labels, targets in train.epoch():
            if update_arch:
                try:
                    v_images, v_labels, v_targets = next(val_iter)
                except StopIteration:
                    val_iter = val.epoch()
                    v_images, v_labels, v_targets = next(val_iter)
                a_opt.zero_grad()
                loss = model_loss(model, v_images, v_labels, v_targets, loss_cfg)["total"]
                _check_finite(loss.item(), "architecture loss", last_good, v_images)
                loss.backward()
                masked_step(a_opt)
                a_losses.append(loss.item())
            _set_lr(w_opt, lr_at(it, len(train), ws))
            w_opt.zero_grad()
            loss = model_loss(model, images, labels, targets, loss_cfg)["total"]
            _check_finite(loss.item(), "weight loss", last_good, images)
            loss.backward()
            for p in arch:  # weight steps never touch the architecture
                p.grad = None
            if ws.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(weights, ws.clip_grad_norm)
            w_opt.step()
            w_losses.append(loss.item())
            it += 1
        entropies = _entropies(model)
        flat = np.concatenate([np.asarray(v) for v in entropies.values()]) if entropies else np.zeros(0)
        history.append({
            "epoch": epoch + 1,
            "weight_loss": float(np.mean(w_losses)),
            "arch_loss": float(np.mean(a_losses)) if a_losses else None,
            "arch_updates": update_arch,
            "median_alpha_entropy": float(np.median(flat)) if flat.size else None,
            "alpha_entropy": entropies,
        })
        log.info("search epoch %d weight loss %.4f arch loss %s", epoch + 1, history[-1]["weight_loss"],
                 history[-1]["arch_loss"])
        last_good = make_checkpoint(model, w_opt, epoch + 1, it)
    bundle = model.autofem.derive(retain_k=retain_k, output_rule=output_rule)
    return bundle, history


def _entropies(model):
    out = {}
    for name, p in model.named_parameters():
        if name.endswith("arch_alpha"):
            out[name.rsplit(".", 1)[0]] = alpha_entropy(p).tolist()
    return out


@torch.no_grad()
def predict(model: Detector, scenes, batch_size=16, **nms_kw):
    """Detections per scene index as (N, 5) arrays."""
    out = {}
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        for j, dets in enumerate(model.detect(images, **nms_kw)):
            out[i + j] = np.array([[*d.box, d.score] for d in dets]).reshape(-1, 5)
    return out


def validation_ap(model, scenes, tier_areas=(32 ** 2, 96 ** 2)):
    dets = predict(model, scenes)
    gts = {i: s.gt_boxes for i, s in enumerate(scenes)}
    return evaluate_ap(dets, gts, tier_areas=tier_areas)


def train_detector(model: Detector, train_scenes, val_scenes, sched: TrainSchedule,
                   loss_cfg: DrmcConfig | None = None, seed=0, eval_every=1):
    """SGD with warmup and step decay. Returns (best-AP checkpoint, log)."""
    loss_cfg = loss_cfg or DrmcConfig()
    params = model.weight_parameters()
    opt = torch.optim.SGD(params, lr=sched.warmup_start, momentum=sched.momentum, weight_decay=sched.weight_decay)
    best = make_checkpoint(model, opt, 0, 0, val_ap=None)
    if sched.epochs == 0:
        return best, []
    data = _Batcher(model, train_scenes, sched.batch_size, seed)
    history, it, best_ap = [], 0, -1.0
    for epoch in range(sched.epochs):
        model.train()
        sums, n = {}, 0
        for images, labels, targets in data.epoch():
            _set_lr(opt, lr_at(it, len(data), sched))
            opt.zero_grad()
            out = model_loss(model, images, labels, targets, loss_cfg)
            _check_finite(out["total"].item(), "training loss", best, images)
            out["total"].backward()
            if sched.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, sched.clip_grad_norm)
            opt.step()
            for k, v in out.items():
                if isinstance(v, torch.Tensor):
                    sums[k] = sums.get(k, 0.0) + v.item()
            n += 1
            it += 1
        row = {"epoch": epoch + 1, "lr": lr_at(it - 1, len(data), sched), **{k: v / n for k, v in sums.items()}}
        if val_scenes and ((epoch + 1) % eval_every == 0 or epoch + 1 == sched.epochs):
            report = validation_ap(model, val_scenes)
            row["val_ap"] = report.ap
            if report.ap["overall"] > best_ap:
                best_ap = report.ap["overall"]
                best = make_checkpoint(model, opt, epoch + 1, it, val_ap=report.ap)
        history.append(row)
        log.info("train epoch %d loss %.4f val %s", epoch + 1, row.get("total", float("nan")), row.get("val_ap"))
    if not val_scenes:
        best = make_checkpoint(model, opt, sched.epochs, it, val_ap=None)
    return best, history
