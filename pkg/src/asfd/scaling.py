"""Compound scaling of the detector family and exact cost accounting.

Costs are computed analytically from a layer description derived from the
detector config; ``count_*`` never instantiates the network."""
from __future__ import annotations

import math
import platform
import statistics
import time
from dataclasses import dataclass, field

import torch

from .autofem import N_LEVELS, STRIDES, AutoFemBundle, reference_bundle
from .detector import BackboneSpec, Detector, DetectorConfig, HeadSpec, padded_resolution
from .nas_core import DEFAULT_OPS

VGA = (640, 480)


def round8(x):
    return max(8, int(8 * round(x / 8)))


@dataclass
class ScalingCoefficients:
    """Growth rules for D_phi relative to D0 (all config-exposed)."""

    base_resolution: int = 512
    resolution_step: int = 128
    base_width: int = 32
    width_growth: float = 1.4
    base_backbone_widths: tuple = (16, 24, 32, 48, 64, 96)
    backbone_width_growth: float = 1.4
    base_backbone_depth: int = 1
    backbone_depth_every: int = 2  # +1 conv per stage every this many phi
    base_fpn_repeats: int = 1
    fpn_repeats_every: int = 3
    base_head_depth: int = 2
    head_depth_every: int = 2
    embed_dim: int = 16
    max_phi: int = 6


@dataclass
class ScaleConfig:
    phi: int
    resolution: int
    backbone: BackboneSpec
    fpn_repeats: int
    width: int
    head: HeadSpec

    def detector_config(self, **kw):
        return DetectorConfig(resolution=self.resolution, backbone=self.backbone, width=self.width,
                              fpn="autofem", cpm="autofem", fpn_repeats=self.fpn_repeats, head=self.head, **kw)


def scale_config(phi, coef: ScalingCoefficients | None = None) -> ScaleConfig:
    coef = coef or ScalingCoefficients()
    if not isinstance(phi, int) or not 0 <= phi <= coef.max_phi:
        raise ValueError(f"phi must be an integer in [0, {coef.max_phi}]")
    bw = coef.backbone_width_growth ** phi
    depth = coef.base_backbone_depth + phi // coef.backbone_depth_every
    backbone = BackboneSpec(
        stem_width=round8(coef.base_backbone_widths[0] * bw),
        widths=tuple(round8(w * bw) for w in coef.base_backbone_widths),
        depths=(depth,) * N_LEVELS,
    )
    width = round8(coef.base_width * coef.width_growth ** phi)
    head = HeadSpec(depth=coef.base_head_depth + phi // coef.head_depth_every, width=width, embed_dim=coef.embed_dim)
    res = coef.base_resolution + coef.resolution_step * phi
    if res % STRIDES[-1]:
        raise ValueError(f"resolution {res} is not divisible by {STRIDES[-1]}")
    return ScaleConfig(phi, res, backbone, coef.base_fpn_repeats + phi // coef.fpn_repeats_every, width, head)


# ---- layer description -------------------------------------------------

@dataclass
class ConvDesc:
    name: str
    cin: int
    cout: int
    k: int = 1
    groups: int = 1
    bias: bool = True
    outputs: list = field(default_factory=list)  # (h, w) of every application

    def params(self):
        return self.cout * (self.cin // self.groups) * self.k * self.k + (self.cout if self.bias else 0)

    def flops(self):
        per_pixel = self.cout * (self.cin // self.groups) * self.k * self.k
        return sum(per_pixel * h * w for h, w in self.outputs)


@dataclass
class ParamDesc:
    """Non-conv parameters (norm affine terms, class weights)."""

    name: str
    numel: int
    mac_per_use: int = 0
    uses: int = 0

    def params(self):
        return self.numel

    def flops(self):
        return self.mac_per_use * self.uses


def _op_layers(prefix, op, c, hw):
    spec = DEFAULT_OPS[op]
    if spec.kind in ("none", "identity"):
        return []
    if spec.kind == "conv":
        return [ConvDesc(f"{prefix}.conv", c, c, spec.kernel, outputs=[hw])]
    return [ConvDesc(f"{prefix}.dw", c, c, spec.kernel, groups=c, bias=False, outputs=[hw]),
            ConvDesc(f"{prefix}.pw", c, c, 1, outputs=[hw])]


def describe_detector(cfg: DetectorConfig, bundle: AutoFemBundle | None = None):
    """Layer list mirroring ``Detector(cfg, bundle)`` at ``cfg.resolution``."""
    if cfg.fpn == "search" or cfg.cpm == "search":
        raise ValueError("search supernets have unresolved (sampled) structure; derive a bundle first")
    res = padded_resolution(cfg.resolution)
    sizes = [(res // s, res // s) for s in STRIDES]
    layers = []
    bb = cfg.backbone
    layers.append(ConvDesc("stem", 3, bb.stem_width, 3, bias=False, outputs=[(res // 2, res // 2)]))
    layers.append(ParamDesc("stem.bn", 2 * bb.stem_width))
    cin = bb.stem_width
    for i, (w, d) in enumerate(zip(bb.widths, bb.depths)):
        for j in range(d):
            layers.append(ConvDesc(f"stage{i}.{j}", cin, w, 3, bias=False, outputs=[sizes[i]]))
            layers.append(ParamDesc(f"stage{i}.{j}.bn", 2 * w))
            cin = w
    c = cfg.width
    layers += [ConvDesc(f"lateral{i}", w, c, 1, outputs=[sizes[i]]) for i, w in enumerate(bb.widths)]

    if cfg.fpn == "plain":
        layers += [ConvDesc(f"fpn.lateral{i}", c, c, 1, outputs=[sizes[i]]) for i in range(N_LEVELS)]
    elif cfg.fpn == "autofem":
        for r in range(cfg.fpn_repeats):
            for lvl, conns in enumerate(bundle.fpn_spec.levels):
                for n, conn in enumerate(conns):
                    pre = f"fpn{r}.{lvl}.{n}"
                    if conn.kind == "bottom_up":
                        layers.append(ConvDesc(f"{pre}.down", c, c, 3, outputs=[sizes[lvl]]))
                    layers += _op_layers(pre, conn.op, c, sizes[lvl])
    if cfg.cpm == "autofem":
        for lvl, g in enumerate(bundle.cpm_genotypes):
            for node, inputs in g.nodes:
                for src, op in inputs:
                    layers += _op_layers(f"cpm{lvl}.{node}_{src}", op, c, sizes[lvl])
            layers.append(ConvDesc(f"cpm{lvl}.project", len(g.output_nodes()) * c, c, 1, outputs=[sizes[lvl]]))

    shots = 1 if (cfg.fpn == "none" and cfg.cpm == "none") else 2
    head_outputs = sizes * shots
    h = cfg.head
    for branch in ("loc", "cls"):
        for i in range(h.depth):
            layers.append(ConvDesc(f"{branch}_trunk{i}", c if i == 0 else h.width, h.width, 3, outputs=list(head_outputs)))
    layers.append(ConvDesc("loc_out", h.width, 4, 3, outputs=list(head_outputs)))
    layers.append(ConvDesc("cls_out", h.width, h.embed_dim, 3, outputs=list(head_outputs)))
    n_anchors = sum(a * b for a, b in sizes)
    if cfg.classifier == "margin_cos":
        layers.append(ParamDesc("class_weight", 2 * h.embed_dim))
    else:
        layers.append(ParamDesc("linear", 2 * h.embed_dim + 2, mac_per_use=2 * h.embed_dim, uses=n_anchors * shots))
    return layers


def count_params(layers):
    return sum(layer.params() for layer in layers)


def count_flops(layers):
    """Multiply-adds (not 2x MACs)."""
    return sum(layer.flops() for layer in layers)


@dataclass
class CostReport:
    model: str
    params: int
    flops: int
    latency_ms: float | None = None
    hardware: str | None = None

    def row(self):
        return {"model": self.model, "params": self.params, "flops": self.flops,
                "latency_ms": self.latency_ms, "hardware": self.hardware}


def family(max_phi=6, coef=None, bundle_fn=reference_bundle, classifier="margin_cos"):
    """(name, ScaleConfig, DetectorConfig, bundle) for D0..D_max_phi."""
    out = []
    for phi in range(max_phi + 1):
        sc = scale_config(phi, coef)
        cfg = sc.detector_config(classifier=classifier)
        out.append((f"D{phi}", sc, cfg, bundle_fn(sc.width)))
    return out


def cost_report(name, cfg, bundle, resolution=None):
    if resolution is not None:
        cfg = DetectorConfig(**{**cfg.__dict__, "resolution": resolution})
    layers = describe_detector(cfg, bundle)
    return CostReport(name, count_params(layers), count_flops(layers))


def hardware_descriptor():
    return f"{platform.machine()} {platform.processor() or 'cpu'} torch{torch.__version__} threads={torch.get_num_threads()}"


def vga_resolution():
    """640x480 padded to a square multiple of the coarsest stride."""
    return padded_resolution(max(VGA))


@torch.inference_mode()
def latency_bench(model: Detector, resolution=None, warmup_iters=3, timed_iters=30):
    """Median single-image forward time in milliseconds."""
    if timed_iters <= 0:
        raise ValueError("timed_iters must be positive")
    res = resolution or model.cfg.resolution
    x = torch.rand(1, 3, res, res)
    model.eval()
    for _ in range(warmup_iters):
        model(x)
    times = []
    for _ in range(timed_iters):
        t0 = time.perf_counter()
        model(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def param_oracle(model: torch.nn.Module):
    """Brute-force parameter count over every tensor."""
    return sum(p.numel() for p in model.parameters())


def flop_oracle(model: Detector, resolution=None):
    """Multiply-adds measured by hooking every Conv2d/Linear during a forward."""
    total = 0

    def conv_hook(m, inp, out):
        nonlocal total
        total += out.numel() * (m.in_channels // m.groups) * math.prod(m.kernel_size)

    def linear_hook(m, inp, out):
        nonlocal total
        total += out.numel() * m.in_features

    hooks = []
    for m in model.modules():
        if isinstance(m, torch.nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, torch.nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    res = resolution or model.cfg.resolution
    with torch.inference_mode():
        model.eval()
        model(torch.zeros(1, 3, res, res))
    for h in hooks:
        h.remove()
    return total
