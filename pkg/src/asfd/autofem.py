"""AutoFEM: cross-scale fusion (FPN stage) cascaded with per-level context
cells (CPM stage), in searchable and derived forms, plus a plain-FPN baseline."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nas_core import (
    CONV1X1_OP,
    DEFAULT_OPS,
    NONE_OP,
    ArchParams,
    DerivedCell,
    Genotype,
    OpCounter,
    SearchCell,
    _softmax,
    build_op,
    check_fraction,
    choose_single_path,
    mixed_edge_forward,
    single_op_edge_forward,
)

STRIDES = (4, 8, 16, 32, 64, 128)
N_LEVELS = len(STRIDES)
KINDS = {"lateral": 0, "top_down": 1, "bottom_up": -1}


def level_sizes(resolution, strides=STRIDES):
    return [resolution // s for s in strides]


def check_pyramid(levels, width=None):
    if len(levels) != N_LEVELS:
        raise ValueError(f"pyramid must have {N_LEVELS} levels, got {len(levels)}")
    w = levels[0].shape[1] if width is None else width
    for i, x in enumerate(levels):
        if x.shape[1] != w:
            raise ValueError(f"level {i} width {x.shape[1]} != {w}")
        if i and (levels[i - 1].shape[-1] != 2 * x.shape[-1] or levels[i - 1].shape[-2] != 2 * x.shape[-2]):
            raise ValueError(f"level {i} spatial size is not half of level {i - 1}")
    return levels


@dataclass(frozen=True)
class Connection:
    source: int
    kind: str  # lateral | top_down | bottom_up
    op: int


@dataclass
class FpnCellSpec:
    """Per-output-level incoming connections; outputs are summed."""

    levels: list  # list[list[Connection]]
    aggregation: str = "sum"

    def __post_init__(self):
        self.levels = [[c if isinstance(c, Connection) else Connection(*c) for c in conns] for conns in self.levels]
        self.validate()

    def validate(self):
        if len(self.levels) != N_LEVELS:
            raise ValueError(f"FPN spec needs {N_LEVELS} output levels")
        if self.aggregation != "sum":
            raise ValueError("only sum aggregation is supported")
        for lvl, conns in enumerate(self.levels):
            if not conns:
                raise ValueError(f"output level {lvl} has no source")
            for c in conns:
                if c.kind not in KINDS:
                    raise ValueError(f"unknown connection kind {c.kind!r}")
                if c.source != lvl + KINDS[c.kind] or not 0 <= c.source < N_LEVELS:
                    raise ValueError(f"level {lvl}: {c.kind} connection cannot read level {c.source}")
                if c.kind == "lateral" and c.op != CONV1X1_OP:
                    raise ValueError("lateral connections must use the 1x1 conv op")
                if c.op == NONE_OP:
                    raise ValueError("derived connections cannot use the none op")

    def to_dict(self):
        return {
            "aggregation": self.aggregation,
            "levels": [[[c.source, c.kind, c.op] for c in conns] for conns in self.levels],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([[Connection(*c) for c in conns] for conns in d["levels"]], d.get("aggregation", "sum"))

    @classmethod
    def lateral_only(cls):
        return cls([[Connection(i, "lateral", CONV1X1_OP)] for i in range(N_LEVELS)])

    @classmethod
    def top_down_chain(cls, op=CONV1X1_OP):
        levels = []
        for i in range(N_LEVELS):
            conns = [Connection(i, "lateral", CONV1X1_OP)]
            if i + 1 < N_LEVELS:
                conns.append(Connection(i + 1, "top_down", op))
            levels.append(conns)
        return cls(levels)

    def dependency(self, repeats=1):
        """reach[out] = set of input levels that can influence output ``out``."""
        reach = [{i} for i in range(N_LEVELS)]
        for _ in range(repeats):
            reach = [set().union(*(reach[c.source] for c in conns)) for conns in self.levels]
        return reach


def _resampler(kind, width):
    if kind == "top_down":
        return nn.Upsample(scale_factor=2, mode="nearest")
    if kind == "bottom_up":
        return nn.Conv2d(width, width, 3, stride=2, padding=1)
    return nn.Identity()


class DerivedFPN(nn.Module):
    def __init__(self, spec: FpnCellSpec, width, repeats=1, ops=DEFAULT_OPS):
        super().__init__()
        self.spec, self.width, self.repeats = spec, width, repeats
        self.layers = nn.ModuleList()
        for _ in range(repeats):
            layer = nn.ModuleList()
            for conns in spec.levels:
                layer.append(nn.ModuleList(
                    nn.Sequential(_resampler(c.kind, width), build_op(ops[c.op], width)) for c in conns
                ))
            self.layers.append(layer)

    def init_identity(self):
        """Lateral 1x1 convs become identity maps, cross-level ops are zeroed."""
        with torch.no_grad():
            for layer in self.layers:
                for conns, mods in zip(self.spec.levels, layer):
                    for c, m in zip(conns, mods):
                        for p in m.parameters():
                            p.zero_()
                        if c.kind == "lateral":
                            m[1].conv.weight.copy_(torch.eye(self.width)[:, :, None, None])
        return self

    def forward(self, levels):
        for layer in self.layers:
            levels = [
                sum(m(levels[c.source]) for c, m in zip(conns, mods))
                for conns, mods in zip(self.spec.levels, layer)
            ]
        return levels


class PlainFPN(nn.Module):
    """Baseline top-down FPN: lateral 1x1 plus upsampled coarser output."""

    def __init__(self, width):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(width, width, 1) for _ in range(N_LEVELS))

    def forward(self, levels):
        out = [None] * N_LEVELS
        for i in reversed(range(N_LEVELS)):
            out[i] = self.lateral[i](levels[i])
            if i + 1 < N_LEVELS:
                out[i] = out[i] + F.interpolate(out[i + 1], scale_factor=2, mode="nearest")
        return out


class SearchFPN(nn.Module):
    """Relaxed FPN layer: fixed lateral 1x1 per level plus searchable
    top-down / bottom-up edges from the immediate neighbours."""

    def __init__(self, width, ops=DEFAULT_OPS, k=4, mode="single_path"):
        super().__init__()
        check_fraction(width, k)
        self.width, self.k, self.mode, self.op_specs = width, k, mode, tuple(ops)
        self.edges = []  # (out_level, source, kind)
        for lvl in range(N_LEVELS):
            if lvl + 1 < N_LEVELS:
                self.edges.append((lvl, lvl + 1, "top_down"))
            if lvl > 0:
                self.edges.append((lvl, lvl - 1, "bottom_up"))
        self.lateral = nn.ModuleList(build_op(ops[CONV1X1_OP], width) for _ in range(N_LEVELS))
        self.resample = nn.ModuleList(_resampler(kind, width) for _, _, kind in self.edges)
        self.edge_ops = nn.ModuleList(
            nn.ModuleList(build_op(s, width // k) for s in self.op_specs) for _ in self.edges
        )
        self.arch_alpha = nn.Parameter(1e-3 * torch.randn(len(self.edges), len(ops)))
        self.arch_beta = nn.Parameter(1e-3 * torch.randn(len(self.edges)))
        self.counter = OpCounter()

    def incoming(self, lvl):
        return [i for i, (out, _, _) in enumerate(self.edges) if out == lvl]

    def forward(self, levels):
        out = []
        for lvl in range(N_LEVELS):
            y = self.lateral[lvl](levels[lvl])
            idx = self.incoming(lvl)
            if self.mode == "single_path":
                e_local, o, w = choose_single_path(self.arch_alpha, self.arch_beta, idx)
                e = idx[e_local]
                src = self.resample[e](levels[self.edges[e][1]])
                y = y + single_op_edge_forward(src, w, self.edge_ops[e][o], self.k, self.counter)
            else:
                b = F.softmax(self.arch_beta[idx], dim=0)
                for j, e in enumerate(idx):
                    src = self.resample[e](levels[self.edges[e][1]])
                    y = y + b[j] * mixed_edge_forward(src, self.arch_alpha[e], self.edge_ops[e], self.k, self.counter)
            out.append(y)
        return out

    def arch_params(self):
        return ArchParams.from_tensors(self.arch_alpha, self.arch_beta)

    def derive(self, retain_k=2):
        """Per level keep the lateral 1x1 and the ``retain_k`` strongest
        neighbour edges, each with its strongest non-none op."""
        arch = self.arch_params()
        levels = []
        for lvl in range(N_LEVELS):
            idx = self.incoming(lvl)
            b = _softmax(arch.beta[idx])
            ranked = sorted(range(len(idx)), key=lambda j: (-b[j], idx[j]))[:retain_k]
            conns = [Connection(lvl, "lateral", CONV1X1_OP)]
            for j in sorted(ranked):
                e = idx[j]
                a = arch.alpha[e].copy()
                a[NONE_OP] = -float("inf")
                conns.append(Connection(self.edges[e][1], self.edges[e][2], int(a.argmax())))
            levels.append(conns)
        return FpnCellSpec(levels)


class CpmBank(nn.Module):
    def __init__(self, cells):
        super().__init__()
        if len(cells) != N_LEVELS:
            raise ValueError(f"CPM bank needs {N_LEVELS} cells, got {len(cells)}")
        self.cells = nn.ModuleList(cells)

    @classmethod
    def derived(cls, genotypes, ops=DEFAULT_OPS):
        if len(genotypes) != N_LEVELS:
            raise ValueError(f"CPM bank needs {N_LEVELS} genotypes, got {len(genotypes)}")
        widths = {g.width for g in genotypes}
        if len(widths) != 1 or any(g.cell_kind != "cpm" for g in genotypes):
            raise ValueError("CPM genotypes must be cpm cells of identical width")
        return cls([DerivedCell(g, ops) for g in genotypes])

    @classmethod
    def searchable(cls, width, n_nodes=6, ops=DEFAULT_OPS, k=4, mode="single_path"):
        return cls([SearchCell(width, n_nodes, ops, k, mode) for _ in range(N_LEVELS)])

    def forward(self, levels):
        return [cell(x) for cell, x in zip(self.cells, levels)]


def cpm_forward(x, cell):
    return cell(x)


def fpn_forward(levels, fpn):
    check_pyramid(levels)
    out = fpn(levels)
    return check_pyramid(out, levels[0].shape[1])


@dataclass
class AutoFemBundle:
    """Persisted search result: one FPN spec plus six CPM genotypes."""

    fpn_spec: FpnCellSpec | None
    cpm_genotypes: list | None
    width: int

    def __post_init__(self):
        if self.cpm_genotypes is not None and len(self.cpm_genotypes) != N_LEVELS:
            raise ValueError(f"bundle needs {N_LEVELS} CPM genotypes")

    def to_dict(self):
        return {
            "width": self.width,
            "fpn_spec": None if self.fpn_spec is None else self.fpn_spec.to_dict(),
            "cpm_genotypes": None if self.cpm_genotypes is None else [g.to_dict() for g in self.cpm_genotypes],
        }

    @classmethod
    def from_dict(cls, d):
        fpn, cpm = d.get("fpn_spec"), d.get("cpm_genotypes")
        return cls(
            None if fpn is None else FpnCellSpec.from_dict(fpn),
            None if cpm is None else [Genotype.from_dict(g) for g in cpm],
            d["width"],
        )


class AutoFEM(nn.Module):
    """FPN stage followed by per-level CPM cells; either stage may be absent."""

    def __init__(self, fpn=None, cpm=None):
        super().__init__()
        self.fpn, self.cpm = fpn, cpm

    @classmethod
    def from_bundle(cls, bundle: AutoFemBundle, repeats=1, ops=DEFAULT_OPS):
        fpn = None if bundle.fpn_spec is None else DerivedFPN(bundle.fpn_spec, bundle.width, repeats, ops)
        cpm = None if bundle.cpm_genotypes is None else CpmBank.derived(bundle.cpm_genotypes, ops)
        return cls(fpn, cpm)

    def forward(self, levels):
        check_pyramid(levels)
        if self.fpn is not None:
            levels = self.fpn(levels)
        if self.cpm is not None:
            levels = self.cpm(levels)
        return check_pyramid(levels)

    def derive(self, retain_k=2, output_rule="cat_leaf", fpn_retain_k=2):
        fpn = self.fpn.derive(fpn_retain_k) if isinstance(self.fpn, SearchFPN) else None
        searchable_cpm = self.cpm is not None and all(isinstance(c, SearchCell) for c in self.cpm.cells)
        genos = [c.derive(retain_k, output_rule) for c in self.cpm.cells] if searchable_cpm else None
        if fpn is None and genos is None:
            raise TypeError("nothing searchable to derive")
        width = self.fpn.width if fpn is not None else self.cpm.cells[0].width
        return AutoFemBundle(fpn, genos, width)



def reference_bundle(width, n_nodes=6, output_rule="cat_leaf"):
    """Hand-written AutoFEM used when no searched bundle is supplied: both
    neighbours fused with 3x3 convs, and CPM chains whose dilation grows
    towards the high-resolution levels."""
    from .nas_core import op_index

    c3, d2, d3, sep = (op_index(n) for n in ("conv3x3", "conv3x3_d2", "conv3x3_d3", "sep_conv3x3"))
    levels = []
    for i in range(N_LEVELS):
        conns = [Connection(i, "lateral", CONV1X1_OP)]
        if i + 1 < N_LEVELS:
            conns.append(Connection(i + 1, "top_down", c3))
        if i > 0:
            conns.append(Connection(i - 1, "bottom_up", sep))
        levels.append(conns)
    genos = []
    for lvl in range(N_LEVELS):
        big = d3 if lvl < 2 else d2 if lvl < 4 else c3
        nodes = [(1, [(0, big)])]
        for n in range(2, n_nodes + 1):
            nodes.append((n, [(n - 1, c3 if n % 2 else sep), (0, big if n == 2 else CONV1X1_OP)]))
        genos.append(Genotype("cpm", nodes, output_rule, width))
    return AutoFemBundle(FpnCellSpec(levels), genos, width)
