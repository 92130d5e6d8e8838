"""Searchable-cell primitives: candidate ops, mixed edges, partial channels,
single-path sampling and genotype derivation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class OpSpec:
    kind: str  # none | identity | conv | sep_conv
    kernel: int = 1
    dilation: int = 1

    @property
    def name(self):
        if self.kind in ("none", "identity"):
            return self.kind
        base = f"{self.kind}{self.kernel}x{self.kernel}"
        return base if self.dilation == 1 else f"{base}_d{self.dilation}"

    def to_list(self):
        return [self.kind, self.kernel, self.dilation]


# Order is part of the genotype contract: op indices refer to this list.
DEFAULT_OPS = (
    OpSpec("none"),
    OpSpec("identity"),
    OpSpec("conv", 1),
    OpSpec("conv", 3),
    OpSpec("conv", 3, 2),
    OpSpec("conv", 3, 3),
    OpSpec("sep_conv", 3),
)

NONE_OP = 0
CONV1X1_OP = 2


def op_set_signature(ops=DEFAULT_OPS) -> str:
    payload = json.dumps([op.to_list() for op in ops], separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def op_index(name: str, ops=DEFAULT_OPS) -> int:
    for i, op in enumerate(ops):
        if op.name == name:
            return i
    raise KeyError(name)


class Zero(nn.Module):
    def forward(self, x):
        return x.mul(0.0)


class ConvOp(nn.Module):
    """Conv followed by ReLU; spatial size preserved."""

    def __init__(self, channels, kernel, dilation=1, separable=False):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        if separable:
            self.conv = nn.Sequential(
                nn.Conv2d(channels, channels, kernel, padding=pad, dilation=dilation,
                          groups=channels, bias=False),
                nn.Conv2d(channels, channels, 1, bias=True),
            )
        else:
            self.conv = nn.Conv2d(channels, channels, kernel, padding=pad, dilation=dilation)

    def forward(self, x):
        return F.relu(self.conv(x))


def build_op(spec: OpSpec, channels: int) -> nn.Module:
    if spec.kind == "none":
        return Zero()
    if spec.kind == "identity":
        return nn.Identity()
    if spec.kind == "conv":
        return ConvOp(channels, spec.kernel, spec.dilation)
    if spec.kind == "sep_conv":
        return ConvOp(channels, spec.kernel, spec.dilation, separable=True)
    raise ValueError(f"unknown op kind {spec.kind!r}")


class OpCounter:
    """Counts candidate-op evaluations (instrumentation for single-path tests)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def channel_shuffle(x, groups):
    b, c, h, w = x.shape
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


def check_fraction(channels, k):
    if k < 1 or channels % k != 0:
        raise ValueError(f"channel fraction 1/{k} does not divide width {channels}")


def mixed_edge_forward(x, alpha, ops, k=4, counter=None):
    """Partial-channel mixed edge: the first C/k channels go through the
    softmax(alpha)-weighted op mixture, the rest bypass, then channels are
    shuffled in k groups so a different slice is sampled by the next edge."""
    c = x.shape[1]
    check_fraction(c, k)
    if alpha.shape[-1] != len(ops):
        raise ValueError(f"alpha has {alpha.shape[-1]} entries for {len(ops)} ops")
    weights = F.softmax(alpha, dim=-1)
    sampled, bypass = x[:, : c // k], x[:, c // k:]
    out = sum(w * op(sampled) for w, op in zip(weights, ops))
    if counter is not None:
        counter.count += len(ops)
    if k == 1:
        return out
    return channel_shuffle(torch.cat([out, bypass], dim=1), k)


def single_op_edge_forward(x, weight, op, k=4, counter=None):
    """Edge evaluated with a single sampled op scaled by its mixture weight."""
    c = x.shape[1]
    check_fraction(c, k)
    if counter is not None:
        counter.count += 1
    sampled, bypass = x[:, : c // k], x[:, c // k:]
    out = weight * op(sampled)
    if k == 1:
        return out
    return channel_shuffle(torch.cat([out, bypass], dim=1), k)


@dataclass(frozen=True)
class CellTopology:
    """DAG of a searchable cell. States 0..n_inputs-1 are cell inputs; node j
    (numbered from n_inputs) may read any earlier state."""

    n_inputs: int
    n_nodes: int

    @property
    def node_ids(self):
        return list(range(self.n_inputs, self.n_inputs + self.n_nodes))

    @property
    def edges(self):
        return [(node, src) for node in self.node_ids for src in range(node)]

    def incoming(self, node):
        """Edge indices (into ``edges``) feeding ``node``."""
        return [i for i, (n, _) in enumerate(self.edges) if n == node]


@dataclass
class ArchParams:
    alpha: np.ndarray  # (n_edges, n_ops)
    beta: np.ndarray  # (n_edges,), normalized per destination node

    @classmethod
    def from_tensors(cls, alpha, beta):
        return cls(alpha.detach().cpu().double().numpy(), beta.detach().cpu().double().numpy())


def _softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def choose_single_path(alpha, beta, edge_ids, exclude=(NONE_OP,)):
    """Pick the (edge, op) maximizing softmax(beta)_e * softmax(alpha_e)_o.

    Ties go to the lowest edge index, then the lowest op index. Ops listed in
    ``exclude`` are never sampled (a zero path carries no gradient)."""
    b = F.softmax(beta[edge_ids], dim=0)
    a = F.softmax(alpha[edge_ids], dim=-1)
    with torch.no_grad():
        score = (b[:, None] * a).clone()
        for o in exclude:
            score[:, o] = -1.0
        flat = int(torch.argmax(score.reshape(-1)))  # first maximum
    e_local, o = divmod(flat, alpha.shape[-1])
    return e_local, o, b[e_local] * a[e_local, o]


@dataclass
class Genotype:
    cell_kind: str  # fpn | cpm
    nodes: list  # [(node_id, [(input_id, op_index), ...]), ...]
    output_rule: str  # cat_all | cat_leaf
    width: int
    n_inputs: int = 1
    op_names: tuple = field(default_factory=lambda: tuple(op.name for op in DEFAULT_OPS))

    def __post_init__(self):
        self.nodes = [(int(n), [(int(s), int(o)) for s, o in ins]) for n, ins in self.nodes]
        self.validate()

    def validate(self):
        if self.output_rule not in ("cat_all", "cat_leaf"):
            raise ValueError(f"unknown output rule {self.output_rule!r}")
        if self.cell_kind not in ("fpn", "cpm"):
            raise ValueError(f"unknown cell kind {self.cell_kind!r}")
        expect = self.n_inputs
        for node, inputs in self.nodes:
            if node != expect:
                raise ValueError(f"node ids must be consecutive from {self.n_inputs}")
            expect += 1
            if not inputs:
                raise ValueError(f"node {node} has no inputs")
            for src, op in inputs:
                if not 0 <= src < node:
                    raise ValueError(f"node {node} reads non-earlier state {src}")
                if not 0 <= op < len(self.op_names):
                    raise ValueError(f"op index {op} out of range")

    @property
    def node_ids(self):
        return [n for n, _ in self.nodes]

    def leaves(self):
        used = {src for _, ins in self.nodes for src, _ in ins}
        return [n for n in self.node_ids if n not in used]

    def output_nodes(self):
        return self.node_ids if self.output_rule == "cat_all" else self.leaves()

    def concat_width(self):
        return len(self.output_nodes()) * self.width

    def to_dict(self):
        return {
            "cell_kind": self.cell_kind,
            "width": self.width,
            "n_inputs": self.n_inputs,
            "nodes": [{"id": n, "inputs": [[s, o] for s, o in ins]} for n, ins in self.nodes],
            "output_rule": self.output_rule,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            cell_kind=d["cell_kind"],
            nodes=[(n["id"], [tuple(p) for p in n["inputs"]]) for n in d["nodes"]],
            output_rule=d["output_rule"],
            width=d["width"],
            n_inputs=d.get("n_inputs", 1),
        )


def edge_scores(arch: ArchParams, topology: CellTopology):
    """Per-edge selection score and best non-none op.

    Edges are ranked by their normalized edge weight softmax(beta) within the
    destination node; the op is argmax over non-none alpha. Both are unchanged
    by positive scaling or shifting of alpha."""
    scores, best_ops = {}, {}
    for node in topology.node_ids:
        idx = topology.incoming(node)
        b = _softmax(arch.beta[idx])
        for j, e in enumerate(idx):
            a = np.array(arch.alpha[e], dtype=np.float64)
            a[NONE_OP] = -np.inf
            best_ops[e] = int(np.argmax(a))
            scores[e] = float(b[j])
    return scores, best_ops


def derive_genotype(arch: ArchParams, topology: CellTopology, retain_k=2,
                    output_rule="cat_leaf", width=256, cell_kind="cpm") -> Genotype:
    """Discretize a relaxed cell: keep the ``retain_k`` strongest incoming
    edges per node (fewer when a node has fewer candidates), each with its
    strongest non-none op."""
    if retain_k < 1:
        raise ValueError("retain_k must be >= 1")
    scores, best_ops = edge_scores(arch, topology)
    edges = topology.edges
    nodes = []
    for node in topology.node_ids:
        idx = topology.incoming(node)
        ranked = sorted(idx, key=lambda e: (-scores[e], e))[:retain_k]
        nodes.append((node, [(edges[e][1], best_ops[e]) for e in sorted(ranked)]))
    return Genotype(cell_kind, nodes, output_rule, width, n_inputs=topology.n_inputs)


class SearchCell(nn.Module):
    """Relaxed CPM-style cell over one input state.

    mode='mixed' evaluates every (edge, op) with partial channels (PC-DARTS);
    mode='single_path' evaluates one (edge, op) per node."""

    def __init__(self, width, n_nodes=6, ops=DEFAULT_OPS, k=4, mode="single_path"):
        super().__init__()
        check_fraction(width, k)
        self.width, self.k, self.mode, self.op_specs = width, k, mode, tuple(ops)
        self.topology = CellTopology(1, n_nodes)
        self.edge_ops = nn.ModuleList(
            nn.ModuleList(build_op(s, width // k) for s in self.op_specs) for _ in self.topology.edges
        )
        self.arch_alpha = nn.Parameter(1e-3 * torch.randn(len(self.topology.edges), len(ops)))
        self.arch_beta = nn.Parameter(1e-3 * torch.randn(len(self.topology.edges)))
        # search always concatenates all nodes; the output rule applies after derivation
        self.project = nn.Conv2d(n_nodes * width, width, 1)
        self.counter = OpCounter()

    def node_forward(self, node, states):
        idx = self.topology.incoming(node)
        edges = self.topology.edges
        if self.mode == "single_path":
            e_local, o, w = choose_single_path(self.arch_alpha, self.arch_beta, idx)
            e = idx[e_local]
            return single_op_edge_forward(states[edges[e][1]], w, self.edge_ops[e][o], self.k, self.counter)
        b = F.softmax(self.arch_beta[idx], dim=0)
        return sum(
            b[j] * mixed_edge_forward(states[edges[e][1]], self.arch_alpha[e], self.edge_ops[e], self.k, self.counter)
            for j, e in enumerate(idx)
        )

    def forward(self, x):
        if x.shape[1] != self.width:
            raise ValueError(f"expected width {self.width}, got {x.shape[1]}")
        states = [x]
        for node in self.topology.node_ids:
            states.append(self.node_forward(node, states))
        return self.project(torch.cat(states[1:], dim=1))

    def arch_params(self):
        return ArchParams.from_tensors(self.arch_alpha, self.arch_beta)

    def derive(self, retain_k=2, output_rule="cat_leaf"):
        return derive_genotype(self.arch_params(), self.topology, retain_k, output_rule, self.width)


class DerivedCell(nn.Module):
    """Fixed cell built from a Genotype; nodes sum their kept edges."""

    def __init__(self, genotype: Genotype, ops=DEFAULT_OPS):
        super().__init__()
        self.genotype = genotype
        c = genotype.width
        self.edge_ops = nn.ModuleDict()
        for node, inputs in genotype.nodes:
            for src, o in inputs:
                self.edge_ops[f"{node}_{src}"] = build_op(ops[o], c)
        self.out_nodes = genotype.output_nodes()
        assert self.out_nodes, "genotype has no output nodes"
        self.project = nn.Conv2d(len(self.out_nodes) * c, c, 1)

    def init_identity(self):
        """Projection averages the concatenated outputs (identity for one output)."""
        c, n = self.genotype.width, len(self.out_nodes)
        eye = torch.eye(c)[:, :, None, None] / n
        with torch.no_grad():
            self.project.weight.copy_(torch.cat([eye] * n, dim=1))
            self.project.bias.zero_()
        return self

    def forward(self, x):
        if x.shape[1] != self.genotype.width:
            raise ValueError(f"expected width {self.genotype.width}, got {x.shape[1]}")
        states = {0: x}
        for node, inputs in self.genotype.nodes:
            states[node] = sum(self.edge_ops[f"{node}_{src}"](states[src]) for src, _ in inputs)
        return cell_output([states[n] for n in self.out_nodes], self.project)


def cell_output(node_outputs, project):
    """Concatenate the selected node outputs and project back to width C."""
    assert node_outputs, "empty output set"
    return project(torch.cat(node_outputs, dim=1))


def alpha_entropy(alpha):
    """Per-edge entropy of softmax(alpha), in nats."""
    p = F.softmax(alpha.detach().double(), dim=-1)
    return -(p * torch.log(p.clamp_min(1e-300))).sum(-1)
