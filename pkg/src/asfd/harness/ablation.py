"""Desk-scale ablation grid: search (when needed), train and evaluate each
cell with a shared seed, then assemble component x AP-tier tables."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from ..autofem import N_LEVELS, AutoFemBundle, Connection, FpnCellSpec
from ..detector import Detector, DetectorConfig
from ..losses import LOSS_PRESETS, loss_preset
from ..nas_core import Genotype
from ..scaling import count_flops, count_params, describe_detector
from ..search_train import SearchSchedule, TrainSchedule, bilevel_search, train_detector
from .data import TIERS, CorpusParams, generate_corpus, split

log = logging.getLogger(__name__)

CHOICES = {
    "fpn": ("none", "plain", "autofem"),
    "cpm": ("none", "autofem"),
    "loss": tuple(LOSS_PRESETS),
    "output_rule": ("cat_all", "cat_leaf"),
    "nodes": (4, 6, 8),
    "method": ("ours", "pc_darts"),
}
DEFAULT_CELL = {"fpn": "none", "cpm": "none", "loss": "+DRMC", "output_rule": "cat_leaf", "nodes": 6, "method": "ours"}
AP_COLUMNS = ("overall",) + TIERS


@dataclass
class AblationSettings:
    n_scenes: int = 500
    resolution: int = 128
    val_frac: float = 0.2
    width: int = 32
    channel_k: int = 4
    search_epochs: int = 10
    arch_start_epoch: int = 4
    train_epochs: int = 20
    batch_size: int = 8
    warmup_iters: int = 100
    clip_grad_norm: float = 5.0
    seed: int = 0
    search_loss: str = "+DRMC"
    desk_margin: bool = True
    # mixed-mode supernets evaluating more ops per cell forward than this are
    # reported unavailable (stands in for a GPU memory limit)
    mixed_op_budget: int = 200


def mixed_op_evals(nodes, n_ops=7, n_inputs=1):
    """Op evaluations of one mixed-mode cell forward: every edge runs every op."""
    return n_ops * sum(n_inputs + i for i in range(nodes))


def validate_cell(cell):
    unknown = set(cell) - set(CHOICES)
    if unknown:
        raise KeyError(f"unknown ablation key(s) {sorted(unknown)}; known: {sorted(CHOICES)}")
    for k, v in cell.items():
        if v not in CHOICES[k]:
            raise ValueError(f"unknown {k} component {v!r}; choose from {list(CHOICES[k])}")
    return {**DEFAULT_CELL, **cell}


def preset_grid(name):
    if name == "baseline":
        return [{}]
    if name == "table1":
        return [{"fpn": f, "cpm": c} for f, c in
                [("none", "none"), ("plain", "none"), ("autofem", "none"), ("none", "autofem"), ("autofem", "autofem")]]
    if name == "table2":
        rows = [("pc_darts", "cat_all"), ("ours", "cat_all"), ("ours", "cat_leaf")]
        return [{"cpm": "autofem", "method": m, "output_rule": r, "nodes": n} for m, r in rows for n in CHOICES["nodes"]]
    if name == "table3":
        return [{"fpn": "autofem", "cpm": "autofem", "loss": loss} for loss in LOSS_PRESETS]
    raise KeyError(f"unknown grid preset {name!r}; choose from baseline, table1, table2, table3")


def expand_grid(grid):
    """Accepts a preset name, a list of cell dicts, or {key: [values]} for a
    cartesian product. Every cell is validated before anything runs."""
    if isinstance(grid, str):
        cells = preset_grid(grid)
    elif isinstance(grid, dict):
        if "preset" in grid:
            cells = preset_grid(grid["preset"])
        elif "cells" in grid:
            cells = list(grid["cells"])
        else:
            keys = list(grid)
            for k in keys:
                if k not in CHOICES:
                    raise KeyError(f"unknown ablation key {k!r}; known: {sorted(CHOICES)}")
            vals = [v if isinstance(v, (list, tuple)) else [v] for v in grid.values()]
            cells = [dict(zip(keys, combo)) for combo in itertools.product(*vals)]
    else:
        cells = list(grid)
    return [validate_cell(c) for c in cells]


def cell_label(cell):
    parts = []
    if cell["fpn"] != "none":
        parts.append(f"fpn={cell['fpn']}")
    if cell["cpm"] != "none":
        parts.append(f"cpm={cell['cpm']}")
    if "autofem" in (cell["fpn"], cell["cpm"]):
        parts.append(f"{cell['method']}/{cell['output_rule']}/n{cell['nodes']}")
    parts.append(f"loss={cell['loss']}")
    return " ".join(parts)


def needs_search(cell):
    return "autofem" in (cell["fpn"], cell["cpm"])


def available(cell, settings: AblationSettings):
    if needs_search(cell) and cell["method"] == "pc_darts":
        return mixed_op_evals(cell["nodes"]) <= settings.mixed_op_budget
    return True


def make_corpus(settings: AblationSettings):
    scenes = generate_corpus(settings.n_scenes, CorpusParams(resolution=settings.resolution), seed=settings.seed)
    train, val = split(scenes, 1 - settings.val_frac)
    return train, val


def search_bundle(cell, train_scenes, settings: AblationSettings, seed=None):
    """Search the AutoFEM parts the cell asks for on a 50/50 weight/arch split."""
    seed = settings.seed if seed is None else seed
    torch.manual_seed(seed)
    loss_cfg = loss_preset(settings.search_loss, desk=settings.desk_margin)
    cfg = DetectorConfig(
        resolution=settings.resolution, width=settings.width,
        fpn="search" if cell["fpn"] == "autofem" else cell["fpn"],
        cpm="search" if cell["cpm"] == "autofem" else "none",
        classifier=loss_cfg.cls, cos_scale=loss_cfg.scale, n_nodes=cell["nodes"], channel_k=settings.channel_k,
        search_mode="single_path" if cell["method"] == "ours" else "mixed",
    )
    model = Detector(cfg)
    w_half, a_half = split(train_scenes, 0.5)
    sched = SearchSchedule.desk(settings.search_epochs, settings.arch_start_epoch, settings.batch_size)
    sched.weights.warmup_iters = settings.warmup_iters
    sched.weights.clip_grad_norm = settings.clip_grad_norm
    bundle, history = bilevel_search(model, w_half, a_half, sched, loss_cfg, seed=seed,
                                     output_rule=cell["output_rule"])
    return bundle, history


def detector_config(cell, settings: AblationSettings, loss_cfg):
    return DetectorConfig(resolution=settings.resolution, width=settings.width, fpn=cell["fpn"], cpm=cell["cpm"],
                          classifier=loss_cfg.cls, cos_scale=loss_cfg.scale)


def train_and_eval(cfg, bundle, train_scenes, val_scenes, loss_cfg, settings: AblationSettings, seed=None):
    seed = settings.seed if seed is None else seed
    torch.manual_seed(seed)
    model = Detector(cfg, bundle)
    sched = TrainSchedule.desk(settings.train_epochs, settings.batch_size, settings.warmup_iters,
                               clip_grad_norm=settings.clip_grad_norm)
    ckpt, history = train_detector(model, train_scenes, val_scenes, sched, loss_cfg, seed=seed)
    return ckpt, history


def random_equal_cost(bundle: AutoFemBundle, rng):
    """Control architecture with the searched wiring and a random permutation
    of the searched ops. CPM ops are permuted within each cell and FPN ops
    within each output level, so every op keeps its feature-map size and the
    parameter and FLOP counts are unchanged."""
    fpn = None
    if bundle.fpn_spec is not None:
        levels = []
        for conns in bundle.fpn_spec.levels:
            cross = [i for i, c in enumerate(conns) if c.kind != "lateral"]
            ops = [conns[i].op for i in cross]
            perm = rng.permutation(len(ops))
            new = list(conns)
            for i, j in zip(cross, perm):
                new[i] = Connection(conns[i].source, conns[i].kind, ops[j])
            levels.append(new)
        fpn = FpnCellSpec(levels, bundle.fpn_spec.aggregation)
    genos = None
    if bundle.cpm_genotypes is not None:
        genos = []
        for g in bundle.cpm_genotypes:
            ops = [op for _, ins in g.nodes for _, op in ins]
            ops = [ops[i] for i in rng.permutation(len(ops))]
            it = iter(ops)
            nodes = [(n, [(s, next(it)) for s, _ in ins]) for n, ins in g.nodes]
            genos.append(Genotype(g.cell_kind, nodes, g.output_rule, g.width, g.n_inputs, g.op_names))
    return AutoFemBundle(fpn, genos, bundle.width)


def _search_key(cell):
    return (cell["fpn"], cell["cpm"], cell["nodes"], cell["method"])


def run_cell(cell, settings: AblationSettings, corpus, search_cache=None):
    search_cache = {} if search_cache is None else search_cache
    row = {"label": cell_label(cell), "cell": cell}
    if not available(cell, settings):
        row.update(status="unavailable", ap=None, params=None, flops=None,
                   reason=f"mixed supernet needs {mixed_op_evals(cell['nodes'])} op evals per cell "
                          f"(budget {settings.mixed_op_budget})")
        return row
    train, val = corpus
    bundle = None
    if needs_search(cell):
        key = _search_key(cell)
        if key not in search_cache:
            search_cache[key] = search_bundle(cell, train, settings)
        searched, _ = search_cache[key]
        bundle = searched
        if cell["cpm"] == "autofem" and searched.cpm_genotypes is not None:
            bundle = AutoFemBundle(searched.fpn_spec, [
                replace(g, output_rule=cell["output_rule"]) for g in searched.cpm_genotypes], searched.width)
    loss_cfg = loss_preset(cell["loss"], desk=settings.desk_margin)
    cfg = detector_config(cell, settings, loss_cfg)
    layers = describe_detector(cfg, bundle)
    ckpt, history = train_and_eval(cfg, bundle, train, val, loss_cfg, settings)
    row.update(status="ok", ap=ckpt["val_ap"], params=count_params(layers), flops=count_flops(layers),
               best_epoch=ckpt["position"]["epoch"],
               bundle=None if bundle is None else bundle.to_dict())
    return row


def run_ablation(grid, settings: AblationSettings | None = None, out_dir=None):
    """Returns {"settings", "layout", "rows"}. With ``out_dir`` each cell
    writes ``cells/<i>/result.json`` and completed cells are reused."""
    settings = settings or AblationSettings()
    cells = expand_grid(grid)
    layout = "nodes_grid" if (grid == "table2" or grid == {"preset": "table2"}) else "rows"
    corpus = make_corpus(settings)
    cache, rows = {}, []
    for i, cell in enumerate(cells):
        result_path = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / "cells" / f"{i:02d}"
            result_path = cell_dir / "result.json"
            if result_path.exists():
                prev = json.loads(result_path.read_text())
                if prev.get("cell") == cell and prev.get("settings") == asdict(settings):
                    rows.append(prev["row"])
                    continue
        log.info("ablation cell %d/%d: %s", i + 1, len(cells), cell_label(cell))
        row = run_cell(cell, settings, corpus, cache)
        rows.append(row)
        if result_path is not None:
            result_path.parent.mkdir(parents=True, exist_ok=True)
            result_path.write_text(json.dumps({"cell": cell, "settings": asdict(settings), "row": row},
                                              indent=2, sort_keys=True) + "\n")
    return {"settings": asdict(settings), "layout": layout, "rows": rows}


def _fmt(v):
    return "-" if v is None else f"{v:.3f}"


def _aligned(header, body):
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def format_table(report):
    rows = report["rows"]
    if report.get("layout") == "nodes_grid":
        return format_nodes_grid(rows)
    header = ["config", *AP_COLUMNS, "params"]
    body = []
    for r in rows:
        ap = r["ap"] or {}
        body.append([r["label"], *(_fmt(ap.get(t)) for t in AP_COLUMNS), "-" if r["params"] is None else r["params"]])
    return _aligned(header, body)


def table2_matrix(rows):
    """{method row name: {nodes: row}} as a method x nodes table."""
    out = {}
    for r in rows:
        c = r["cell"]
        name = "PC-DARTS" if c["method"] == "pc_darts" else f"ours+{c['output_rule']}"
        out.setdefault(name, {})[c["nodes"]] = r
    return out


def format_nodes_grid(rows):
    mat = table2_matrix(rows)
    nodes = sorted({n for v in mat.values() for n in v})
    tiers = TIERS
    header = ["method"] + [f"n{n}:{t}" for n in nodes for t in tiers]
    body = []
    for name, by_nodes in mat.items():
        line = [name]
        for n in nodes:
            r = by_nodes.get(n)
            ap = (r or {}).get("ap") or {}
            line += [_fmt(ap.get(t)) for t in tiers]
        body.append(line)
    return _aligned(header, body)


def median_ap(values):
    return float(np.median(values))


def trend_run(seed, settings: AblationSettings | None = None):
    """One seed of the desk-scale trend check: search a full AutoFEM, then
    train (a) the searched bundle, (b) an equal-cost random permutation of it,
    both with DRMC, and (c) the searched bundle with the smooth-L1 + softmax
    baseline loss. Returns validation AP per variant."""
    settings = replace(settings or AblationSettings(), seed=seed)
    train, val = make_corpus(settings)
    cell = validate_cell({"fpn": "autofem", "cpm": "autofem"})
    searched, history = search_bundle(cell, train, settings)
    rnd = random_equal_cost(searched, np.random.default_rng(seed))
    out = {"seed": seed, "median_alpha_entropy": [h["median_alpha_entropy"] for h in history]}
    for name, bundle, loss in [("searched", searched, "+DRMC"), ("random", rnd, "+DRMC"),
                               ("baseline_loss", searched, "smooth-l1+softmax")]:
        loss_cfg = loss_preset(loss, desk=settings.desk_margin)
        ckpt, _ = train_and_eval(detector_config(cell, settings, loss_cfg), bundle, train, val, loss_cfg, settings)
        out[name] = ckpt["val_ap"]
    return out


def trend_summary(runs):
    med = {k: median_ap([r[k]["overall"] for r in runs]) for k in ("searched", "random", "baseline_loss")}
    return {
        "median_overall_ap": med,
        "searched_ge_random": med["searched"] >= med["random"],
        "drmc_ge_baseline_loss": med["searched"] >= med["baseline_loss"],
    }
