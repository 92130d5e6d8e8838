"""Command-line entry point: asfd {search,train,eval,scale,count,bench,ablate,gen-data}.

Exit codes: 0 ok, 2 usage, 3 configuration error, 4 data error, 5 runtime error."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import io
from .autofem import reference_bundle
from .detector import Detector, DetectorConfig
from .harness import ablation
from .harness.data import CorpusParams, SynthScene, generate_corpus, split, tier_of
from .harness.evaluate import evaluate_ap, plot_pr
from .losses import LOSS_PRESETS, loss_preset
from .scaling import (CostReport, cost_report, count_flops, count_params, describe_detector, family,
                      hardware_descriptor, latency_bench, scale_config, vga_resolution)
from .search_train import DivergenceError, SearchSchedule, TrainSchedule, bilevel_search, predict, train_detector

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4, 5
log = logging.getLogger("asfd")


class UsageError(Exception):
    pass


# ---- option plumbing ----------------------------------------------------

def _opts(args, defaults):
    """Explicit CLI flags > --config file > built-in defaults."""
    cfg = io.load_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise io.ConfigError(f"unknown config key(s) {sorted(unknown)}")
    out = dict(defaults)
    out.update(cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _scale_preset(args, o, epoch_keys):
    """--paper-scale fixes the schedule; combining it with custom epoch
    counts is a usage error."""
    if getattr(args, "paper_scale", False):
        custom = [k for k in epoch_keys if getattr(args, k, None) is not None]
        if custom:
            raise UsageError(f"--paper-scale conflicts with custom {', '.join('--' + k.replace('_', '-') for k in custom)}")
        return "reference"
    return "desk"


def _load_scenes(o):
    if o.get("data"):
        return load_dataset(o["data"])
    params = CorpusParams(resolution=o["resolution"])
    return generate_corpus(o["n_scenes"], params, seed=o["data_seed"])


def save_dataset(scenes, params: CorpusParams, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "images.npz", images=np.stack([s.image for s in scenes]))
    io.write_jsonl(out / "gt.jsonl", [{"image_id": i, "boxes": s.gt_boxes.tolist(), "tiers": s.tiers}
                                      for i, s in enumerate(scenes)])
    (out / "params.json").write_text(io.dumps(asdict(params)))
    return [out / "images.npz", out / "gt.jsonl", out / "params.json"]


def load_dataset(path):
    path = Path(path)
    try:
        images = np.load(path / "images.npz")["images"]
    except (FileNotFoundError, KeyError, ValueError) as e:
        raise io.DataError(f"cannot read dataset images from {path}: {e}") from e
    gts = io.read_gt(path / "gt.jsonl")
    if len(gts) != len(images):
        raise io.DataError(f"{path}: {len(images)} images but {len(gts)} ground-truth records")
    scenes = []
    for i in range(len(images)):
        if i not in gts:
            raise io.DataError(f"{path}: missing ground truth for image {i}")
        scenes.append(SynthScene(images[i], gts[i], [tier_of(b) for b in gts[i]], ("file", i)))
    return scenes


def _detector_cfg(o, loss_cfg, **kw):
    return DetectorConfig(resolution=o["resolution"], width=o["width"], classifier=loss_cfg.cls,
                          cos_scale=loss_cfg.scale, **kw)


# ---- subcommands --------------------------------------------------------

SEARCH_DEFAULTS = dict(out="runs/search", seed=0, data=None, data_seed=0, n_scenes=500, resolution=128, width=32,
                       epochs=None, arch_start=None, batch_size=None, fpn=True, cpm=True, nodes=6,
                       method="ours", output_rule="cat_leaf", retain_k=2, channel_k=4, loss="+DRMC")


def cmd_search(args):
    o = _opts(args, SEARCH_DEFAULTS)
    preset = _scale_preset(args, o, ("epochs", "arch_start"))
    if preset == "reference":
        sched = SearchSchedule.reference()
        loss_cfg = loss_preset(o["loss"])
    else:
        sched = SearchSchedule.desk(o["epochs"] or 10, o["arch_start"] if o["arch_start"] is not None else 4,
                                    o["batch_size"] or 8)
        loss_cfg = loss_preset(o["loss"], desk=True)
    if not (o["fpn"] or o["cpm"]):
        raise io.ConfigError("nothing to search: both --no-fpn and --no-cpm given")
    torch.manual_seed(o["seed"])
    cfg = _detector_cfg(o, loss_cfg, fpn="search" if o["fpn"] else "none", cpm="search" if o["cpm"] else "none",
                        n_nodes=o["nodes"], channel_k=o["channel_k"],
                        search_mode="single_path" if o["method"] == "ours" else "mixed")
    scenes = _load_scenes(o)
    train, _ = split(scenes, 0.8)
    w_half, a_half = split(train, 0.5)
    model = Detector(cfg)
    bundle, history = bilevel_search(model, w_half, a_half, sched, loss_cfg, seed=o["seed"],
                                     retain_k=o["retain_k"], output_rule=o["output_rule"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.save_bundle(bundle, out / "bundle.json")
    io.write_jsonl(out / "search_log.jsonl", history)
    io.save_checkpoint({"model": model.state_dict(), "config": asdict(cfg), "position": {"epoch": sched.total_epochs}},
                       out / "supernet.pt")
    io.write_manifest(out, "search", {"options": o, "schedule": sched, "loss": loss_cfg, "detector": cfg},
                      o["seed"], [out / "bundle.json", out / "search_log.jsonl", out / "supernet.pt"])
    print(f"bundle written to {out / 'bundle.json'}")


TRAIN_DEFAULTS = dict(out="runs/train", seed=0, data=None, data_seed=0, n_scenes=500, resolution=128, width=32,
                      epochs=None, batch_size=None, warmup_iters=None, bundle=None, fpn="autofem", cpm="autofem",
                      loss="+DRMC", val_frac=0.2)


def cmd_train(args):
    o = _opts(args, TRAIN_DEFAULTS)
    preset = _scale_preset(args, o, ("epochs", "warmup_iters"))
    if preset == "reference":
        sched, loss_cfg = TrainSchedule.reference(), loss_preset(o["loss"])
    else:
        sched = TrainSchedule.desk(o["epochs"] or 10, o["batch_size"] or 8,
                                   o["warmup_iters"] if o["warmup_iters"] is not None else 50)
        loss_cfg = loss_preset(o["loss"], desk=True)
    bundle = None
    if "autofem" in (o["fpn"], o["cpm"]):
        bundle = io.load_bundle(o["bundle"]) if o["bundle"] else reference_bundle(o["width"])
    torch.manual_seed(o["seed"])
    cfg = _detector_cfg(o, loss_cfg, fpn=o["fpn"], cpm=o["cpm"])
    model = Detector(cfg, bundle)
    scenes = _load_scenes(o)
    train, val = split(scenes, 1 - o["val_frac"])
    ckpt, history = train_detector(model, train, val, sched, loss_cfg, seed=o["seed"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt["bundle"] = None if bundle is None else bundle.to_dict()
    ckpt["loss"] = asdict(loss_cfg)
    io.save_checkpoint(ckpt, out / "best.pt")
    io.write_jsonl(out / "train_log.jsonl", history)
    io.write_manifest(out, "train", {"options": o, "schedule": sched, "loss": loss_cfg, "detector": cfg},
                      o["seed"], [out / "best.pt", out / "train_log.jsonl"], best_val_ap=ckpt.get("val_ap"))
    print(f"best checkpoint (epoch {ckpt['position']['epoch']}, val AP {ckpt.get('val_ap')}) -> {out / 'best.pt'}")


def _model_from_checkpoint(path):
    ckpt = io.load_checkpoint(path)
    cfg = DetectorConfig(**ckpt["config"])
    bundle = None if ckpt.get("bundle") is None else io.AutoFemBundle.from_dict(ckpt["bundle"])
    model = Detector(cfg, bundle)
    model.load_state_dict(ckpt["model"])
    return model.eval()


def cmd_eval(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.dets:
        if not args.gt:
            raise UsageError("--dets needs --gt")
        dets, gts = io.read_detections(args.dets), io.read_gt(args.gt)
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("give either --dets/--gt or --checkpoint/--data")
        model = _model_from_checkpoint(args.checkpoint)
        scenes = load_dataset(args.data)
        if scenes[0].image.shape[-1] != model.cfg.resolution:
            raise io.DataError("dataset resolution does not match the checkpoint's model")
        dets = predict(model, scenes)
        gts = {i: s.gt_boxes for i, s in enumerate(scenes)}
        io.write_jsonl(out / "dets.jsonl", io.detections_to_records(dets))
        outputs.append(out / "dets.jsonl")
    if args.threshold:
        dets = io.filter_threshold(dets, args.threshold)
    report = evaluate_ap(dets, gts, iou_thresh=args.iou)
    (out / "report.json").write_text(report.to_json())
    outputs.append(out / "report.json")
    if args.plot:
        plot_pr(report, out / "pr.png")
        outputs.append(out / "pr.png")
    io.write_manifest(out, "eval", {"dets": args.dets, "gt": args.gt, "checkpoint": args.checkpoint,
                                    "data": args.data, "iou": args.iou, "threshold": args.threshold}, None, outputs)
    for tier, ap in report.ap.items():
        print(f"{tier:8s} {'-' if ap is None else f'{ap:.4f}'}  (n_gt={report.n_gt[tier]})")


def _cost_table(reports):
    header = ["model", "params", "FLOPs", "latency_ms"]
    body = [[r.model, f"{r.params:,}", f"{r.flops:,}", "-" if r.latency_ms is None else f"{r.latency_ms:.1f}"]
            for r in reports]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(4)]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _emit_costs(reports, out, command, cfg):
    text = _cost_table(reports)
    print(text, end="")
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "costs.txt").write_text(text)
        (out / "costs.json").write_text(io.dumps([r.row() for r in reports]))
        io.write_manifest(out, command, cfg, None, [out / "costs.txt", out / "costs.json"])


def with_width(bundle, width):
    """Same searched topology at another channel width."""
    d = bundle.to_dict()
    d["width"] = width
    if d["cpm_genotypes"] is not None:
        d["cpm_genotypes"] = [{**g, "width": width} for g in d["cpm_genotypes"]]
    return io.AutoFemBundle.from_dict(d)


def cmd_scale(args):
    bundle = io.load_bundle(args.bundle) if args.bundle else None
    reports = []
    for name, sc, cfg, ref in family(args.max_phi):
        b = ref if bundle is None else with_width(bundle, sc.width)
        r = cost_report(name, cfg, b)
        if args.latency:
            model = Detector(cfg.__class__(**{**cfg.__dict__, "resolution": vga_resolution()}), b)
            r.latency_ms = latency_bench(model, warmup_iters=args.warmup, timed_iters=args.iters)
            r.hardware = hardware_descriptor()
        reports.append(r)
    _emit_costs(reports, args.out, "scale", {"max_phi": args.max_phi, "bundle": args.bundle, "latency": args.latency})


def _resolve_model_cfg(args):
    if args.phi is not None:
        sc = scale_config(args.phi)
        return f"D{args.phi}", sc.detector_config(), reference_bundle(sc.width)
    if args.model_config:
        d = io.load_config(args.model_config)
        try:
            cfg = DetectorConfig(**d.get("detector", d))
        except TypeError as e:
            raise io.ConfigError(f"bad detector config: {e}") from e
        bundle = None
        if "autofem" in (cfg.fpn, cfg.cpm):
            bundle = io.load_bundle(args.bundle) if args.bundle else reference_bundle(cfg.width)
        return Path(args.model_config).stem, cfg, bundle
    raise UsageError("give --phi or --model-config")


def cmd_count(args):
    name, cfg, bundle = _resolve_model_cfg(args)
    if args.resolution:
        cfg = DetectorConfig(**{**cfg.__dict__, "resolution": args.resolution})
    layers = describe_detector(cfg, bundle)
    _emit_costs([CostReport(name, count_params(layers), count_flops(layers))], args.out, "count", cfg)


def cmd_bench(args):
    name, cfg, bundle = _resolve_model_cfg(args)
    res = args.resolution or vga_resolution()
    cfg = DetectorConfig(**{**cfg.__dict__, "resolution": res})
    torch.manual_seed(0)
    model = Detector(cfg, bundle)
    layers = describe_detector(cfg, bundle)
    r = CostReport(name, count_params(layers), count_flops(layers),
                   latency_bench(model, warmup_iters=args.warmup, timed_iters=args.iters), hardware_descriptor())
    _emit_costs([r], args.out, "bench", {"detector": cfg, "warmup": args.warmup, "iters": args.iters})
    print(f"hardware: {r.hardware}")


def cmd_ablate(args):
    grid = args.grid
    if grid.endswith(".json"):
        grid = io.load_config(grid)
    settings = ablation.AblationSettings()
    if args.settings:
        try:
            settings = ablation.AblationSettings(**io.load_config(args.settings))
        except TypeError as e:
            raise io.ConfigError(f"bad ablation settings: {e}") from e
    for k in ("seed", "n_scenes", "search_epochs", "train_epochs"):
        if getattr(args, k) is not None:
            setattr(settings, k, getattr(args, k))
    try:
        ablation.expand_grid(grid)
    except (KeyError, ValueError) as e:
        raise io.ConfigError(str(e).strip('"')) from e
    out = Path(args.out)
    report = ablation.run_ablation(grid, settings, out_dir=out)
    text = ablation.format_table(report)
    print(text, end="")
    (out / "table.txt").write_text(text)
    (out / "table.json").write_text(io.dumps(report))
    io.write_manifest(out, "ablate", {"grid": grid, "settings": settings}, settings.seed,
                      [out / "table.txt", out / "table.json"])


def cmd_gen_data(args):
    o = _opts(args, dict(n=100, seed=0, resolution=128, out="data/synth", faces=None, tier_mix=None, occlusion=None))
    kw = {k: o[k] for k in ("faces", "tier_mix", "occlusion") if o[k] is not None}
    try:
        params = CorpusParams(resolution=o["resolution"], **kw)
    except ValueError as e:
        raise io.ConfigError(str(e)) from e
    scenes = generate_corpus(o["n"], params, seed=o["seed"])
    files = save_dataset(scenes, params, o["out"])
    io.write_manifest(o["out"], "gen-data", {"n": o["n"], "params": params}, o["seed"], files)
    print(f"{len(scenes)} scenes -> {o['out']}")


# ---- parser -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="asfd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scale_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--paper-scale", action="store_true", help="reference schedule (50 epochs, batch 48, s=30, m=0.35)")
        g.add_argument("--desk-scale", action="store_true", help="shortened schedule (default)")

    def data_flags(sp):
        sp.add_argument("--config", help="JSON file whose keys mirror the long options")
        sp.add_argument("--data", help="dataset directory written by gen-data")
        sp.add_argument("--n-scenes", type=int)
        sp.add_argument("--data-seed", type=int)
        sp.add_argument("--resolution", type=int)
        sp.add_argument("--width", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--loss", choices=sorted(LOSS_PRESETS))

    s = sub.add_parser("search", help="bilevel AutoFEM search, writes bundle.json")
    scale_flags(s)
    data_flags(s)
    s.add_argument("--epochs", type=int)
    s.add_argument("--arch-start", type=int)
    s.add_argument("--no-fpn", dest="fpn", action="store_const", const=False)
    s.add_argument("--no-cpm", dest="cpm", action="store_const", const=False)
    s.add_argument("--nodes", type=int)
    s.add_argument("--method", choices=("ours", "pc_darts"))
    s.add_argument("--output-rule", choices=("cat_all", "cat_leaf"))
    s.add_argument("--retain-k", type=int)
    s.add_argument("--channel-k", type=int)
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", help="train a detector, keeps the best validation-AP checkpoint")
    scale_flags(t)
    data_flags(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-iters", type=int)
    t.add_argument("--bundle", help="AutoFEM bundle (default: built-in reference bundle)")
    t.add_argument("--fpn", choices=("none", "plain", "autofem"))
    t.add_argument("--cpm", choices=("none", "autofem"))
    t.add_argument("--val-frac", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP per size tier from detection/GT files or a checkpoint")
    e.add_argument("--dets")
    e.add_argument("--gt")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--threshold", type=float, default=0.0,
                   help="drop detections scored below this (0.8 is the usual visualisation cut; AP wants 0)")
    e.add_argument("--plot", action="store_true", help="write pr.png")
    e.add_argument("--out", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    sc = sub.add_parser("scale", help="cost table for the D0..D6 family")
    sc.add_argument("--max-phi", type=int, default=6)
    sc.add_argument("--bundle")
    sc.add_argument("--latency", action="store_true", help="also time each model at VGA resolution")
    sc.add_argument("--warmup", type=int, default=2)
    sc.add_argument("--iters", type=int, default=30)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_scale)

    for name, func, helptext in (("count", cmd_count, "exact params / multiply-adds of one model"),
                                 ("bench", cmd_bench, "median single-image latency")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--phi", type=int)
        c.add_argument("--model-config", help="JSON DetectorConfig")
        c.add_argument("--bundle")
        c.add_argument("--resolution", type=int)
        c.add_argument("--out")
        if name == "bench":
            c.add_argument("--warmup", type=int, default=3)
            c.add_argument("--iters", type=int, default=30)
        c.set_defaults(func=func)

    a = sub.add_parser("ablate", help="desk-scale ablation grid")
    a.add_argument("--grid", default="baseline", help="baseline | table1 | table2 | table3 | grid.json")
    a.add_argument("--settings", help="JSON AblationSettings overrides")
    a.add_argument("--seed", type=int)
    a.add_argument("--n-scenes", type=int)
    a.add_argument("--search-epochs", type=int)
    a.add_argument("--train-epochs", type=int)
    a.add_argument("--out", default="runs/ablate")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gen-data", help="render a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--faces", type=int, nargs=2)
    g.add_argument("--tier-mix", type=float, nargs=3)
    g.add_argument("--occlusion", type=float)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"asfd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except io.ConfigError as e:
        print(f"asfd: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.DataError, FileNotFoundError) as e:
        print(f"asfd: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError, TypeError) as e:
        print(f"asfd: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, RuntimeError) as e:
        print(f"asfd: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
