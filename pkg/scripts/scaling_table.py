"""Params / FLOPs (and optionally latency at 640x640) for D0..D6.

    python3 scripts/scaling_table.py --latency --iters 30
"""
import argparse

import torch

from asfd.detector import Detector, DetectorConfig
from asfd.scaling import cost_report, family, hardware_descriptor, latency_bench, vga_resolution


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--max-phi", type=int, default=6)
    p.add_argument("--latency", action="store_true")
    p.add_argument("--iters", type=int, default=30)
    args = p.parse_args()
    torch.set_num_threads(1)
    print(f"{'model':6s} {'res':>5s} {'params':>12s} {'FLOPs':>16s} {'latency_ms':>11s}")
    for name, sc, cfg, bundle in family(args.max_phi):
        r = cost_report(name, cfg, bundle)
        lat = ""
        if args.latency:
            model = Detector(DetectorConfig(**{**cfg.__dict__, "resolution": vga_resolution()}), bundle)
            lat = f"{latency_bench(model, timed_iters=args.iters):.1f}"
        print(f"{name:6s} {sc.resolution:5d} {r.params:12,d} {r.flops:16,d} {lat:>11s}")
    if args.latency:
        print(hardware_descriptor())


if __name__ == "__main__":
    main()
