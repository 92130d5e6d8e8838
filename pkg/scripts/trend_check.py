"""End-to-end desk-scale trend check over three seeds: searched vs random
equal-cost AutoFEM, and DRMC vs smooth-L1 + softmax.

    python3 scripts/trend_check.py --out runs/trend.json
"""
import argparse
import json
import time

import torch

from asfd.harness.ablation import AblationSettings, trend_run, trend_summary


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out")
    args = p.parse_args()
    torch.set_num_threads(1)
    t0 = time.time()
    runs = []
    for s in args.seeds:
        runs.append(trend_run(s, AblationSettings()))
        r = runs[-1]
        print(f"seed {s}: searched {r['searched']['overall']:.3f}  random {r['random']['overall']:.3f}  "
              f"smooth-l1+softmax {r['baseline_loss']['overall']:.3f}", flush=True)
    summary = {**trend_summary(runs), "minutes": (time.time() - t0) / 60, "runs": runs}
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
