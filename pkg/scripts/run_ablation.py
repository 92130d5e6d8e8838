"""Runs one or all ablation tables at desk scale and prints them.

    python3 scripts/run_ablation.py --grid table1 table3 --out runs/ablation
"""
import argparse
from pathlib import Path

import torch

from asfd import io
from asfd.harness.ablation import AblationSettings, format_table, run_ablation


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--grid", nargs="+", default=["table1", "table2", "table3"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    torch.set_num_threads(1)
    settings = AblationSettings(seed=args.seed)
    for name in args.grid:
        out = Path(args.out) / name
        report = run_ablation(name, settings, out_dir=out)
        text = format_table(report)
        (out / "table.txt").write_text(text)
        (out / "table.json").write_text(io.dumps(report))
        print(f"== {name}\n{text}")


if __name__ == "__main__":
    main()
