"""Desk-scale AutoFEM search followed by training of the derived detector.

    python3 scripts/run_search.py --out runs/example --seed 0
"""
import argparse
import json
from pathlib import Path

import torch

from asfd import io
from asfd.harness.ablation import AblationSettings, detector_config, make_corpus, search_bundle, train_and_eval, validate_cell
from asfd.losses import loss_preset


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/example")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=500)
    p.add_argument("--search-epochs", type=int, default=10)
    p.add_argument("--train-epochs", type=int, default=20)
    args = p.parse_args()
    torch.set_num_threads(1)
    s = AblationSettings(seed=args.seed, n_scenes=args.n_scenes, search_epochs=args.search_epochs,
                         train_epochs=args.train_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = make_corpus(s)
    cell = validate_cell({"fpn": "autofem", "cpm": "autofem"})
    bundle, history = search_bundle(cell, train, s)
    io.save_bundle(bundle, out / "bundle.json")
    io.write_jsonl(out / "search_log.jsonl", history)
    loss_cfg = loss_preset("+DRMC", desk=s.desk_margin)
    ckpt, log = train_and_eval(detector_config(cell, s, loss_cfg), bundle, train, val, loss_cfg, s)
    io.write_jsonl(out / "train_log.jsonl", log)
    io.write_manifest(out, "run_search", s, s.seed, [out / "bundle.json", out / "search_log.jsonl", out / "train_log.jsonl"],
                      best_val_ap=ckpt["val_ap"])
    print(json.dumps(ckpt["val_ap"], indent=2))


if __name__ == "__main__":
    main()
