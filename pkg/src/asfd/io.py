"""On-disk formats: genotype / bundle files, detection and ground-truth JSONL,
checkpoints, run manifests and JSON config files."""
from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import torch

from .autofem import AutoFemBundle
from .nas_core import DEFAULT_OPS, Genotype, op_set_signature

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def dumps(obj):
    """Canonical JSON text: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---- genotypes ----------------------------------------------------------

def genotype_to_text(g: Genotype, ops=DEFAULT_OPS):
    return dumps({"version": FORMAT_VERSION, "op_set_signature": op_set_signature(ops), **g.to_dict()})


def _check_header(d, ops):
    if d.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported format version {d.get('version')!r}")
    if d.get("op_set_signature") != op_set_signature(ops):
        raise DataError("op set signature mismatch: file was written for a different candidate op set")


def genotype_from_text(text, ops=DEFAULT_OPS):
    d = json.loads(text)
    _check_header(d, ops)
    return Genotype.from_dict(d)


def bundle_to_text(b: AutoFemBundle, ops=DEFAULT_OPS):
    return dumps({"version": FORMAT_VERSION, "op_set_signature": op_set_signature(ops), **b.to_dict()})


def bundle_from_text(text, ops=DEFAULT_OPS):
    d = json.loads(text)
    _check_header(d, ops)
    try:
        return AutoFemBundle.from_dict(d)
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed bundle file: {e}") from e


def save_bundle(b, path):
    Path(path).write_text(bundle_to_text(b))


def load_bundle(path):
    return bundle_from_text(Path(path).read_text())


# ---- detections / ground truth -----------------------------------------

def write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}:{n}: {e}") from e
    return out


def detections_to_records(dets):
    """image_id -> (N, 5) array  ->  [{image_id, boxes}]"""
    return [{"image_id": k, "boxes": np.asarray(v, dtype=float).reshape(-1, 5).tolist()} for k, v in dets.items()]


def gt_to_records(gts):
    return [{"image_id": k, "boxes": np.asarray(v, dtype=float).reshape(-1, 4).tolist()} for k, v in gts.items()]


def _records_to_arrays(records, width):
    out = {}
    for r in records:
        if "image_id" not in r or "boxes" not in r:
            raise DataError("each record needs image_id and boxes")
        arr = np.asarray(r["boxes"], dtype=np.float64).reshape(-1, width) if r["boxes"] else np.zeros((0, width))
        if r["image_id"] in out:
            raise DataError(f"duplicate image_id {r['image_id']!r}")
        out[r["image_id"]] = arr
    return out


def read_detections(path):
    try:
        return _records_to_arrays(read_jsonl(path), 5)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def read_gt(path):
    try:
        return _records_to_arrays(read_jsonl(path), 4)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def filter_threshold(dets, threshold):
    return {k: v[v[:, 4] >= threshold] for k, v in dets.items()}


# ---- checkpoints / manifests / configs ---------------------------------

def save_checkpoint(ckpt, path):
    torch.save(ckpt, path)


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)


def to_plain(obj):
    if is_dataclass(obj):
        return to_plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(cfg):
    return hashlib.sha256(json.dumps(to_plain(cfg), sort_keys=True).encode()).hexdigest()[:16]


def versions():
    return {"python": sys.version.split()[0], "torch": torch.__version__, "numpy": np.__version__,
            "platform": platform.platform()}


def write_manifest(out_dir, command, cfg, seed, outputs=(), **extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": to_plain(cfg),
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": versions(),
        "outputs": [str(p) for p in outputs],
        **to_plain(extra),
    }
    path = out_dir / "manifest.json"
    path.write_text(dumps(manifest))
    return path


def load_config(path):
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    return d
