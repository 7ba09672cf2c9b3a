"""Run configuration (defaults < config file < --set overrides) and manifests.

The config file is TOML with ``data``, ``model``, ``train`` and ``eval``
tables; any key can be overridden on the command line with
``--set table.key=value`` (values parse as JSON, falling back to string).
Every artifact directory gets exactly one ``manifest.json`` capturing the
resolved config, corpus hash, seed, code revision and timestamps.
"""

from __future__ import annotations

import copy
import json
import os
import subprocess
import sys
import time
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import ModelConfig
from .training import TrainConfig

DETERMINISTIC_ENV = "FSSUW_DETERMINISTIC"

DEFAULTS: dict = {
    "data": {
        "resolution": 256,
        "scheme": "suim2",
        "min_fraction": 0.10,
        "class_map": "",          # path to CSV; empty selects the SUIM map
        "mean": [0.485, 0.456, 0.406],
        "std": [0.229, 0.224, 0.225],
    },
    "model": {
        "sfe_width": 16,
        "fee_width": 8,
        "c_prime": 64,
        "use_fee": True,
        "use_fam": True,
        "swap_roles": False,
        "temperature": 20.0,
    },
    "train": {
        "epochs": 40,
        "batch_size": 1,
        "lr0": 0.001,
        "lr_decay": 0.1,
        "decay_every": 10000,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "seed": 0,
        "k_shot": 1,
        "use_align": True,
        "deterministic": True,
    },
    "eval": {
        "n_test": 1000,
        "per_episode_mean": False,
    },
}


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ValueError(f"override {item!r} must look like table.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides: tuple[str, ...] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "rb") as fh:
            _deep_update(cfg, tomllib.load(fh))
    for item in overrides:
        keys, value = parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        cfg["train"]["deterministic"] = True
    return cfg


def model_config_from(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(sfe_width=int(m["sfe_width"]), fee_width=int(m["fee_width"]),
                       c_prime=int(m["c_prime"]), use_fee=bool(m["use_fee"]),
                       use_fam=bool(m["use_fam"]), swap_roles=bool(m["swap_roles"]),
                       temperature=float(m["temperature"]))


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                       lr0=float(t["lr0"]), lr_decay=float(t["lr_decay"]),
                       decay_every=int(t["decay_every"]), momentum=float(t["momentum"]),
                       weight_decay=float(t["weight_decay"]), seed=int(t["seed"]),
                       k_shot=int(t["k_shot"]), resolution=int(cfg["data"]["resolution"]),
                       use_align=bool(t["use_align"]), deterministic=bool(t["deterministic"]))


def code_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir, command: str, config: dict, corpus_hash: str | None = None,
                   seed: int | None = None, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "corpus_hash": corpus_hash,
        "seed": seed,
        "code_revision": code_revision(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "argv": sys.argv[1:],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
