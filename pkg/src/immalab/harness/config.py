"""Run configuration: one JSON document per run, unknown keys are errors."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .. import adaptation as adp
from .. import concepts as cc

PROTOCOLS = ("relearn", "personalize", "crossed", "ablation", "erasure-only")

# Section -> key -> default.  A None default means "use the module default".
DEFAULTS = {
    "protocol": "relearn",
    "targets": None,  # concept names; None = every concept the protocol uses
    "methods": None,  # adaptation methods; None = protocol default
    "seed": 0,
    "eval_seed": 1234,
    "checkpoint": None,  # pretrained checkpoint; trained and saved under out/ when null
    "out": None,
    "schedule": {"T": 200, "beta1": 1e-4, "betaT": 0.05},
    "data": {"n_train": 2048, "n_ref": 512, "seed": 0},
    "pretrain": {
        "steps": 60000,
        "batch_size": 256,
        "lr": 2e-3,
        "lr_final": 1e-5,
        "cf_dropout_p": 0.1,
        "ema_decay": None,
    },
    "classifier": {"steps": 600, "hidden": 32, "lr": 1e-2},
    "erasure": {"steps": 1000, "lr": 1e-3, "batch_size": 128, "guidance": 0.25, "preserve": True},
    "imma": {
        "iterations": 500,
        "inner_steps": 1,
        "upper_lr": None,  # falls back to upper_lr_by_method, then 1e-4
        "inner_lr": None,
        "inner_optimizer": "sgd",
        "batch_size": 128,
        "upper_batch_size": None,
        "local": False,
    },
    "upper_lr_by_method": {
        adp.TOKEN_INVERSION: 1e-4,
        adp.SUBSET_FINETUNE: 1e-3,
        adp.LORA: 3e-3,
    },
    "adapt": {"epochs": 20, "batch_size": 128, "lr": None},
    "eval": {"n_samples": 512, "n_other": 256},
    "ablation_method": adp.SUBSET_FINETUNE,
}

# What each protocol changes relative to DEFAULTS.
PROTOCOL_DEFAULTS = {
    "relearn": {
        "targets": list(cc.PRETRAIN_CONCEPTS),
        "methods": [adp.LORA],
        # target-local ascent; plain descent in the inner loop diverges at this step size
        "imma": {"local": True, "upper_lr": 1e-2, "inner_optimizer": "adam"},
    },
    "personalize": {
        "targets": list(cc.HELDOUT_CONCEPTS),
        "methods": list(adp.METHODS),
    },
    "crossed": {
        "targets": list(cc.HELDOUT_CONCEPTS),
        "methods": [adp.SUBSET_FINETUNE, adp.TOKEN_INVERSION],
    },
    "ablation": {
        "targets": list(cc.HELDOUT_CONCEPTS[:3]),
        "methods": [adp.SUBSET_FINETUNE],
    },
    "erasure-only": {
        "targets": list(cc.PRETRAIN_CONCEPTS),
        "methods": [],
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key '{where}{k}'")
        if isinstance(base[k], dict) and k != "upper_lr_by_method":
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{where}{k}' must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        elif k == "upper_lr_by_method":
            if not isinstance(v, dict):
                raise ConfigError("upper_lr_by_method must be an object")
            bad = set(v) - set(adp.METHODS)
            if bad:
                raise ConfigError(f"upper_lr_by_method: unknown methods {sorted(bad)}")
            out[k].update(v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict | None = None) -> dict:
    """Fill protocol and global defaults into ``raw``; validate everything."""
    raw = dict(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    protocol = raw.get("protocol", DEFAULTS["protocol"])
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    base = _merge(DEFAULTS, PROTOCOL_DEFAULTS[protocol])
    cfg = _merge(base, raw)
    validate(cfg)
    return cfg


def validate(cfg):
    for name in cfg["targets"] or []:
        if name not in cc.KINDS:
            raise ConfigError(f"unknown concept {name!r}")
    for m in cfg["methods"] or []:
        if m not in adp.METHODS:
            raise ConfigError(f"unknown adaptation method {m!r}")
    p = cfg["protocol"]
    if p == "relearn":
        bad = [t for t in cfg["targets"] if t not in cc.PRETRAIN_CONCEPTS]
        if bad:
            raise ConfigError(f"relearn targets must be pretraining concepts, got {bad}")
        if cfg["methods"] != [adp.LORA]:
            raise ConfigError("relearn adapts with LoRA only")
    if p in ("personalize", "crossed", "ablation"):
        bad = [t for t in cfg["targets"] if t not in cc.HELDOUT_CONCEPTS]
        if bad:
            raise ConfigError(f"{p} targets must be held-out concepts, got {bad}")
        if len(cfg["targets"]) < 2 and p != "crossed":
            raise ConfigError(f"{p} needs at least two held-out concepts (target and other)")
        if not cfg["methods"]:
            raise ConfigError(f"{p} needs at least one method")
    if p == "crossed" and len(set(cfg["methods"])) != 2:
        raise ConfigError("crossed needs exactly two distinct methods")
    if cfg["ablation_method"] not in adp.METHODS:
        raise ConfigError(f"unknown ablation_method {cfg['ablation_method']!r}")
    for k in ("seed", "eval_seed"):
        if not isinstance(cfg[k], int) or cfg[k] < 0:
            raise ConfigError(f"{k} must be a non-negative integer")
    if cfg["adapt"]["epochs"] < 0 or cfg["imma"]["iterations"] < 0:
        raise ConfigError("epochs and iterations must be >= 0")
    if cfg["imma"]["inner_optimizer"] not in ("sgd", "adam"):
        raise ConfigError(f"unknown inner optimizer {cfg['imma']['inner_optimizer']!r}")
    if cfg["eval"]["n_samples"] < 2 or cfg["eval"]["n_other"] < 1:
        raise ConfigError("eval sample counts too small")


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return resolve(raw)


def dumps(cfg) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def run_id(cfg) -> str:
    """Content hash of the resolved config (the output directory is not part of it)."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]
