"""Layered run configuration and the canonical JSON encoding every report
and digest is built on. Reports must be byte-identical across reruns of
the same config, so the encoding is fully deterministic and no wall-clock
value ever enters it."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigurationError

DEFAULT_CONFIG = {
    "encoder": "mock:64:0",
    "bank": None,  # path; null means build from the synthetic block
    "manifest": None,  # path; null means build from the synthetic block
    "synthetic": {
        "k": 4,
        "e_per_disease": 3,
        "shared_fraction": 0.0,
        "images_per_disease": 20,
        "noise": 0.0,
        "seed": 7,
    },
    "train": {
        "lr": 1e-3,
        "schedule": "cosine",
        "warmup_epochs": 5,
        "epochs": 100,
        "batch_size": 32,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "m": 32,
        "position_policy": "END",
        "init_sigma": 0.02,
    },
    "protocol": {
        "task": "few_shot",
        "shots": 16,
        "seeds": [1, 2, 3, 4, 5],
        "stage2_kind": "logistic_regression",
        "mode": "single_label",
        "input_space": "scores",
    },
    "interpret": {"top_k": 5, "bottom_k": 5, "normalization": "sum"},
    "output_dir": "runs",
}

# Small enough to smoke-test the full pipeline in seconds.
QUICKSTART_OVERRIDES = {
    "synthetic": {"k": 3, "images_per_disease": 20},
    "train": {"epochs": 30, "m": 8},
    "protocol": {"shots": 8, "seeds": [1, 2]},
}


def canonical_json(obj) -> str:
    """Sorted keys, two-space indent, trailing newline; floats render via
    repr so equal values give equal bytes."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def quickstart_config() -> dict:
    return _deep_merge(DEFAULT_CONFIG, QUICKSTART_OVERRIDES)


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- flag overrides; later layers win."""
    if path == "quickstart":
        merged = quickstart_config()
    elif path is None:
        merged = copy.deepcopy(DEFAULT_CONFIG)
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}; known: {sorted(DEFAULT_CONFIG)}")
        merged = _deep_merge(DEFAULT_CONFIG, loaded)
    if overrides:
        merged = _deep_merge(merged, overrides)
    return merged
