"""Layered JSON configuration: preset -> file -> dotted ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import InvalidConfigError

# Desk-scale scenario: two simulated "datasets" sized to run on one CPU core in minutes.
DESK = {
    "scenario": {
        "seed": 0,
        "voxel_size_mm": 15.0,
        "head_radius_mm": 80.0,
        "distortion_scale": 0.1,
        "sampling_rate_hz": 300.0,
        "session_s": 40.0,
        "speech_fraction": 0.5,
        "mean_segment_s": 2.0,
        "noise": {"background_std": 1.0, "ar_coef": 0.95, "sensor_noise_rel": 0.2},
        "response": {"amplitude": 0.7, "latency_s": 0.25, "onset_gain": 1.0, "sustained_gain": 0.6},
        "datasets": {
            "A": {
                "n_sensors": 269,
                "shell_radius_mm": 110.0,
                "subjects": ["A2002", "A2003", "A2004", "A2005", "A2006", "A2007", "A2008", "A2009", "A2010"],
                "sessions": ["ses-1"],
                "regions": {"right": 1.0, "left": 0.6},
                "subject_regions": {},
                "guard": "subject",
                "split": {
                    "train": ["A2006", "A2007", "A2008", "A2009", "A2010"],
                    "val": ["A2002", "A2003"],
                    "test": ["A2004", "A2005"],
                },
                "space": "template",
            },
            "B": {
                "n_sensors": 273,
                "shell_radius_mm": 112.0,
                "subjects": ["001", "002", "003"],
                "sessions": ["ses-1", "ses-2", "ses-3", "ses-4"],
                "regions": {"front": 1.0, "right": 0.4},
                "subject_regions": {"003": {"right": 0.6, "left": 0.6, "front": 0.8}},
                "guard": "session",
                "split": {"train": ["ses-1", "ses-2"], "val": ["ses-3"], "test": ["ses-4"]},
                "space": "native",
            },
        },
    },
    "preprocess": {"highpass_hz": 0.1, "lowpass_hz": 48.0, "resample_hz": 150.0, "notch_hz": False},
    "source": {
        "method": "min_norm",
        "snr": 3.0,
        "cov_form": "diagonal",
        "voxel_type": "vec",
        "structurals": "subject",
        "dimred": "none",
    },
    "assemble": {"stride": 8},
    "model": {"target_params": 15000, "channels": [6, 8], "pool": 2, "se_reduction": 16},
    "train": {
        "lr": 1e-3,
        "batch_size": 64,
        "weight_decay": 1e-2,
        "dropout": 0.2,
        "max_epochs": 12,
        "patience": 4,
        "min_delta": 1e-4,
    },
    "experiments": {
        "seeds": [0, 1, 2],
        "region_buffer": 1,
        "active_region": "right",
        "inactive_region": "back",
        "combined_sessions": {"001": ["ses-1"], "002": ["ses-1"]},
        "single_subject": "001",
    },
    "cache_root": None,
}

# Values used for the full-scale runs (preprocessing table, final and search hyperparameters).
PAPER_FINAL = {
    "preprocess": {"highpass_hz": 0.1, "lowpass_hz": 48.0, "resample_hz": 150.0, "notch_hz": False},
    "source": {
        "method": "min_norm",
        "snr": 3.0,
        "cov_form": "diagonal",
        "voxel_type": "vec",
        "structurals": "subject",
        "dimred": "none",
    },
    "scenario": {"voxel_size_mm": 15.0},
    "model": {"target_params": 250000, "single_subject_target_params": 500000},
    "train": {"max_epochs": 100, "patience": 10, "min_delta": 1e-4},
    "hparams": {
        "inter_subject": {
            "sensor_mlp": {"dropout": 0.1, "lr": 5.4e-4, "batch_size": 16, "weight_decay": 1.7e-1},
            "sensor_gat": {"dropout": 0.2, "lr": 4.7e-7, "batch_size": 128, "weight_decay": 2.0e-5},
            "source_mlp": {"dropout": 0.1, "lr": 5.4e-4, "batch_size": 16, "weight_decay": 1.7e-1},
            "source_cnn": {"dropout": 0.6, "lr": 1.7e-6, "batch_size": 256, "weight_decay": 1.4e-5},
            "source_gat": {"dropout": 0.2, "lr": 8.5e-5, "batch_size": 256, "weight_decay": 7.6e-4},
        },
        "single_subject": {
            "sensor_mlp": {"dropout": 0.5, "lr": 4.3e-5, "batch_size": 256, "weight_decay": 3.0e-5},
            "source_mlp": {"dropout": 0.2, "lr": 7.0e-6, "batch_size": 64, "weight_decay": 9.8e-2},
        },
        "combined": {
            "mlp": {"dropout": 0.2, "lr": 3.1e-6, "batch_size": 512, "weight_decay": 2.8e-5},
            "cnn": {"dropout": 0.5, "lr": 2.1e-7, "batch_size": 16, "weight_decay": 3.1e-3},
        },
    },
}

PAPER_SEARCH_SPACE = {
    "dropout": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
    "log10_lr": [-7.0, -3.0],
    "batch_size": [16, 32, 64, 128, 256, 512, 1024],
    "max_epochs": 100,
    "patience": 10,
    "min_delta": 1e-4,
    "log10_weight_decay": [-5.0, -0.5],
}

PRESETS = {"desk": DESK, "paper_final": PAPER_FINAL, "paper_search_space": PAPER_SEARCH_SPACE}

REQUIRED = ("scenario.seed", "preprocess.highpass_hz", "preprocess.lowpass_hz", "source.method", "source.snr")


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """JSON literal if it parses, bare string otherwise (``snr=5`` -> 5.0-ish int, ``method=dspm`` -> 'dspm')."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        if low in ("none", "null"):
            return None
        return text


def set_dotted(cfg: dict, key: str, value, strict: bool = True):
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if p not in node:
            if strict:
                raise InvalidConfigError(f"unknown config field {'.'.join(parts[:i + 1])!r}")
            node[p] = {}
        if not isinstance(node[p], dict):
            raise InvalidConfigError(f"config field {'.'.join(parts[:i + 1])!r} is not a section")
        node = node[p]
    if strict and parts[-1] not in node:
        raise InvalidConfigError(f"unknown config field {key!r}")
    node[parts[-1]] = value


def get_dotted(cfg: dict, key: str):
    node = cfg
    for p in key.split("."):
        if not isinstance(node, dict) or p not in node:
            raise InvalidConfigError(f"missing required config field {key!r}")
        node = node[p]
    return node


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), parse_value(v.strip()))
    return cfg


def load_config(path=None, preset: str = "desk", overrides=None) -> dict:
    """Preset, then an optional JSON file (partial, merged), then ``key=value`` overrides."""
    if preset not in PRESETS:
        raise InvalidConfigError(f"unknown preset {preset!r}; valid: {sorted(PRESETS)}")
    cfg = copy.deepcopy(DESK)
    if preset == "paper_final":
        cfg = deep_merge(cfg, {k: v for k, v in PAPER_FINAL.items() if k != "hparams"})
    if path is not None:
        with open(Path(path)) as f:
            user = json.load(f)
        if not isinstance(user, dict):
            raise InvalidConfigError(f"{path}: top level must be an object")
        _check_known(cfg, user)
        cfg = deep_merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def _check_known(base, user, prefix=""):
    for k, v in user.items():
        name = f"{prefix}{k}"
        if k not in base:
            # free-form maps
            if prefix.endswith(("datasets.", "regions.", "subject_regions.", "combined_sessions.")):
                continue
            raise InvalidConfigError(f"unknown config field {name!r}")
        if isinstance(v, dict) and isinstance(base[k], dict):
            _check_known(base[k], v, name + ".")


def validate(cfg: dict):
    """Field-level checks; raises InvalidConfigError naming the offending field."""
    from .inverse import COV_FORMS, METHODS, VOXEL_TYPES

    for key in REQUIRED:
        if get_dotted(cfg, key) is None:
            raise InvalidConfigError(f"missing required config field {key!r}")
    src = cfg["source"]
    if src["method"] not in METHODS:
        raise InvalidConfigError(f"source.method: unknown method {src['method']!r}; valid: {list(METHODS)}")
    if src["cov_form"] not in COV_FORMS:
        raise InvalidConfigError(f"source.cov_form: {src['cov_form']!r} not in {list(COV_FORMS)}")
    if src["voxel_type"] not in VOXEL_TYPES:
        raise InvalidConfigError(f"source.voxel_type: {src['voxel_type']!r} not in {list(VOXEL_TYPES)}")
    if src["structurals"] not in ("subject", "template"):
        raise InvalidConfigError("source.structurals must be 'subject' or 'template'")
    if str(src["dimred"]) not in ("none", "pca1", "pca2", "pca3", "parcels"):
        raise InvalidConfigError("source.dimred must be one of none, pca1, pca2, pca3, parcels")
    if float(src["snr"]) <= 0:
        raise InvalidConfigError("source.snr must be positive")
    if int(cfg["assemble"]["stride"]) < 1:
        raise InvalidConfigError("assemble.stride must be >= 1")
    for name, ds in cfg["scenario"]["datasets"].items():
        for f in ("n_sensors", "subjects", "sessions", "split", "guard"):
            if f not in ds:
                raise InvalidConfigError(f"missing required config field 'scenario.datasets.{name}.{f}'")
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
