"""Plain-text run configuration: `key = value` lines and a network grammar.

Unknown and duplicate keys are rejected (typo safety). Network stages are
whitespace-separated tokens:

    dense:50            fully connected, 50 units
    gate:relu           gating nonlinearity (gate:leaky:0.1 for leaky)
    conv:20:5:2         20 filters, 5x5 kernel, stride 2 (optional :pad)
    maxpool:2           2x2 window
    flatten             collapse (c,h,w) to a vector

Example:

    network = dense:50 gate:relu dense:1
    mode = vbp
    epochs = 40
"""
from __future__ import annotations

import os

from . import layers

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}

# key -> parser; None means keep the raw string
_KEYS = {
    "data_format": ("csv", "idx", "cifar"),
    "data_path": None,
    "target_column": int,
    "standardize": "bool",
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "cifar_train": None,
    "cifar_test": None,
    "num_classes": int,
    "network": "network",
    "mode": ("vbp", "dvi", "varout"),
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "alpha": float,
    "beta_init": float,
    "seed": int,
    "online": "bool",
    "gate_mode": ("hard", "soft"),
    "gate_c": float,
    "eval_predictive": ("sampled", "deterministic"),
    "eval_samples": int,
    "eval_every": int,
    "train_samples": int,
    "input_variance": float,
}


def parse_config(text: str, origin: str = "<config>") -> dict:
    cfg: dict = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ValueError(f"{origin}:{ln}: unknown key {key!r}")
        if key in cfg:
            raise ValueError(f"{origin}:{ln}: duplicate key {key!r}")
        rule = _KEYS[key]
        try:
            if rule == "bool":
                cfg[key] = _BOOL[value.lower()]
            elif rule == "network":
                cfg[key] = parse_network_tokens(value.split())
            elif isinstance(rule, tuple):
                if value not in rule:
                    raise KeyError(value)
                cfg[key] = value
            elif rule is None:
                cfg[key] = value
            else:
                cfg[key] = rule(value)
        except (KeyError, ValueError):
            raise ValueError(f"{origin}:{ln}: bad value {value!r} for {key!r}") from None
    return cfg


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config(fh.read(), origin=path)
    cfg["_dir"] = os.path.dirname(os.path.abspath(path))
    return cfg


def resolve_path(cfg: dict, value: str) -> str:
    """Resolve a data path relative to the config file's directory."""
    if os.path.isabs(value):
        return value
    return os.path.join(cfg.get("_dir", "."), value)


# ---------------------------------------------------------------------------
# Network grammar

def parse_network_tokens(tokens) -> tuple:
    stages = []
    for tok in tokens:
        parts = tok.split(":")
        kind = parts[0]
        try:
            if kind == "dense":
                (units,) = parts[1:]
                stages.append(layers.Dense(int(units)))
            elif kind == "gate":
                if parts[1] == "relu" and len(parts) == 2:
                    stages.append(layers.Gate("relu"))
                elif parts[1] == "leaky" and len(parts) == 3:
                    stages.append(layers.Gate("leaky", float(parts[2])))
                else:
                    raise ValueError(tok)
            elif kind == "conv":
                nums = [int(p) for p in parts[1:]]
                if len(nums) == 2:
                    nums.append(1)
                if len(nums) == 3:
                    nums.append(0)
                if len(nums) != 4:
                    raise ValueError(tok)
                stages.append(layers.Conv2d(nums[0], nums[1], nums[2], nums[3]))
            elif kind == "maxpool":
                (window,) = parts[1:]
                stages.append(layers.MaxPool(int(window)))
            elif kind == "flatten":
                if len(parts) != 1:
                    raise ValueError(tok)
                stages.append(layers.Flatten())
            else:
                raise ValueError(tok)
        except (ValueError, IndexError):
            raise ValueError(f"bad network token {tok!r}") from None
    return tuple(stages)


def network_to_tokens(stages) -> str:
    out = []
    for stage in stages:
        if isinstance(stage, layers.Dense):
            out.append(f"dense:{stage.units}")
        elif isinstance(stage, layers.Gate):
            out.append("gate:relu" if stage.kind == "relu" else f"gate:leaky:{stage.slope}")
        elif isinstance(stage, layers.Conv2d):
            out.append(f"conv:{stage.filters}:{stage.kernel}:{stage.stride}:{stage.padding}")
        elif isinstance(stage, layers.MaxPool):
            out.append(f"maxpool:{stage.window}")
        elif isinstance(stage, layers.Flatten):
            out.append("flatten")
        else:
            raise TypeError(f"unknown stage {stage!r}")
    return " ".join(out)
