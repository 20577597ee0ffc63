"""Run configuration: INI files, typed coercion, overrides, manifests.

A run is described by five sections (model, data, train, ortho, prune).
Every key has a typed default; unknown sections or keys, malformed values,
and semantic violations are all collected and reported together rather than
one at a time. `dotted overrides` like ``train.lr=0.01`` patch the file
from the command line before coercion.

Each command writes a manifest recording the configuration digest, package
and library versions, and the files produced, so any output can be traced
back to the exact settings that made it.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .data import SyntheticSpec, generate_synthetic
from .importance import METRICS
from .models import FAMILIES, build_model
from .ortho import LAMBDA_MAX, LAMBDA_MIN, OrthoConfig, resolve_lambda
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "Config",
    "load_config",
    "parse_config_text",
    "default_config_text",
    "write_manifest",
]


class ConfigError(RuntimeError):
    """One or more invalid configuration entries; the message lists all."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{raw}'")


def _parse_ints(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part.strip()) for part in raw.split(","))


def _parse_lambda(raw: str):
    raw = raw.strip()
    return raw if raw == "auto" else float(raw)


_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": _parse_bool,
    "ints": _parse_ints,
    "lambda": _parse_lambda,
}

# section -> key -> (type name, default)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "model": {
        "family": ("str", "plain"),
        "widths": ("ints", (8, 16)),
        "blocks": ("ints", ()),
        "classes": ("int", 4),
        "in_channels": ("int", 3),
        "seed": ("int", 0),
    },
    "data": {
        "train_per_class": ("int", 96),
        "val_per_class": ("int", 48),
        "image_hw": ("int", 16),
        "noise": ("float", 0.25),
        "seed": ("int", 0),
    },
    "train": {
        "epochs": ("int", 10),
        "batch_size": ("int", 32),
        "lr": ("float", 1e-3),
        "optimizer": ("str", "adam"),
        "momentum": ("float", 0.9),
        "weight_decay": ("float", 0.0),
        "milestones": ("ints", ()),
        "lr_decay": ("float", 0.1),
        "augment": ("bool", False),
        "seed": ("int", 0),
    },
    "ortho": {
        "enabled": ("bool", True),
        "lambda_coeff": ("lambda", "auto"),
    },
    "prune": {
        "target": ("float", 0.5),
        "rounds": ("int", 2),
        "metric": ("str", "taylor"),
        "retrain_epochs": ("int", 5),
        "retrain_lr": ("float", 1e-3),
    },
}


@dataclass(frozen=True)
class Config:
    values: dict

    def get(self, section: str, key: str):
        return self.values[section][key]

    # -- builders ---------------------------------------------------------

    def build_model(self):
        m = self.values["model"]
        blocks = m["blocks"] or None
        return build_model(
            m["family"], m["widths"], blocks, m["classes"], m["in_channels"], m["seed"]
        )

    def build_dataset(self):
        d = self.values["data"]
        m = self.values["model"]
        spec = SyntheticSpec(
            classes=m["classes"],
            train_per_class=d["train_per_class"],
            val_per_class=d["val_per_class"],
            image_hw=d["image_hw"],
            channels=m["in_channels"],
            noise=d["noise"],
            seed=d["seed"],
        )
        return generate_synthetic(spec)

    def ortho_config(self) -> OrthoConfig | None:
        o = self.values["ortho"]
        if not o["enabled"]:
            return None
        lam = resolve_lambda(o["lambda_coeff"], self.values["model"]["family"])
        return OrthoConfig(lam)

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            optimizer=t["optimizer"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            milestones=t["milestones"],
            lr_decay=t["lr_decay"],
            ortho=self.ortho_config(),
            augment=t["augment"],
            seed=t["seed"],
        )

    def retrain_config(self) -> TrainConfig:
        p = self.values["prune"]
        base = self.train_config()
        return replace(base, epochs=p["retrain_epochs"], lr=p["retrain_lr"], milestones=())

    def input_extents(self) -> tuple[int, int]:
        hw = self.values["data"]["image_hw"]
        return (hw, hw)

    # -- serialization ----------------------------------------------------

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                value = self.values[section][key]
                if isinstance(value, tuple):
                    rendered = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    rendered = "true" if value else "false"
                else:
                    rendered = str(value)
                lines.append(f"{key} = {rendered}")
            lines.append("")
        return "\n".join(lines)


def _semantic_problems(values: dict) -> list[str]:
    problems = []
    m, t, o, p = values["model"], values["train"], values["ortho"], values["prune"]
    if m["family"] not in FAMILIES:
        problems.append(f"model.family must be one of {FAMILIES}, got '{m['family']}'")
    if any(w < 2 for w in m["widths"]) or not m["widths"]:
        problems.append(f"model.widths must all be at least 2, got {m['widths']}")
    if m["blocks"] and len(m["blocks"]) != len(m["widths"]):
        problems.append("model.blocks must be empty or match model.widths in length")
    if m["classes"] < 2:
        problems.append(f"model.classes must be at least 2, got {m['classes']}")
    if t["optimizer"] not in ("adam", "sgd"):
        problems.append(f"train.optimizer must be adam or sgd, got '{t['optimizer']}'")
    if t["epochs"] < 0:
        problems.append(f"train.epochs must be non-negative, got {t['epochs']}")
    if t["lr"] <= 0:
        problems.append(f"train.lr must be positive, got {t['lr']}")
    lam = o["lambda_coeff"]
    if o["enabled"] and lam != "auto" and not (LAMBDA_MIN <= lam <= LAMBDA_MAX):
        problems.append(
            f"ortho.lambda_coeff must be 'auto' or in [{LAMBDA_MIN}, {LAMBDA_MAX}], got {lam}"
        )
    if o["enabled"] and t["weight_decay"] > 0:
        problems.append("train.weight_decay and ortho.enabled are mutually exclusive")
    if not (0.0 < p["target"] < 1.0):
        problems.append(f"prune.target must lie in (0, 1), got {p['target']}")
    if p["rounds"] < 1:
        problems.append(f"prune.rounds must be positive, got {p['rounds']}")
    if p["metric"] not in METRICS:
        problems.append(f"prune.metric must be one of {METRICS}, got '{p['metric']}'")
    if p["retrain_epochs"] < 0:
        problems.append(f"prune.retrain_epochs must be non-negative, got {p['retrain_epochs']}")
    return problems


def parse_config_text(text: str, overrides=()) -> Config:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse configuration: {err}") from None

    problems: list[str] = []
    values = {section: dict((k, d) for k, (_, d) in keys.items()) for section, keys in SCHEMA.items()}

    for section in parser.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            type_name, _ = SCHEMA[section][key]
            try:
                values[section][key] = _PARSERS[type_name](raw)
            except ValueError:
                problems.append(f"{section}.{key}: cannot parse '{raw}' as {type_name}")

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override '{item}' is not of the form section.key=value")
            continue
        dotted, raw = item.split("=", 1)
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            problems.append(f"override targets unknown key {section}.{key}")
            continue
        type_name, _ = SCHEMA[section][key]
        try:
            values[section][key] = _PARSERS[type_name](raw)
        except ValueError:
            problems.append(f"override {section}.{key}: cannot parse '{raw}' as {type_name}")

    if not problems:
        problems.extend(_semantic_problems(values))
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return Config(values)


def load_config(path, overrides=()) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read configuration file: {err}") from None
    return parse_config_text(text, overrides)


def default_config_text() -> str:
    return Config(
        {section: {k: d for k, (_, d) in keys.items()} for section, keys in SCHEMA.items()}
    ).to_ini()


def write_manifest(path, config_text: str, command: str, outputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "created_unix": int(time.time()),
        "outputs": outputs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
