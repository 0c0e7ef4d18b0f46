"""Run configuration: documented keys, JSON config files, flag overrides,
and the reproducibility echo written into every report and checkpoint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .harness import TrainConfig
from .model import BranchConfig, ModelConfig

# key -> (coercion, default); these are the config-file keys, all optional
CONFIG_KEYS = {
    "epochs": (int, 100),
    "batch_size": (int, 32),
    "learning_rate": (float, 1e-3),
    "weight_decay": (float, 1e-4),
    "lambda1": (float, 0.1),
    "lambda2": (float, 0.5),
    "sketch_dim": (int, 512),
    "feature_dim": (int, 64),
    "seed": (int, 0),
    "augment": (bool, True),
    # extras beyond the core documented set
    "patch_size": (int, 16),
    "folds": (int, 10),
    "variant": (str, "full"),
    "channels_per_stage": (tuple, (16, 32, 64)),
    "blocks_per_stage": (tuple, (2, 2, 2)),
    "final_pool": (int, 4),
    "stem_stride": (int, 1),
    "normalize_sketch": (bool, False),
    "reference_modality": (str, "t1"),
}


def _coerce(key: str, value):
    kind, _default = CONFIG_KEYS[key]
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("true", "1", "yes", "on"):
                    return True
                if low in ("false", "0", "no", "off"):
                    return False
            raise ValueError(value)
        if kind is tuple:
            if isinstance(value, str):
                value = [p for p in value.replace(" ", "").split(",") if p]
            return tuple(int(v) for v in value)
        return kind(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config key '{key}': cannot read value {value!r}") from err


@dataclass
class RunSettings:
    train: TrainConfig
    model: ModelConfig
    patch_size: int
    folds: int
    reference_modality: str
    echo: dict

    @property
    def run_id(self) -> str:
        return run_id(self.echo)


def run_id(echo: dict) -> str:
    """Content-addressed run identifier over the effective configuration."""
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def load_settings(config_path=None, overrides: dict | None = None) -> RunSettings:
    """Merge defaults, an optional JSON config file, and flag overrides (in
    that precedence order).  Unknown keys are usage errors naming the key.
    """
    effective = {k: default for k, (_kind, default) in CONFIG_KEYS.items()}

    if config_path is not None:
        path = Path(config_path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in raw.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key: '{key}'")
            effective[key] = _coerce(key, value)

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key: '{key}'")
        effective[key] = _coerce(key, value)

    train = TrainConfig(
        epochs=effective["epochs"],
        batch_size=effective["batch_size"],
        learning_rate=effective["learning_rate"],
        weight_decay=effective["weight_decay"],
        lambda1=effective["lambda1"],
        lambda2=effective["lambda2"],
        seed=effective["seed"],
        augment=effective["augment"],
    )
    branch = BranchConfig(
        channels_per_stage=effective["channels_per_stage"],
        blocks_per_stage=effective["blocks_per_stage"],
        feature_dim=effective["feature_dim"],
        final_pool=effective["final_pool"],
        stem_stride=effective["stem_stride"],
    )
    model = ModelConfig(
        branch=branch,
        sketch_dim=effective["sketch_dim"],
        variant=effective["variant"],
        normalize_sketch=effective["normalize_sketch"],
    )
    echo = dict(sorted(effective.items()))
    echo["channels_per_stage"] = list(effective["channels_per_stage"])
    echo["blocks_per_stage"] = list(effective["blocks_per_stage"])
    return RunSettings(
        train=train,
        model=model,
        patch_size=effective["patch_size"],
        folds=effective["folds"],
        reference_modality=effective["reference_modality"],
        echo=echo,
    )
