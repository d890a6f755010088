"""Run configuration: one JSON document with `dataset`, `pipeline`,
`model`, `train`, and `eval` sections plus a root `seed`.

Unknown keys are rejected outright (a typo should fail loudly, not
silently fall back to a default), every key has a default listed below,
and the fully resolved document is echoed into each output artifact so a
result can always be traced back to its settings.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Dict, Optional

from .data import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULTS: Dict = {
    "seed": 0,
    "dataset": {
        "root": None,          # image tree to ingest (required by the ingest command)
        "id": "breakhis",      # breakhis | challenge2015
        "magnification": None, # filter: "40" | "100" | "200" | "400" | "none" | null for all
    },
    "pipeline": {
        "mode": "resize",           # resize | center_patch | random_patch
        "size": 128,                # output side length in pixels
        "patch_count": 200,         # random patches per image
        "augment": False,           # whether cmd_train-side loading would augment (augment command ignores this)
        "rotation_max_deg": 40.0,
        "width_shift_frac": 0.2,
        "height_shift_frac": 0.2,
        "shear_frac": 0.2,
        "zoom_frac": 0.2,
        "horizontal_flip": True,
        "vertical_flip": True,
        "outputs_per_input": 21,    # original + randomized copies per image
    },
    "model": {
        "num_classes": 2,
        "input_shape": [3, 128, 128],
        "stem_widths": [32, 64],
        "block_widths": [128, 256, 512, 1024],
        "irrus_per_block": 1,
        "time_steps": 2,
        "activation": "relu",       # relu | elu
        "dropout_p": 0.5,
        "classifier_hidden": None,  # optional dense width between pooling and the classifier
    },
    "train": {
        "initial_lr": 0.01,
        "momentum": 0.9,
        "decay": None,              # null -> initial_lr / epochs_per_trial
        "epochs_per_trial": 50,
        "trials": 3,
        "batch_size": 32,
        "loss": "cross_entropy",
        "seed": None,               # null -> the root seed
        "checkpoint_every": 10,
        "val_fraction": 0.1,
    },
    "eval": {
        "level": "image",           # image | patient
        "aggregation": "none",      # none | wta | mean
        "split": "test",
        "batch_size": 32,
    },
}


def default_config() -> Dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: Dict, override: Dict, prefix: str = "") -> None:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {prefix}{key!r} must be an object")
            _merge(base[key], value, prefix=f"{prefix}{key}.")
        else:
            base[key] = value


def load_config(path) -> Dict:
    """Parse a JSON config file and merge it over the defaults."""
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    resolved = default_config()
    _merge(resolved, document)
    return resolved


def resolve_config(config_path: Optional[str] = None,
                   overrides: Optional[Dict] = None) -> Dict:
    """Defaults <- config file <- programmatic overrides, strictly checked."""
    resolved = load_config(config_path) if config_path else default_config()
    if overrides:
        _merge(resolved, overrides)
    return resolved


def config_help_text() -> str:
    """Every config key with its default, for the CLI help epilog."""
    lines = ["configuration keys (JSON, see --config):"]
    def walk(section: Dict, prefix: str):
        for key, value in section.items():
            if isinstance(value, dict):
                walk(value, f"{prefix}{key}.")
            else:
                lines.append(f"  {prefix}{key} = {json.dumps(value)}")
    walk(DEFAULTS, "")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# dataclass builders
# ---------------------------------------------------------------------------


def model_config_from(cfg: Dict) -> ModelConfig:
    section = cfg["model"]
    return ModelConfig(
        num_classes=section["num_classes"],
        input_shape=tuple(section["input_shape"]),
        stem_widths=tuple(section["stem_widths"]),
        block_widths=tuple(section["block_widths"]),
        irrus_per_block=section["irrus_per_block"],
        time_steps=section["time_steps"],
        activation=section["activation"],
        dropout_p=section["dropout_p"],
        classifier_hidden=section["classifier_hidden"],
    )


def train_config_from(cfg: Dict) -> TrainConfig:
    section = cfg["train"]
    seed = section["seed"] if section["seed"] is not None else cfg["seed"]
    return TrainConfig(
        initial_lr=section["initial_lr"],
        momentum=section["momentum"],
        decay=section["decay"],
        epochs_per_trial=section["epochs_per_trial"],
        trials=section["trials"],
        batch_size=section["batch_size"],
        loss=section["loss"],
        seed=seed,
        checkpoint_every=section["checkpoint_every"],
        val_fraction=section["val_fraction"],
    )


def augment_config_from(cfg: Dict) -> AugmentConfig:
    section = cfg["pipeline"]
    return AugmentConfig(
        rotation_max_deg=section["rotation_max_deg"],
        width_shift_frac=section["width_shift_frac"],
        height_shift_frac=section["height_shift_frac"],
        shear_frac=section["shear_frac"],
        zoom_frac=section["zoom_frac"],
        horizontal_flip=section["horizontal_flip"],
        vertical_flip=section["vertical_flip"],
        outputs_per_input=section["outputs_per_input"],
        seed=cfg["seed"],
    )
