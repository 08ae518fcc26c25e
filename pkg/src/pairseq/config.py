"""Training configuration, its JSON schema, and load/dump helpers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .losses import check_alphas
from .model import ModelConfig

REGIMENS = ("multitask", "ntp_only", "finetune_sg", "fresh_sg")
PRETRAIN_REGIMENS = ("multitask", "ntp_only")
FINETUNE_REGIMENS = ("finetune_sg", "fresh_sg")

# best learning rates from the published search; finetuning used the NTP-only rate
DEFAULT_LR = {"multitask": 1e-4, "ntp_only": 1e-5, "finetune_sg": 1e-5, "fresh_sg": 1e-5}

_MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d_model": {"type": "integer", "minimum": 4},
        "seq_positions": {"type": "integer", "minimum": 1},
        "n_layers": {"type": "integer", "minimum": 1},
        "n_heads": {"type": "integer", "minimum": 1},
        "forward_expansion": {"type": "integer", "minimum": 1},
        "dropout_p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "ntp_hidden": {"type": ["integer", "null"], "minimum": 1},
        "mbm_hidden": {"type": ["integer", "null"], "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "regimen": {"enum": list(REGIMENS) + [r.replace("_", "-") for r in REGIMENS]},
        "alpha1": {"type": "number", "minimum": 0, "maximum": 1},
        "alpha2": {"type": "number", "minimum": 0, "maximum": 1},
        "lr": {"type": ["number", "null"], "minimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay_mode": {"const": "coupled"},
        "n_train_cap": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "n_val_cap": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "record_wall_time": {"type": "boolean"},
        "model": _MODEL_SCHEMA,
    },
}


@dataclass
class TrainConfig:
    regimen: str = "multitask"
    alpha1: float = 0.1
    alpha2: float = 0.9
    lr: float | None = None
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    weight_decay_mode: str = "coupled"
    n_train_cap: int = 10_000
    n_val_cap: int = 400
    record_wall_time: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.regimen = self.regimen.replace("-", "_")
        if self.regimen not in REGIMENS:
            raise ConfigError(f"regimen must be one of {REGIMENS}, got {self.regimen!r}")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.regimen == "ntp_only":
            self.alpha1, self.alpha2 = 1.0, 0.0
        check_alphas(self.alpha1, self.alpha2)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.regimen]
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.weight_decay_mode != "coupled":
            raise ConfigError("only coupled (L2-in-gradient) weight decay is implemented")

    @property
    def task(self) -> str:
        return "ntp" if self.regimen in PRETRAIN_REGIMENS else "sg"

    @property
    def uses_mbm(self) -> bool:
        return self.regimen == "multitask"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def config_from_dict(data: dict) -> TrainConfig:
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    data = dict(data)
    if "model" in data:
        data["model"] = ModelConfig.from_dict(data["model"])
    regimen = data.get("regimen", "multitask").replace("-", "_")
    if regimen == "ntp_only" and ("alpha1" in data or "alpha2" in data):
        if (data.get("alpha1", 1.0), data.get("alpha2", 0.0)) != (1.0, 0.0):
            raise ConfigError("ntp_only fixes (alpha1, alpha2) = (1, 0)")
    return TrainConfig(**data)


def load_config(path: str | Path | None, **overrides) -> TrainConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
