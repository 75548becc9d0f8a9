"""Strict JSON experiment configuration.

Unknown fields are rejected so every artifact records exactly the knobs
that produced it; validation errors carry the offending field path.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import jsonschema

from .model import CorpusSpec
from .objectives import METHODS, UnlearnLossSpec
from .protocols import (
    ExperimentConfig,
    ModelConfig,
    ProbeConfig,
    RelearnConfig,
    TrainConfig,
    UnlearnConfig,
    RELEARN_SOURCES,
)
from .regimes import RegimeThresholds

__all__ = ["ConfigError", "CONFIG_SCHEMA", "config_from_dict", "config_to_dict", "load_config"]


class ConfigError(ValueError):
    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message)
        self.field_path = field_path


def _obj(properties: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": properties}


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_NONNEG_NUM = {"type": "number", "minimum": 0}
_UNIT_FRACTION = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

CONFIG_SCHEMA = _obj(
    {
        "seed": {"type": "integer"},
        "corpus": _obj(
            {
                "vocab_size": {"type": "integer", "minimum": 8},
                "context_len": _POS_INT,
                "seq_len": {"type": "integer", "minimum": 2},
                "n_forget": _POS_INT,
                "n_retain": _POS_INT,
                "n_unrelated": _POS_INT,
                "n_holdout": _POS_INT,
                "unrelated_token_lo": _POS_INT,
            }
        ),
        "model": _obj(
            {
                "embed_dim": _POS_INT,
                "hidden_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
            }
        ),
        "train": _obj(
            {
                "steps": _NONNEG_INT,
                "batch_size": _POS_INT,
                "peak_lr": _POS_NUM,
                "accuracy_floor": {"type": "number", "minimum": 0, "maximum": 1},
            }
        ),
        "unlearn": _obj(
            {
                "method": {"enum": list(METHODS)},
                "peak_lr": _POS_NUM,
                "n_requests": _POS_INT,
                "steps_per_request": _NONNEG_INT,
                "batch_size": _POS_INT,
                "lam": _NONNEG_NUM,
                "beta": _POS_NUM,
                "mask_fraction": _UNIT_FRACTION,
                "rlabel_seed": {"type": "integer"},
                "npo_granularity": {"enum": ["sequence", "token"]},
            }
        ),
        "relearn": _obj(
            {
                "source": {"enum": list(RELEARN_SOURCES)},
                "budget": _NONNEG_INT,
                "steps": _NONNEG_INT,
                "peak_lr": _POS_NUM,
                "batch_size": _POS_INT,
            }
        ),
        "probe": _obj(
            {
                "size": {"type": "integer", "minimum": 3},
                "mia_k": _UNIT_FRACTION,
            }
        ),
        "thresholds": _obj(
            {
                "catastrophic_drop": _NONNEG_NUM,
                "irreversible_residual": _NONNEG_NUM,
                "near_zero_band": _NONNEG_NUM,
            }
        ),
    }
)


def _validate_schema(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {err.message}", field_path=path)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", field_path="<root>")
    _validate_schema(raw)

    def section(name: str) -> dict:
        return dict(raw.get(name, {}))

    model_raw = section("model")
    if "hidden_widths" in model_raw:
        model_raw["hidden_widths"] = tuple(model_raw["hidden_widths"])
    unlearn_raw = section("unlearn")
    loss = UnlearnLossSpec(
        method=unlearn_raw.pop("method", UnlearnLossSpec.method),
        lam=unlearn_raw.pop("lam", UnlearnLossSpec.lam),
        beta=unlearn_raw.pop("beta", UnlearnLossSpec.beta),
        mask_fraction=unlearn_raw.pop("mask_fraction", UnlearnLossSpec.mask_fraction),
        rlabel_seed=unlearn_raw.pop("rlabel_seed", UnlearnLossSpec.rlabel_seed),
        npo_granularity=unlearn_raw.pop("npo_granularity", UnlearnLossSpec.npo_granularity),
    )
    try:
        config = ExperimentConfig(
            seed=raw.get("seed", 0),
            corpus=CorpusSpec(**section("corpus")),
            model=ModelConfig(**model_raw),
            train=TrainConfig(**section("train")),
            unlearn=UnlearnConfig(loss=loss, **unlearn_raw),
            relearn=RelearnConfig(**section("relearn")),
            probe=ProbeConfig(**section("probe")),
            thresholds=RegimeThresholds(**section("thresholds")),
        )
        config.validate()
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    return config


def config_to_dict(config: ExperimentConfig) -> dict:
    unlearn = {
        "method": config.unlearn.loss.method,
        "lam": config.unlearn.loss.lam,
        "beta": config.unlearn.loss.beta,
        "mask_fraction": config.unlearn.loss.mask_fraction,
        "rlabel_seed": config.unlearn.loss.rlabel_seed,
        "npo_granularity": config.unlearn.loss.npo_granularity,
        "peak_lr": config.unlearn.peak_lr,
        "n_requests": config.unlearn.n_requests,
        "steps_per_request": config.unlearn.steps_per_request,
        "batch_size": config.unlearn.batch_size,
    }
    model = asdict(config.model)
    model["hidden_widths"] = list(config.model.hidden_widths)
    return {
        "seed": config.seed,
        "corpus": asdict(config.corpus),
        "model": model,
        "train": asdict(config.train),
        "unlearn": unlearn,
        "relearn": asdict(config.relearn),
        "probe": asdict(config.probe),
        "thresholds": asdict(config.thresholds),
    }


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return config_from_dict(raw)
