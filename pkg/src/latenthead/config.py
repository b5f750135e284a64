"""Run configuration: one JSON document with a section per module.

Every section is optional; missing keys take the dataclass defaults.  The
seed resolution order is command-line flag, then ``LH_SEED``, then the
document's top-level ``seed``.  A resolved seed is copied into every section
that does not set its own, except that a flag or ``LH_SEED`` wins everywhere.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

import jsonschema

from .synthworld import TARGET_VARS

SCHEMA_VERSION = 1

_num = {"type": "number"}
_int = {"type": "integer"}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_int = {"type": "integer", "minimum": 1}
_bool = {"type": "boolean"}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_train = _section({
    "lr_max": {"type": "number", "exclusiveMinimum": 0},
    "lr_min": {"type": "number", "minimum": 0},
    "warmup_steps": _nonneg_int,
    "epochs": _nonneg_int,
    "batch_size": _pos_int,
    "seed": _int,
    "loss_weights": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
    "head_variant": {"enum": ["literal", "compact"]},
    "latent_cache": _bool,
    "input_noise": {"type": "number", "minimum": 0},
    "rollout_steps": _pos_int,
    "rollout_epochs": _nonneg_int,
})

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "latenthead run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": _int,
        "variables": {"type": "array", "items": {"enum": list(TARGET_VARS)}, "uniqueItems": True,
                      "minItems": 1},
        "world": _section({
            "H": _pos_int, "W": _pos_int, "seed": _int, "dt": {"type": "number", "exclusiveMinimum": 0},
            "kappa": {"type": "number", "minimum": 0}, "rotation_speed": _num,
            "forcing_modes": _nonneg_int, "mode_amplitude": _num,
            "coupling": {"type": "object",
                         "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
            "n_steps": _pos_int, "n_train": _pos_int, "n_val": _pos_int, "spinup": _nonneg_int,
            "relax_rate": {"type": "number", "minimum": 0, "maximum": 1},
            "land_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "evap_coeff": _num, "precip_scale": _num, "precip_gamma": {"type": "number", "exclusiveMinimum": 0},
            "soil_decay": _num, "soil_gain": _num, "soil_loss": _num, "soil_noise": _num,
            "soil_capacity": {"type": "number", "exclusiveMinimum": 0}, "infiltration": _num,
            "noise_persistence": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "noise_modes": _pos_int, "atm_levels": _pos_int,
            "atm_anomaly": {"type": "number", "minimum": 0},
            "atm_persistence": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        }),
        "backbone": _section({
            "T": _pos_int, "P": _pos_int, "E": {"type": "integer", "minimum": 2},
            "L_lat": _pos_int, "n_blocks": _nonneg_int, "seed": _int,
        }),
        "pretrain": _train,
        "decoder": _train,
        "finetune": _train,
        "metrics": _section({
            "fss_window": {"type": "integer", "minimum": 1},
            "fss_thresholds": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            "seeps_dry_threshold": {"type": "number", "exclusiveMinimum": 0},
            "relative_normalizer": {"enum": ["mean_abs_ref", "ref_std"]},
            "lat_weighted": _bool,
        }),
        "rollout": _section({"steps": _pos_int, "init": {"type": ["integer", "null"]}}),
    },
}

# desk defaults. Pretraining: short, noisy, then a few unrolled epochs so
# 64-step rollouts stay bounded. Decoder heads see perturbed latents for the
# same reason. Fine-tuning matches the pretraining length.
PRETRAIN_DEFAULTS = {"lr_max": 1e-3, "lr_min": 1e-4, "epochs": 3, "input_noise": 0.1,
                     "rollout_steps": 8, "rollout_epochs": 2}
DECODER_DEFAULTS = {"input_noise": 0.3}
FINETUNE_DEFAULTS = {"epochs": 3}


class ConfigError(ValueError):
    """Invalid configuration; the command-line tool exits with status 2."""


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise ConfigError(f"config {where}: {e.message}") from None


def load(path=None, seed_flag: int | None = None, env=None) -> dict:
    """Read, validate and resolve a config document (``path`` may be None)."""
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return resolve(doc, seed_flag, env)


def resolve(doc: dict, seed_flag: int | None = None, env=None) -> dict:
    validate(doc)
    env = os.environ if env is None else env
    cfg = copy.deepcopy(doc)
    forced = seed_flag
    if forced is None and env.get("LH_SEED", "") != "":
        try:
            forced = int(env["LH_SEED"])
        except ValueError:
            raise ConfigError(f"LH_SEED must be an integer, got {env['LH_SEED']!r}") from None
    seed = forced if forced is not None else cfg.get("seed", 0)
    cfg["seed"] = seed
    cfg.setdefault("variables", list(TARGET_VARS))
    cfg["pretrain"] = {**PRETRAIN_DEFAULTS, **cfg.get("pretrain", {})}
    cfg["decoder"] = {**DECODER_DEFAULTS, **cfg.get("decoder", {})}
    cfg["finetune"] = {**FINETUNE_DEFAULTS, **cfg.get("finetune", {})}
    for sec in ("world", "backbone", "pretrain", "decoder", "finetune"):
        s = cfg.setdefault(sec, {})
        if forced is not None or "seed" not in s:
            s["seed"] = seed
    cfg.setdefault("metrics", {})
    cfg.setdefault("rollout", {})
    check(cfg)
    return cfg


def check(cfg: dict) -> None:
    """Build every config object once so value errors surface as config errors."""
    from .metrics import MetricConfig
    from .synthworld import WorldConfig
    from .trainer import TrainConfig

    try:
        WorldConfig.from_dict(cfg["world"])
        for mode in ("pretrain", "decoder", "finetune"):
            TrainConfig(mode=mode, **cfg[mode])
        m = dict(cfg["metrics"])
        if "fss_thresholds" in m:
            m["fss_thresholds"] = tuple(m["fss_thresholds"])
        MetricConfig(**m)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
