"""Run configuration: JSON schema access with path-aware errors, plus
builders that turn config sections into library objects.

Missing required fields raise ConfigError naming the dotted field path;
optional fields fall back to the desk-scale defaults.
"""

import json
import os

from . import prompts, world as world_mod
from .losses import LossWeights
from .schedule import build_schedule
from .trainer import TrainConfig

_REQUIRED = object()


class ConfigError(ValueError):
    pass


class Config:
    def __init__(self, data, source="config"):
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        self.data = data
        self.source = source

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls(data, source=path)

    def get(self, dotted, default=_REQUIRED):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is _REQUIRED:
                    raise ConfigError(f"missing config field: {dotted}")
                return default
            node = node[part]
        return node

    def require_path(self, dotted):
        p = self.get(dotted)
        if not isinstance(p, str) or not p:
            raise ConfigError(f"config field {dotted} must be a path string")
        if not os.path.exists(p):
            raise ConfigError(f"config field {dotted}: path does not exist: {p}")
        return p


# desk-scale defaults (SCHEDULE_DEFAULTS picks a hot tail so unit-Gaussian
# inference starts in-distribution)
SCHEDULE_DEFAULTS = {"kind": "linear", "T": 100, "beta_start": 1e-4, "beta_end": 0.09}
MODEL_DEFAULTS = {"hidden": 256, "d_tok": 32, "d_cond": 32, "d_time": 16,
                  "encoder_mode": "identity", "latent_dim": None}


def world_spec_from(cfg):
    return world_mod.WorldSpec(
        classes=tuple(cfg.get("world.classes", list(world_mod.DEFAULT_CLASSES))),
        scenes=tuple(cfg.get("world.scenes", list(world_mod.DEFAULT_SCENES))),
        image_hw=int(cfg.get("world.image_hw", 16)),
        calibration_count=int(cfg.get("world.calibration_count", 64)),
        identifiers=tuple(cfg.get("world.identifiers", list(world_mod.DEFAULT_IDENTIFIERS))),
    )


def schedule_from(cfg):
    try:
        return build_schedule(
            cfg.get("schedule.kind", SCHEDULE_DEFAULTS["kind"]),
            int(cfg.get("schedule.T", SCHEDULE_DEFAULTS["T"])),
            float(cfg.get("schedule.beta_start", SCHEDULE_DEFAULTS["beta_start"])),
            float(cfg.get("schedule.beta_end", SCHEDULE_DEFAULTS["beta_end"])),
        )
    except ValueError as exc:
        raise ConfigError(f"config section schedule: {exc}") from exc


def model_kwargs_from(cfg):
    out = {
        "hidden": int(cfg.get("model.hidden", MODEL_DEFAULTS["hidden"])),
        "d_tok": int(cfg.get("model.d_tok", MODEL_DEFAULTS["d_tok"])),
        "d_cond": int(cfg.get("model.d_cond", MODEL_DEFAULTS["d_cond"])),
        "d_time": int(cfg.get("model.d_time", MODEL_DEFAULTS["d_time"])),
        "encoder_mode": cfg.get("model.encoder_mode", MODEL_DEFAULTS["encoder_mode"]),
    }
    latent = cfg.get("model.latent_dim", None)
    if latent is not None:
        out["latent_dim"] = int(latent)
    return out


def weights_from(cfg, section):
    return LossWeights(
        lambda_cs=float(cfg.get(f"{section}.weights.lambda_cs", 1.0)),
        lambda_fi=float(cfg.get(f"{section}.weights.lambda_fi", 0.01)),
        lambda_fs=float(cfg.get(f"{section}.weights.lambda_fs", 0.01)),
    )


def train_config_from(cfg, section, master_seed, defaults):
    window = cfg.get(f"{section}.window", [0.2, 0.8])
    if not (isinstance(window, list) and len(window) == 2):
        raise ConfigError(f"config field {section}.window must be [low, high]")
    return TrainConfig(
        weights=weights_from(cfg, section),
        tau=int(cfg.get(f"{section}.tau", defaults.get("tau", 3))),
        learning_rate=float(cfg.get(f"{section}.learning_rate", defaults["learning_rate"])),
        steps=int(cfg.get(f"{section}.steps", defaults["steps"])),
        batch_size=int(cfg.get(f"{section}.batch_size", defaults.get("batch_size", 1))),
        n_prior=int(cfg.get(f"{section}.n_prior", defaults.get("n_prior", 32))),
        n_instance=int(cfg.get(f"{section}.n_instance", defaults.get("n_instance", 1))),
        window_low=float(window[0]),
        window_high=float(window[1]),
        seed=master_seed,
    )


FINETUNE_DEFAULTS = {"learning_rate": 1e-3, "steps": 600, "n_prior": 32,
                     "n_instance": 1, "tau": 3}
PRETRAIN_DEFAULTS = {"learning_rate": 2e-3, "steps": 6000, "batch_size": 8}


def instance_from(cfg, world, section="finetune.instance"):
    cls = cfg.get(f"{section}.class_noun")
    if cls not in world.spec.classes:
        raise ConfigError(f"config field {section}.class_noun: unknown class {cls!r}")
    if cfg.get(f"{section}.hue", None) is not None:
        inst = world_mod.InstanceSpec(
            class_noun=cls,
            hue=float(cfg.get(f"{section}.hue")),
            texture_phase=float(cfg.get(f"{section}.texture_phase", 0.0)),
            size=float(cfg.get(f"{section}.size", 0.8)),
        )
        index = None
    else:
        index = int(cfg.get(f"{section}.index", 0))
        inst = world_mod.instance_for_index(world.spec, cls, index, world.seed)
    return inst, index


def identifier_from(cfg, world, section="finetune"):
    ident = cfg.get(f"{section}.identifier", prompts.DEFAULT_IDENTIFIER)
    if ident not in world.spec.identifiers:
        raise ConfigError(
            f"config field {section}.identifier: {ident!r} is not a world identifier")
    return ident
