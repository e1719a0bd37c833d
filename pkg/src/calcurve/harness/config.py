"""Experiment configuration: a published JSON schema plus typed views of each section."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from ..curvature import CurvatureProbeConfig
from ..errors import ConfigError, SpecError
from ..lossfns import CalMOConfig
from ..netcore import ACTIVATIONS, INIT_SCHEMES
from ..optim import KINDS, OptimizerConfig

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_seed = {"type": "integer", "minimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "calcurve experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "network", "optimizer", "steps"],
    "properties": {
        "name": {"type": "string"},
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "oneOf": [
                {
                    "properties": {
                        "kind": {"const": "gaussian_mixture"},
                        "K": {"type": "integer", "minimum": 2},
                        "d": _pos_int,
                        "n_per_class": _pos_int,
                        "separation": {"type": "number", "minimum": 0},
                        "bayes_accuracy": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                    "required": ["kind", "K", "d", "n_per_class"],
                    "additionalProperties": False,
                },
                {
                    "properties": {
                        "kind": {"const": "cifar10"},
                        "dir": {"type": "string"},
                        "part": {"enum": ["train", "test", "all"]},
                    },
                    "additionalProperties": False,
                },
                {
                    "properties": {"kind": {"const": "npz"}, "path": {"type": "string"}},
                    "required": ["kind", "path"],
                    "additionalProperties": False,
                },
            ],
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train_n", "val_n"],
            "properties": {"train_n": _nonneg_int, "val_n": _nonneg_int, "seed": _seed},
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["hidden_layers"],
            "properties": {
                "hidden_layers": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "prefixItems": [_pos_int, {"enum": list(ACTIVATIONS)}],
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
                "init_scheme": {"enum": list(INIT_SCHEMES)},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["ce", "mse", "calmo"]},
                "calmo": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "lambda_r": {"type": "number", "minimum": 0},
                        "lambda_s": {"type": "number", "minimum": 0},
                        "epsilon": {"type": "number", "minimum": 0},
                        "pgd_steps": _pos_int,
                        "pgd_alpha": {"type": "number", "exclusiveMinimum": 0},
                        "random_start": {"type": "boolean"},
                        "seed": _seed,
                    },
                },
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "lr"],
            "properties": {
                "kind": {"enum": list(KINDS)},
                "lr": {"type": "number", "minimum": 0},
                "batch_size": _pos_int,
                "momentum": _num,
                "beta1": _num,
                "beta2": _num,
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "sam_rho": {"type": "number", "minimum": 0},
                "muon_ns_steps": _nonneg_int,
                "muon_coeffs": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                "muon_polish_steps": _nonneg_int,
                "bulk_k": _nonneg_int,
                "bulk_refresh_every": _pos_int,
                "bulk_power_iters": _pos_int,
            },
        },
        "steps": _nonneg_int,
        "probe_every": _pos_int,
        "probe": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "splits": {"type": "array", "items": {"enum": ["train", "val"]}, "minItems": 1, "uniqueItems": True},
                "power_iters": _pos_int,
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "probe_batch_size": _pos_int,
                "gn_max_examples": _pos_int,
                "epsilon": {"type": "number", "minimum": 0},
                "pgd_steps": _pos_int,
                "pgd_alpha": {"type": "number", "exclusiveMinimum": 0},
                "grid_points": {"type": "integer", "minimum": 2},
                "bins": _pos_int,
                "bounds": {"type": "boolean"},
                "bound_tol": {"type": "number", "minimum": 0},
                "abort_on_violation": {"type": "boolean"},
                "curvature": {"type": "boolean"},
            },
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"global": _seed, "data": _seed, "probe": _seed},
        },
        "log_dir": {"type": "string"},
    },
}


@dataclass(frozen=True)
class ProbeSettings:
    splits: tuple[str, ...] = ("train", "val")
    power_iters: int = 100
    tol: float = 1e-6
    probe_batch_size: int = 128
    gn_max_examples: int | None = None
    epsilon: float = 8 / 255
    pgd_steps: int = 3
    pgd_alpha: float = 2 / 255
    grid_points: int | None = None
    bins: int = 15
    bounds: bool = True
    bound_tol: float = 1e-9
    abort_on_violation: bool = True
    curvature: bool = True

    def curvature_config(self, seed: int) -> CurvatureProbeConfig:
        return CurvatureProbeConfig(power_iters=self.power_iters, tol=self.tol,
                                    probe_batch_size=self.probe_batch_size, rng_seed=seed)


@dataclass(frozen=True)
class Seeds:
    global_: int = 0
    data: int = 0
    probe: int = 0


@dataclass
class ExperimentConfig:
    dataset: dict
    network: dict
    optimizer: OptimizerConfig
    steps: int
    loss_kind: str = "ce"
    calmo: CalMOConfig | None = None
    split: dict | None = None
    probe_every: int = 50
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    seeds: Seeds = field(default_factory=Seeds)
    log_dir: str = "runs/default"
    name: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def loss(self):
        """What the loss functions accept: 'ce', 'mse' or a CalMOConfig."""
        return self.calmo if self.loss_kind == "calmo" else self.loss_kind


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else ""


def validate(raw: dict) -> None:
    """Raise ConfigError naming the JSON pointer of the first offending key."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = errors[-1]
    # descend into oneOf branches to report the deepest concrete problem
    while err.context:
        err = max(err.context, key=lambda e: len(e.absolute_path))
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
    raise ConfigError(f"{err.message}", _pointer(path))


def _build(cls, kwargs: dict, pointer: str):
    try:
        return cls(**kwargs)
    except SpecError as exc:
        raise ConfigError(str(exc), pointer) from exc


def from_dict(raw: dict) -> ExperimentConfig:
    validate(raw)
    loss = raw.get("loss", {})
    kind = loss.get("kind", "ce")
    calmo = _build(CalMOConfig, loss.get("calmo", {}), "/loss/calmo") if kind == "calmo" else None
    opt = _build(OptimizerConfig, raw["optimizer"], "/optimizer")
    probe = dict(raw.get("probe", {}))
    if "splits" in probe:
        probe["splits"] = tuple(probe["splits"])
    if calmo is not None:
        probe.setdefault("epsilon", calmo.epsilon)
        probe.setdefault("pgd_steps", calmo.pgd_steps)
        probe.setdefault("pgd_alpha", calmo.pgd_alpha)
    probe_cfg = ProbeSettings(**probe)
    s = raw.get("seeds", {})
    return ExperimentConfig(
        dataset=dict(raw["dataset"]),
        network=dict(raw["network"]),
        optimizer=opt,
        steps=int(raw["steps"]),
        loss_kind=kind,
        calmo=calmo,
        split=raw.get("split"),
        probe_every=int(raw.get("probe_every", 50)),
        probe=probe_cfg,
        seeds=Seeds(s.get("global", 0), s.get("data", 0), s.get("probe", 0)),
        log_dir=raw.get("log_dir", "runs/default"),
        name=raw.get("name", ""),
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return from_dict(raw)


def data_dir(explicit: str | None = None) -> str | None:
    return explicit or os.environ.get("CALCURVE_DATA_DIR")
