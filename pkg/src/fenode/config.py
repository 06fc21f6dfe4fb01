"""Experiment configuration files (YAML) with schema validation.

A config is either a path to a YAML file or ``preset:<name>`` for one of the
files shipped in ``fenode/presets``.  Missing sections take the defaults of
the corresponding dataclasses.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .encoder import MODES
from .errors import ConfigError
from .mpc import CostWeights, MpcConfig
from .systems import DynamicsFamily, GenConfig, make_family
from .training import Arch, TrainConfig

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_NUMS = {"type": "array", "items": _NUM}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "name": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "family": _obj({"name": {"enum": ["van_der_pol", "quad2d", "constant_field"]},
                    "low": _NUM, "high": _NUM}, ["name"]),
    "gen": _obj({"n_datasets": _INT1, "steps": {"type": "integer", "minimum": 2}, "dt": _POS,
                 "dt_jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                 "substeps": {"type": "integer", "minimum": 4},
                 "policy": {"enum": ["none", "random_uniform", "pd_waypoint"]},
                 "init_low": _NUMS, "init_high": _NUMS, "waypoint_every": _INT1,
                 "noise_frac": {"type": "number", "minimum": 0}}),
    "eval_data": _obj({"values": {"type": "array", "items": _NUM, "minItems": 1}, "per_value": _INT1,
                       "steps": {"type": "integer", "minimum": 2}, "seed": {"type": "integer", "minimum": 0}}),
    "arch": _obj({"mode": {"enum": list(MODES)}, "k": _INT1,
                  "hidden": {"type": "array", "items": _INT1, "minItems": 1},
                  "normalize": {"enum": ["state", "rate"]}}),
    "train": _obj({"steps": {"type": "integer", "minimum": 0}, "lr": _POS, "clip": _POS,
                   "functions_per_update": _INT1, "batch_size": {"type": "integer", "minimum": 2},
                   "volume": _POS, "substeps": _INT1, "coef_split": {"type": "boolean"},
                   "gram_every": {"type": "integer", "minimum": 0}}),
    "eval": _obj({"estimator": {"enum": ["least_squares", "inner_product"]},
                  "ridge": {"type": "number", "minimum": 0}, "m": _INT1,
                  "horizons": {"type": "array", "items": _INT1, "minItems": 1}, "substeps": _INT1}),
    "ablate": _obj({"axis": {"enum": ["basis_count", "example_size"]},
                    "grid": {"type": "array", "items": {"type": "integer"}, "minItems": 1}}),
    "mpc": _obj({"horizon": _INT1, "samples": _INT1, "iterations": {"type": "integer", "minimum": 0},
                 "episode_steps": {"type": "integer", "minimum": 0}, "warm_start": {"type": "boolean"},
                 "dt": _POS, "u_low": _NUM, "u_high": _NUM, "step_size": {"type": "number", "minimum": 0},
                 "sample_std": {"type": "number", "minimum": 0}, "model_substeps": _INT1,
                 "weights": _obj({k: {"type": "number", "minimum": 0}
                                  for k in ("goal", "attitude", "velocity", "thrust_diff")}),
                 "masses": {"type": "array", "items": _POS, "minItems": 1},
                 "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                 "start": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                 "goal": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                 "identify_tuples": {"type": "integer", "minimum": 2}}),
}, ["family"])

EVAL_DEFAULTS = {"estimator": "least_squares", "ridge": 1e-6, "m": 1000, "horizons": [1, 10], "substeps": 1}
MPC_SCENARIO_KEYS = ("masses", "seeds", "start", "goal", "identify_tuples")
MPC_SCENARIO_DEFAULTS = {"masses": [0.7, 1.0, 1.3], "seeds": [0, 1, 2, 3, 4], "start": [0.0, 0.0],
                         "goal": [0.0, 1.0], "identify_tuples": 400}


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("fenode.presets").iterdir() if p.name.endswith(".yaml"))


def _read_text(source: str) -> str:
    if source.startswith("preset:"):
        name = source.split(":", 1)[1]
        if name not in preset_names():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        return resources.files("fenode.presets").joinpath(f"{name}.yaml").read_text()
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {source}")
    return path.read_text()


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def name(self) -> str:
        return self.raw.get("name", "experiment")

    def sha256(self) -> str:
        """Hash of the canonical JSON form, after overrides."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def section(self, key: str) -> dict:
        return copy.deepcopy(self.raw.get(key, {}))

    def family(self) -> DynamicsFamily:
        f = self.raw["family"]
        return make_family(f["name"], f.get("low"), f.get("high"))

    def gen_config(self) -> GenConfig:
        g = self.section("gen")
        if self.raw["family"]["name"] == "quad2d":
            g.setdefault("policy", "pd_waypoint")
        return GenConfig(seed=self.seed, **g)

    def eval_gen_config(self) -> GenConfig:
        """Held-out datasets: ``per_value`` trajectories at each listed hidden value."""
        e = self.section("eval_data")
        base = self.gen_config()
        values = e.get("values")
        per = e.get("per_value", 1)
        if values is None:
            fam = self.family()
            values = [0.5 * (fam.low + fam.high)]
        params = [float(v) for v in values for _ in range(per)]
        return GenConfig(n_datasets=len(params), steps=e.get("steps", base.steps), dt=base.dt,
                         dt_jitter=base.dt_jitter, substeps=base.substeps,
                         seed=e.get("seed", self.seed + 1000), policy=base.policy,
                         init_low=base.init_low, init_high=base.init_high, param_values=params,
                         waypoint_every=base.waypoint_every, noise_frac=base.noise_frac)

    def arch(self) -> Arch:
        a = self.section("arch")
        arch = Arch(a.get("mode", "fe_node"), a.get("k", 11), tuple(a.get("hidden", (64, 64))),
                    a.get("normalize", "state"))
        if arch.mode in ("node_baseline", "oracle_baseline") and arch.k != 1:
            raise ConfigError(f"{arch.mode} is a single network; set k: 1")
        return arch

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.section("train"))

    def eval_settings(self) -> dict:
        return {**EVAL_DEFAULTS, **self.section("eval")}

    def ablate_settings(self) -> dict:
        a = {"axis": "basis_count", "grid": [1, 2, 5, 11], **self.section("ablate")}
        if a["axis"] == "basis_count" and min(a["grid"]) < 1:
            raise ConfigError("basis counts must be >= 1")
        if a["axis"] == "example_size" and min(a["grid"]) < 2:
            raise ConfigError("example sizes must be >= 2")
        return a

    def mpc_config(self, seed: int | None = None) -> MpcConfig:
        m = {k: v for k, v in self.section("mpc").items() if k not in MPC_SCENARIO_KEYS}
        if "weights" in m:
            m["weights"] = CostWeights(**m["weights"])
        return MpcConfig(seed=self.seed if seed is None else seed, **m)

    def mpc_scenario(self) -> dict:
        m = self.section("mpc")
        return {k: m.get(k, v) for k, v in MPC_SCENARIO_DEFAULTS.items()}


def parse_config(data: dict, seed: int | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {err.message}") from None
    data = copy.deepcopy(data)
    if seed is not None:
        data["seed"] = int(seed)
    cfg = ExperimentConfig(data)
    # build every section once so bad combinations fail before any work starts
    cfg.family(), cfg.gen_config(), cfg.arch(), cfg.train_config(), cfg.eval_settings()
    if "mpc" in data:
        cfg.mpc_config()
    if "ablate" in data:
        cfg.ablate_settings()
    return cfg


def load_config(source: str, seed: int | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(_read_text(str(source)))
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config: {err}") from None
    return parse_config(data, seed)
