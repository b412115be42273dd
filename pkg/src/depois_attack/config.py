"""Run configuration: JSON schema, defaults and typed accessors.

Unknown keys are rejected everywhere.  Values not given in the file fall
back to :data:`DEFAULTS`; hyperparameters of the WGAN and distillation
stages are ordinary WGAN-GP / distillation defaults, not tuned values.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .attacks import AttackMode
from .data import ImageDataset, SplitSpec, load_idx, synth_digits
from .defense import ClassifierConfig, WganConfig
from .distill import DistillConfig
from .errors import ConfigError
from .metrics import DEFAULT_EPSILONS

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_HIDDEN = {"type": "array", "items": _POS_INT}
_ACT = {"enum": ["relu", "leaky_relu", "sigmoid", "tanh", "identity"]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "dataset": {
            "oneOf": [
                _obj(
                    {
                        "kind": {"const": "synth"},
                        "n_train": _POS_INT,
                        "n_eval": _POS_INT,
                        "seed": _NONNEG_INT,
                        "noise": {"type": "number", "minimum": 0},
                    },
                    ["kind"],
                ),
                _obj(
                    {
                        "kind": {"const": "idx"},
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "eval_images": {"type": "string"},
                        "eval_labels": {"type": "string"},
                        "n_train": _POS_INT,
                        "n_eval": _POS_INT,
                    },
                    ["kind", "train_images", "train_labels", "eval_images", "eval_labels"],
                ),
            ]
        },
        "split": _obj(
            {
                "trusted_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": _NONNEG_INT,
            }
        ),
        "classifier": _obj(
            {"hidden": _HIDDEN, "activation": _ACT, "epochs": _NONNEG_INT, "lr": _POS_NUM, "batch": _POS_INT}
        ),
        "augment": _obj({"per_class": _NONNEG_INT, "epochs": _NONNEG_INT}),
        "wgan": _obj(
            {
                "latent_dim": _POS_INT,
                "n_critic": _POS_INT,
                "gp_weight": {"type": "number", "minimum": 0},
                "lipschitz_mode": {"enum": ["finite_diff_gp", "weight_clip"]},
                "clip": _POS_NUM,
                "epochs": _NONNEG_INT,
                "batch": _POS_INT,
                "lr": _POS_NUM,
                "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "minItems": 2, "maxItems": 2},
                "critic_hidden": _HIDDEN,
                "generator_hidden": _HIDDEN,
            }
        ),
        "distill": _obj(
            {
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "temperature": _POS_NUM,
                "classifier_hidden": _HIDDEN,
                "critic_hidden": _HIDDEN,
                "activation": _ACT,
                "critic_activation": _ACT,
                "epochs": _NONNEG_INT,
                "critic_epochs": _NONNEG_INT,
                "lr": _POS_NUM,
                "batch": _POS_INT,
                "query_budget": {"type": ["integer", "null"], "minimum": 1},
            }
        ),
        "attack": _obj(
            {
                "epsilons": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
                "modes": {"type": "array", "items": {"enum": [m.value for m in AttackMode]}, "minItems": 1},
                "access": {"type": "array", "items": {"enum": ["white", "black"]}, "minItems": 1},
                "table_epsilon": {"type": "number", "minimum": 0, "maximum": 1},
            }
        ),
        "boundary_q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": _NONNEG_INT,
        "strict": {"type": "boolean"},
        "out": {"type": "string"},
    }
)

DEFAULTS = {
    "dataset": {"kind": "synth", "n_train": 2000, "n_eval": 1000, "seed": 1, "noise": 0.25},
    "split": {"trusted_fraction": 0.1, "seed": 0},
    "classifier": {"hidden": [256, 128], "activation": "relu", "epochs": 30, "lr": 1e-3, "batch": 64},
    "augment": {"per_class": 10, "epochs": 20},
    "wgan": {
        "latent_dim": 32,
        "n_critic": 5,
        "gp_weight": 10.0,
        "lipschitz_mode": "finite_diff_gp",
        "clip": 0.01,
        "epochs": 10,
        "batch": 64,
        "lr": 1e-4,
        "betas": [0.5, 0.9],
        "critic_hidden": [256, 128],
        "generator_hidden": [128, 256],
    },
    "distill": {
        "alpha": 0.5,
        "temperature": 4.0,
        "classifier_hidden": [128],
        "critic_hidden": [256, 128],
        "activation": "relu",
        "critic_activation": "leaky_relu",
        "epochs": 30,
        "critic_epochs": 30,
        "lr": 1e-3,
        "batch": 64,
        "query_budget": None,
    },
    "attack": {
        "epsilons": list(DEFAULT_EPSILONS),
        "modes": [m.value for m in AttackMode],
        "access": ["white", "black"],
        "table_epsilon": 0.7,
    },
    "boundary_q": 0.05,
    "seed": 0,
    "strict": False,
    "out": "runs/default",
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "dataset":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, spec: dict, base_dir=".") -> RunConfig:
        try:
            jsonschema.validate(spec, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        merged = _merge(DEFAULTS, spec)
        if merged["dataset"]["kind"] == "synth":
            merged["dataset"] = _merge(DEFAULTS["dataset"], merged["dataset"])
        return cls(merged, Path(base_dir))

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            spec = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
        return cls.from_dict(spec, path.parent)

    def with_overrides(self, seed: int | None = None, out: str | None = None, strict: bool | None = None) -> RunConfig:
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw["out"] = out
        if strict is not None:
            raw["strict"] = strict or raw["strict"]
        return RunConfig(raw, self.base_dir)

    def reproducible(self) -> dict:
        """Config without the output location, which does not affect results."""
        return {k: v for k, v in self.raw.items() if k != "out"}

    def digest(self) -> str:
        canon = json.dumps(self.reproducible(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def strict(self) -> bool:
        return self.raw["strict"]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def q(self) -> float:
        return self.raw["boundary_q"]

    def stage_seed(self, offset: int) -> int:
        return self.seed * 1000 + offset

    def split(self) -> SplitSpec:
        return SplitSpec(**self.raw["split"])

    def classifier(self) -> ClassifierConfig:
        c = self.raw["classifier"]
        return ClassifierConfig(tuple(c["hidden"]), c["activation"], c["epochs"], c["lr"], c["batch"])

    def wgan(self, epochs: int | None = None) -> WganConfig:
        w = dict(self.raw["wgan"])
        w["betas"] = tuple(w["betas"])
        w["critic_hidden"] = tuple(w["critic_hidden"])
        w["generator_hidden"] = tuple(w["generator_hidden"])
        if epochs is not None:
            w["epochs"] = epochs
        return WganConfig(**w)

    def distill(self) -> DistillConfig:
        d = dict(self.raw["distill"])
        d["classifier_hidden"] = tuple(d["classifier_hidden"])
        d["critic_hidden"] = tuple(d["critic_hidden"])
        return DistillConfig(**d)

    @property
    def attack(self) -> dict:
        return self.raw["attack"]

    @property
    def augment(self) -> dict:
        return self.raw["augment"]

    def _path(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def datasets(self) -> tuple[ImageDataset, ImageDataset]:
        """``(train, eval)`` pair described by the dataset block."""
        d = self.raw["dataset"]
        if d["kind"] == "synth":
            n_train, n_eval = d.get("n_train", 2000), d.get("n_eval", 1000)
            full = synth_digits(n_train + n_eval, d.get("seed", 1), d.get("noise", 0.25))
            return full.subset(range(n_train), "synth/train"), full.subset(range(n_train, n_train + n_eval), "synth/eval")
        train = load_idx(self._path(d["train_images"]), self._path(d["train_labels"]), d.get("n_train"))
        test = load_idx(self._path(d["eval_images"]), self._path(d["eval_labels"]), d.get("n_eval"))
        return train, test
