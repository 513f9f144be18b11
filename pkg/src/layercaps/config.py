"""JSON run configuration with field-level, aggregated validation.

Schema (every key optional, unknown keys rejected)::

    {
      "task": "copy" | "reverse" | "swap-translate",
      "steps": int >= 0, "seed": int, "eval_every": int >= 1,
      "output_dir": str, "checkpoint": str, "load_checkpoint": str | null,
      "model": {"L", "d", "heads", "d_ff", "vocab_size", "max_len",
                "aggregate_encoder", "aggregate_decoder"},
      "aggregator": {"strategy", "N", "T", "capsule_input_mode", "variance_floor",
                     "lambda_schedule", "beta_a", "beta_mu", "beta_trainable",
                     "ffn_hidden", "normalize_weights", "normalize_inputs"},
      "train": {"batch_size", "lr", "warmup", "beta1", "beta2", "eps", "clip_norm",
                "min_len", "max_len", "eval_size"}
    }
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .aggregation import AggregatorConfig, ConfigError
from .model import ModelConfig
from .tasks import TASKS
from .train import TrainConfig

_INT, _FLOAT, _BOOL, _STR = "integer", "number", "boolean", "string"

_TOP = {"task": _STR, "steps": _INT, "seed": _INT, "eval_every": _INT, "output_dir": _STR,
        "checkpoint": _STR, "load_checkpoint": (_STR, None)}
_MODEL = {"L": _INT, "d": _INT, "heads": _INT, "d_ff": _INT, "vocab_size": _INT, "max_len": _INT,
          "aggregate_encoder": _BOOL, "aggregate_decoder": _BOOL}
_AGGREGATOR = {"strategy": _STR, "N": _INT, "T": _INT, "capsule_input_mode": _STR,
               "variance_floor": _FLOAT, "lambda_schedule": ("list", None), "beta_a": _FLOAT,
               "beta_mu": _FLOAT, "beta_trainable": _BOOL, "ffn_hidden": (_INT, None),
               "normalize_weights": _BOOL, "normalize_inputs": _BOOL}
_TRAIN = {"batch_size": _INT, "lr": _FLOAT, "warmup": _INT, "beta1": _FLOAT, "beta2": _FLOAT,
          "eps": _FLOAT, "clip_norm": (_FLOAT, None), "min_len": _INT, "max_len": _INT,
          "eval_size": _INT}
SECTIONS = {"model": _MODEL, "aggregator": _AGGREGATOR, "train": _TRAIN}

PLACEMENTS = {"enc": (True, False), "dec": (False, True), "both": (True, True), "none": (False, False)}


@dataclass
class RunConfig:
    task: str = "copy"
    steps: int = 3000
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint: str = "model.lcap"
    load_checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def aggregator(self) -> AggregatorConfig:
        return self.model.aggregator

    def problems(self) -> list[str]:
        errs = []
        if self.task not in TASKS:
            errs.append(f"task: {self.task!r} not in {sorted(TASKS)}")
        if self.steps < 0:
            errs.append(f"steps: must be >= 0, got {self.steps}")
        errs.extend(self.model.problems())
        errs.extend(self.train.problems())
        m, t = self.model, self.train
        if isinstance(m.max_len, int) and isinstance(t.max_len, int) and t.max_len + 1 > m.max_len:
            errs.append(f"train.max_len: {t.max_len} plus EOS exceeds model.max_len {m.max_len}")
        return errs

    def validate(self) -> "RunConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        model = asdict(self.model)
        out = {"task": self.task, "steps": self.steps, "seed": self.seed,
               "eval_every": self.train.eval_every, "output_dir": self.output_dir,
               "checkpoint": self.checkpoint, "load_checkpoint": self.load_checkpoint,
               "aggregator": model.pop("aggregator"), "model": model, "train": asdict(self.train)}
        out["train"].pop("eval_every")
        return out

    def replace(self, **changes) -> "RunConfig":
        """Copy with overrides; ``N``, ``T`` and ``placement`` reach into the nested configs."""
        new = copy.deepcopy(self)
        for key, value in changes.items():
            if key in ("N", "T"):
                setattr(new.model.aggregator, key, value)
            elif key == "placement":
                if value not in PLACEMENTS:
                    raise ConfigError([f"placement: {value!r} not in {list(PLACEMENTS)}"])
                new.model.aggregate_encoder, new.model.aggregate_decoder = PLACEMENTS[value]
            elif key == "capsule_input_mode":
                new.model.aggregator.capsule_input_mode = value
            else:
                setattr(new, key, value)
        return new


def _type_error(where: str, expected, value) -> str | None:
    kinds = expected if isinstance(expected, tuple) else (expected,)
    if value is None:
        return None if None in kinds else f"{where}: must not be null"
    for kind in kinds:
        if kind == _INT and isinstance(value, int) and not isinstance(value, bool):
            return None
        if kind == _FLOAT and isinstance(value, (int, float)) and not isinstance(value, bool):
            return None if math.isfinite(value) else f"{where}: must be finite, got {value!r}"
        if kind == _BOOL and isinstance(value, bool):
            return None
        if kind == _STR and isinstance(value, str):
            return None
        if kind == "list" and isinstance(value, list):
            bad = [v for v in value if isinstance(v, bool) or not isinstance(v, (int, float))
                   or not math.isfinite(v)]
            return None if not bad else f"{where}: entries must be finite numbers"
    names = " or ".join("null" if k is None else ("list of numbers" if k == "list" else k) for k in kinds)
    return f"{where}: expected {names}, got {type(value).__name__}"


def _check_section(raw, schema: dict, prefix: str, errs: list[str]) -> dict:
    if not isinstance(raw, dict):
        errs.append(f"{prefix.rstrip('.') or 'config'}: expected an object, got {type(raw).__name__}")
        return {}
    clean = {}
    for key, value in raw.items():
        if key not in schema:
            errs.append(f"{prefix}{key}: unknown key")
            continue
        problem = _type_error(f"{prefix}{key}", schema[key], value)
        if problem:
            errs.append(problem)
        else:
            clean[key] = float(value) if schema[key] == _FLOAT else value
    return clean


def from_dict(raw) -> RunConfig:
    """Build and validate a :class:`RunConfig`; raises one :class:`ConfigError` listing everything."""
    errs: list[str] = []
    top_schema = {**_TOP, **{name: "section" for name in SECTIONS}}
    if not isinstance(raw, dict):
        raise ConfigError([f"config: expected a JSON object, got {type(raw).__name__}"])
    unknown = [k for k in raw if k not in top_schema]
    errs.extend(f"{k}: unknown key" for k in unknown)
    top = _check_section({k: v for k, v in raw.items() if k in _TOP}, _TOP, "", errs)
    parts = {name: _check_section(raw.get(name, {}), schema, f"{name}.", errs)
             for name, schema in SECTIONS.items()}
    if errs:
        raise ConfigError(errs)
    train_kw = dict(parts["train"])
    if "eval_every" in top:
        train_kw["eval_every"] = top.pop("eval_every")
    cfg = RunConfig(model=ModelConfig(aggregator=AggregatorConfig(**parts["aggregator"]), **parts["model"]),
                    train=TrainConfig(**train_kw), **top)
    return cfg.validate()


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError([f"config file {str(path)!r}: {exc}"]) from exc
    try:
        raw = json.loads(text)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise ConfigError([f"config file {str(path)!r}: invalid JSON: {exc}"]) from exc
    return from_dict(raw)


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

