"""Run configuration: line-oriented ``section.key = value`` text with typed defaults."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Iterable, Mapping

STRATEGIES = ("pmd", "no-mgfd", "lkd", "pkd", "none")
MASK_MODES = ("decreasing", "fixed")
INIT_MODES = ("layer-select", "copy", "fresh")
SEED_ENV = "PMD_SEED"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "data.train": "",
    "data.valid": "",
    "data.test": "",
    "data.descriptions": "",
    "data.prepared": "prepared",
    "vocab.min_freq": 1,
    "vocab.max_size": 0,
    "text.max_len": 64,
    "text.mask_tail": True,
    "encoder.layers": 4,
    "encoder.hidden": 128,
    "encoder.heads": 4,
    "encoder.ff": 256,
    "encoder.dropout": 0.1,
    "encoder.pooling": "mean",
    "score.temperature": 0.05,
    "score.negatives": "in-batch",
    "distill.alpha": 0.1,
    "distill.beta": 0.1,
    "distill.score_matrix": "full",
    "distill.feature_layer": -1,
    "distill.lkd_temperature": 2.0,
    "schedule.grades": [4, 3, 2, 1],
    "schedule.mask_rates": [0.2, 0.1, 0.05, 0.0],
    "schedule.init": ["copy", "layer-select", "layer-select", "layer-select"],
    "schedule.mode": "decreasing",
    "schedule.strategy": "pmd",
    "schedule.epochs": [50],
    "schedule.lr": [3e-4],
    "train.epochs": 50,
    "train.lr": 3e-4,
    "train.batch_size": 32,
    "train.weight_decay": 1e-4,
    "train.eval_every": 1,
    "eval.split": "test",
    "eval.filtered": True,
    "eval.ranks_csv": False,
    "eval.batch_size": 256,
    "run.seed": 42,
    "run.output": "runs/default",
    "run.record_wall_clock": False,
    "sweep.rates": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
}

_CHOICES = {
    "encoder.pooling": ("mean", "cls"),
    "score.negatives": ("in-batch", "full"),
    "distill.score_matrix": ("full", "diagonal"),
    "schedule.mode": MASK_MODES,
    "schedule.strategy": STRATEGIES,
    "eval.split": ("valid", "test"),
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, list):
            items = value if isinstance(value, (list, tuple)) else [
                v for v in str(value).split(",") if v.strip()
            ]
            elem = type(default[0]) if default else str
            if elem is float:
                return [float(v) for v in items]
            if elem is int:
                return [int(v) for v in items]
            return [str(v).strip() for v in items]
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _parse_bool(str(value))
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from exc


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


class RunConfig(Mapping[str, Any]):
    """Fully resolved, validated configuration."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = _coerce(key, value)
        self._values = merged
        self.validate()

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def updated(self, values: Mapping[str, Any]) -> RunConfig:
        merged = dict(self._values)
        merged.update(values)
        return RunConfig(merged)

    @classmethod
    def load(
        cls,
        path=None,
        overrides: Iterable[str] = (),
        environ: Mapping[str, str] | None = None,
    ) -> RunConfig:
        """Read a config file, then apply ``key=value`` overrides, then ``PMD_SEED``."""
        values: dict[str, Any] = {}
        if path is not None:
            values.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, value.strip())
        env = os.environ if environ is None else environ
        if env.get(SEED_ENV):
            values["run.seed"] = _coerce("run.seed", env[SEED_ENV])
        return cls(values)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self._values[k])}\n" for k in sorted(self._values))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    # -- validation ---------------------------------------------------------------

    def validate(self) -> None:
        v = self._values
        for key, choices in _CHOICES.items():
            if v[key] not in choices:
                raise ConfigError(f"{key} must be one of {choices}, got {v[key]!r}")
        for key in ("text.max_len", "encoder.layers", "encoder.hidden", "encoder.heads",
                    "encoder.ff", "train.epochs", "train.batch_size", "train.eval_every",
                    "vocab.min_freq", "eval.batch_size"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["text.max_len"] < 8:
            raise ConfigError("text.max_len must be >= 8")
        if v["encoder.hidden"] % v["encoder.heads"]:
            raise ConfigError("encoder.hidden must be divisible by encoder.heads")
        if not 0.0 <= v["encoder.dropout"] < 1.0:
            raise ConfigError("encoder.dropout must lie in [0, 1)")
        if v["score.temperature"] <= 0 or v["distill.lkd_temperature"] <= 0:
            raise ConfigError("temperatures must be positive")
        for key in ("distill.alpha", "distill.beta"):
            if not 0.0 <= v[key] <= 0.5:
                raise ConfigError(f"{key} must lie in [0, 0.5]")
        grades, rates = v["schedule.grades"], v["schedule.mask_rates"]
        if not grades:
            raise ConfigError("schedule.grades is empty")
        if any(b >= a for a, b in zip(grades, grades[1:])):
            raise ConfigError("schedule.grades must be strictly decreasing")
        if grades[0] > v["encoder.layers"] or grades[-1] < 1:
            raise ConfigError("schedule grades must lie in [1, encoder.layers]")
        if len(rates) != len(grades):
            raise ConfigError("schedule.mask_rates needs one rate per grade")
        if any(not 0.0 <= r <= 0.5 for r in rates):
            raise ConfigError("schedule mask rates must lie in [0, 0.5]")
        if v["schedule.mode"] == "decreasing" and any(b > a for a, b in zip(rates, rates[1:])):
            raise ConfigError("decreasing mode needs non-increasing mask rates")
        for key in ("schedule.epochs", "schedule.lr", "schedule.init"):
            if len(v[key]) not in (1, len(grades)):
                raise ConfigError(f"{key} needs one value or one per grade")
        if any(e < 1 for e in v["schedule.epochs"]) or any(lr <= 0 for lr in v["schedule.lr"]):
            raise ConfigError("schedule epochs and learning rates must be positive")
        if v["train.lr"] <= 0 or v["train.weight_decay"] < 0:
            raise ConfigError("train.lr must be positive and weight decay non-negative")
        for mode in v["schedule.init"]:
            if mode not in INIT_MODES:
                raise ConfigError(f"schedule.init entries must be one of {INIT_MODES}")
        if any(not 0.0 <= r <= 1.0 for r in v["sweep.rates"]):
            raise ConfigError("sweep.rates must lie in [0, 1]")

    def per_stage(self, key: str) -> list:
        values = self._values[key]
        n = len(self._values["schedule.grades"])
        return list(values) * n if len(values) == 1 else list(values)
