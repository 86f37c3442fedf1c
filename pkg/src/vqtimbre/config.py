"""Flat ``key = value`` run configuration covering model, training and paths."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .trainer import TrainConfig

PRESETS = ("toy", "paper")
RUN_KEYS = {
    "preset": str,
    "out_dir": str,
    "corpus": str,  # comma-separated WAV paths
    "synth_class": str,  # class name, "all", or empty
    "synth_seconds": float,
    "synth_seed": int,
    "split_frac": float,
    "percep_weights": str,
}
RUN_DEFAULTS = {"preset": "toy", "out_dir": "run", "corpus": "", "synth_class": "", "synth_seconds": 20.0,
                "synth_seed": 0, "split_frac": 0.15, "percep_weights": ""}


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if typing.get_origin(kind) is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: dict = field(default_factory=lambda: dict(RUN_DEFAULTS))

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str, str]]) -> "RunConfig":
        """Build from (key, value, origin) triples; origin is used in error messages."""
        run = dict(RUN_DEFAULTS)
        model_over, train_over = {}, {}
        for key, raw, origin in pairs:
            if key in RUN_KEYS:
                run[key] = _parse_value(key, raw, RUN_KEYS[key])
            elif key in MODEL_KEYS:
                model_over[key] = _parse_value(key, raw, MODEL_KEYS[key])
            elif key in TRAIN_KEYS:
                train_over[key] = _parse_value(key, raw, TRAIN_KEYS[key])
            else:
                raise ConfigError(f"{origin}: unknown key {key!r}")
        if run["preset"] not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {run['preset']!r}")
        try:
            model = ModelConfig.toy(**model_over) if run["preset"] == "toy" else ModelConfig(**model_over)
            train = TrainConfig(**train_over)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(model, train, run)

    @classmethod
    def parse(cls, text: str, source: str = "<config>", overrides: list[str] | None = None) -> "RunConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value, f"{source}:{lineno}"))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            key, value = item.split("=", 1)
            pairs.append((key.strip(), value, f"override {item!r}"))
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.parse(path.read_text(), str(path), overrides)

    def to_dict(self) -> dict[str, str]:
        """Every effective value as text, for echoing into checkpoints."""
        out = {k: _format_value(v) for k, v in self.run.items()}
        out.update({k: _format_value(v) for k, v in self.model.to_dict().items()})
        out.update({k: _format_value(v) for k, v in dataclasses.asdict(self.train).items()})
        return dict(sorted(out.items()))

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())
