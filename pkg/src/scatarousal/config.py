"""Single JSON pipeline configuration with defaults for every field."""
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError, MalformedHeaderError
from .filterbank import FilterBankConfig
from .model import ModelConfig, TrainConfig

PATH_KEYS = ("records", "features", "index", "models", "predictions", "out")


@dataclass
class PipelineConfig:
    seed: int = 0
    filterbank: FilterBankConfig = field(default_factory=FilterBankConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(d) - {"seed", "filterbank", "model", "train", "synth", "paths"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        paths = dict(d.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown paths keys: {sorted(bad)}")
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                filterbank=FilterBankConfig.from_dict(d.get("filterbank", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                synth=SynthConfig.from_dict(d.get("synth", {})),
                paths=paths,
            )
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from e

    def to_dict(self):
        return {
            "seed": self.seed,
            "filterbank": self.filterbank.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "paths": dict(self.paths),
        }


def load_config(path=None):
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise MalformedHeaderError(f"cannot read config {p}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from e
    return PipelineConfig.from_dict(doc)
