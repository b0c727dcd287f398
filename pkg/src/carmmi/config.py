"""Experiment configuration files.

Plain INI: four sections (corpus, pipeline, train, loss) whose keys mirror
the corresponding config dataclasses. Unknown sections or keys are rejected
outright — a typo silently falling back to a default would poison an
experiment. Every run embeds a short hash of the resolved configuration in
its outputs so results can be traced back.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .data import PipelineConfig, SynthCorpusConfig
from .losses import LossConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "corpus": SynthCorpusConfig,
    "pipeline": PipelineConfig,
    "train": TrainConfig,
    "loss": LossConfig,
}


@dataclass
class ExperimentConfig:
    corpus: SynthCorpusConfig
    pipeline: PipelineConfig
    train: TrainConfig
    loss: LossConfig

    def as_dict(self):
        return {name: dataclasses.asdict(getattr(self, name))
                for name in SECTIONS}

    def hash(self):
        return config_hash(self.as_dict())

    def validate(self):
        try:
            self.corpus.validate()
            self.pipeline.validate()
            self.loss.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e


def config_hash(payload) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def default_config() -> ExperimentConfig:
    return ExperimentConfig(SynthCorpusConfig(), PipelineConfig(),
                            TrainConfig(), LossConfig())


def _convert(raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"malformed config file: {e}") from e
    if not read:
        raise ConfigError(f"config file not found: {path}")

    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    for name, cls in SECTIONS.items():
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in section [{name}]")
                try:
                    kwargs[key] = _convert(raw, defaults[key])
                except ValueError as e:
                    raise ConfigError(
                        f"bad value for {key!r} in [{name}]: {e}") from e
        out[name] = cls(**kwargs)
    cfg = ExperimentConfig(**out)
    cfg.validate()
    return cfg


def write_config(cfg: ExperimentConfig, path):
    """Serialize a full config; load_config round-trips it."""
    parser = configparser.ConfigParser()
    for name in SECTIONS:
        parser.add_section(name)
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            parser.set(name, key, repr(value) if isinstance(value, float)
                       else str(value))
    with open(path, "w") as f:
        parser.write(f)
    return path
