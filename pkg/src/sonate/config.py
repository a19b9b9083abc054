"""Sectioned ``key = value`` run configuration with a stable architecture digest."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from sonate.codec import CodecConfig
from sonate.mmdit import ModelConfig
from sonate.syndata import CORPUS_CODEC

MIX_MODES = ("curriculum", "tts-only", "ttm-only", "tta-only", "joint-flat")
SEED_ENV = "SONATE_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    e1: int = 1
    e2: int = 2
    total_epochs: int = 4

    def __post_init__(self):
        if self.e1 < 0 or self.e2 < 0:
            raise ConfigError(f"stage lengths must be >= 0, got e1={self.e1}, e2={self.e2}")
        if self.total_epochs < 0:
            raise ConfigError(f"total_epochs must be >= 0, got {self.total_epochs}")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "curriculum"
    batch_size: int = 16
    steps_per_epoch: int = 25
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.mode not in MIX_MODES:
            raise ConfigError(f"unknown mix mode {self.mode!r}; choose from {', '.join(MIX_MODES)}")
        if self.batch_size < 1 or self.steps_per_epoch < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1, steps_per_epoch >= 0")


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "data/manifest.tsv"
    frames_per_phoneme: int = 4


@dataclass(frozen=True)
class SamplerSection:
    steps: int = 32
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_per_modality: int = 30
    seed: int = 7


SECTIONS = {
    "codec": CodecConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "sampler": SamplerSection,
    "eval": EvalConfig,
}
DIGEST_SECTIONS = ("codec", "model")


@dataclass(frozen=True)
class RunConfig:
    codec: CodecConfig = CORPUS_CODEC
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    sampler: SamplerSection = SamplerSection()
    eval: EvalConfig = EvalConfig()

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def dumps(self, sections=tuple(SECTIONS)) -> str:
        out = []
        for name in sections:
            out.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                out.append(f"{f.name} = {_format(getattr(section, f.name))}")
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        """sha256 over the canonical text of the architecture sections (codec + model)."""
        return hashlib.sha256(self.dumps(DIGEST_SECTIONS).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, typ, where: str):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(typ, str)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def loads(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    kwargs = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = SECTIONS[name]
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _coerce(raw, known[key].type, f"{source} [{name}] {key}")
        try:
            kwargs[name] = cls(**values) if name != "codec" else dataclasses.replace(CORPUS_CODEC, **values)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{source} [{name}]: {e}") from None
    return RunConfig(**kwargs)


def _apply_env(cfg: RunConfig, env) -> RunConfig:
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg = cfg.replace("train", seed=_coerce(env[SEED_ENV], int, SEED_ENV))
    return cfg


def load(path, env=None) -> RunConfig:
    """Read a config file; ``SONATE_SEED`` in ``env`` overrides ``[train] seed``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return _apply_env(loads(text, str(path)), env)


def load_default(env=None) -> RunConfig:
    return _apply_env(RunConfig(), env)
