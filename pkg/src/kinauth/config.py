"""Experiment configuration: ``[section]`` headers and ``key = value`` lines.

Every key maps onto a dataclass field; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cells import ClockworkConfig
from .conv import ConvSpec
from .errors import ConfigError
from .models import FAMILIES, ModelConfig
from .signal import N_FEATURES, block_stride
from .training import TrainConfig


@dataclass
class PathsConfig:
    corpus_dir: str = "corpus"
    out_dir: str = "runs"


@dataclass
class CorpusConfig:
    n_train_users: int = 40
    n_val_users: int = 10
    n_test_users: int = 10
    sessions_per_user: int = 6
    duration_s: float = 122.0
    recalibrated: bool = False


@dataclass
class PipelineConfig:
    rate_hz: float = 50.0
    block_len: int = 50
    n_blocks: int = 20
    overlap: float = 0.5


@dataclass
class ModelSection:
    family: str = "dcwrnn"
    base: int = 2
    bands: int = 3
    units_per_band: int = 8
    hidden: int = 24
    conv: str = "25:7:2;25:7:2"
    conv_activation: str = "tanh"

    def model_config(self, n_classes=0, input_dim=N_FEATURES) -> ModelConfig:
        if self.family not in FAMILIES:
            raise ConfigError(f"[model] family must be one of {', '.join(FAMILIES)}, "
                              f"got {self.family!r}")
        try:
            clockwork = None
            if self.family in ("cwrnn", "dcwrnn"):
                clockwork = ClockworkConfig.uniform(self.base, self.bands, self.units_per_band)
            conv = ConvSpec.parse(self.conv, self.conv_activation)
        except ValueError as exc:
            raise ConfigError(f"[model] {exc}") from exc
        return ModelConfig(self.family, input_dim, self.hidden, clockwork, conv, n_classes)


@dataclass
class TrainSection:
    learning_rate: float = 0.3
    lr_decay: float = 0.97
    epochs: int = 20
    batch_size: int = 16
    dropout: float = 0.2
    obfuscate: bool = True
    crops_per_session: int = 2

    def train_config(self, seed) -> TrainConfig:
        try:
            return TrainConfig(self.learning_rate, self.lr_decay, self.epochs, self.batch_size,
                               self.dropout, seed, self.obfuscate)
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from exc


@dataclass
class BackendSection:
    components: int = 16
    pca_dim: int = 16
    relevance: float = 4.0
    map_iters: int = 5
    kmeans_iters: int = 100
    em_iters: int = 100
    n_enroll: int = 2
    window_s: float = 30.0
    z_fraction: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    backend: BackendSection = field(default_factory=BackendSection)
    source: Optional[str] = None

    @property
    def feature_rate_hz(self):
        p = self.pipeline
        return p.rate_hz / block_stride(p.block_len, p.overlap)

    def resolve(self, path):
        """Relative paths are taken relative to the config file's directory."""
        p = Path(path)
        if p.is_absolute() or self.source is None:
            return p
        return Path(self.source).parent / p

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


SECTIONS = ("paths", "corpus", "pipeline", "model", "train", "backend")


def _coerce(text, kind, where):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind.__name__}") from None


def _field_types(cls):
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type if isinstance(f.type, str) else f.type.__name__]
            for f in dataclasses.fields(cls)}


def parse_config(text: str, source=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(source or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig(source=str(source) if source else None)
    if parser.defaults():
        raise ConfigError("[DEFAULT] keys are not supported; put them in a named section")
    for name in parser.sections():
        if name == "experiment":
            for key, value in parser[name].items():
                if key != "seed":
                    raise ConfigError(f"unknown key {key!r} in [experiment]; known keys: seed")
                cfg.seed = _coerce(value, int, "[experiment] seed")
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected experiment or "
                              f"one of {', '.join(SECTIONS)}")
        section = getattr(cfg, name)
        types = _field_types(type(section))
        for key in parser[name]:
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]; "
                                  f"known keys: {', '.join(types)}")
            setattr(section, key, _coerce(parser[name][key], types[key], f"[{name}] {key}"))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), path)


def validate(cfg: ExperimentConfig):
    p, b, c = cfg.pipeline, cfg.backend, cfg.corpus
    if not 0.0 <= p.overlap < 1.0:
        raise ConfigError("[pipeline] overlap must lie in [0, 1)")
    if p.block_len < 1 or p.n_blocks < 1 or p.rate_hz <= 0:
        raise ConfigError("[pipeline] block_len, n_blocks and rate_hz must be positive")
    if b.components < 1 or b.pca_dim < 1:
        raise ConfigError("[backend] components and pca_dim must be positive")
    if not 0.0 < b.z_fraction <= 1.0:
        raise ConfigError("[backend] z_fraction must lie in (0, 1]")
    if not 1 <= b.n_enroll < c.sessions_per_user:
        raise ConfigError("[backend] n_enroll must leave at least one session to score")
    if b.window_s * cfg.feature_rate_hz < 1:
        raise ConfigError("[backend] window_s is shorter than one feature vector")
    cfg.model.model_config()
    cfg.train.train_config(cfg.seed)


def format_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]", f"seed = {cfg.seed}", ""]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {getattr(section, f.name)}")
        lines.append("")
    return "\n".join(lines)
