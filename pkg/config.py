"""Configuration dataclasses, YAML config files and environment defaults."""
import os
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv

from errors import ConfigError

logger = logging.getLogger('SpeechDPM')

DATA_DIR_ENV = 'DPM_DATA_DIR'
TOKENS_PER_SECOND = 25
EVALUATION_SETTINGS = ('complete_dialogues', 'all_lengths')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


@dataclass(frozen=True)
class Vocabulary:
    """Partitioned ID space: text stub, audio codes, audio_end, emotion identifiers."""
    text_stub_size: int
    codebook_size: int
    num_emotions: int

    @property
    def audio_offset(self) -> int:
        return self.text_stub_size

    @property
    def audio_end_id(self) -> int:
        return self.text_stub_size + self.codebook_size

    @property
    def emotion_ids(self) -> List[int]:
        first = self.audio_end_id + 1
        return list(range(first, first + self.num_emotions))

    @property
    def total(self) -> int:
        return self.text_stub_size + self.codebook_size + 1 + self.num_emotions

    def audio_id(self, code: int) -> int:
        return self.audio_offset + code

    def is_emotion(self, token_id: int) -> bool:
        return self.audio_end_id < token_id < self.total


@dataclass
class ModelConfig:
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    n_limit: int = 256
    text_stub_size: int = 0
    codebook_size: int = 256
    num_emotions: int = 4
    mlp_ratio: int = 4
    nonlinearity: str = 'gelu'
    trainable_groups: Tuple[str, ...] = ()
    dtype: str = 'float32'
    seed: int = 0

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.text_stub_size, self.codebook_size, self.num_emotions)

    def validate(self) -> 'ModelConfig':
        if self.n_limit < 2:
            raise ConfigError(f"n_limit must be >= 2, got {self.n_limit}")
        if self.codebook_size < 1 or self.num_emotions < 1:
            raise ConfigError(f"vocabulary needs codebook_size >= 1 and num_emotions >= 1, got {self.codebook_size}/{self.num_emotions}")
        if self.text_stub_size < 0:
            raise ConfigError(f"text_stub_size must be >= 0, got {self.text_stub_size}")
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a positive multiple of num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.nonlinearity not in ('gelu', 'relu', 'tanh'):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        unknown = set(self.trainable_groups) - {'embedding', 'blocks', 'head'}
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        return self


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0
    init_std: float = 0.02

    def validate(self) -> 'LoraConfig':
        if self.rank < 1 or self.alpha <= 0:
            raise ConfigError(f"LoRA rank must be >= 1 and alpha > 0, got {self.rank}/{self.alpha}")
        return self


@dataclass
class GeneratorConfig:
    num_dialogues: int = 500
    min_sentences: int = 4
    max_sentences: int = 12
    min_tokens: int = 8
    max_tokens: int = 24
    num_emotions: int = 4
    codebook_size: int = 256
    p_stay: float = 0.8
    trigger_strength: float = 1.0
    band_width: int = 8
    topic_width: int = 8
    in_band_mass: float = 0.7
    seed: int = 0

    def validate(self) -> 'GeneratorConfig':
        if self.num_dialogues < 1:
            raise ConfigError(f"num_dialogues must be >= 1, got {self.num_dialogues}")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise ConfigError(f"empty sentence range [{self.min_sentences}, {self.max_sentences}]")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError(f"empty token range [{self.min_tokens}, {self.max_tokens}]")
        if not 0.0 < self.p_stay <= 1.0:
            raise ConfigError(f"p_stay must lie in (0, 1], got {self.p_stay}")
        if self.num_emotions == 1 and self.p_stay != 1.0:
            raise ConfigError("a single emotion requires p_stay = 1")
        if not 0.0 <= self.trigger_strength <= 1.0:
            raise ConfigError(f"trigger_strength must lie in [0, 1], got {self.trigger_strength}")
        if not 0.0 < self.in_band_mass <= 1.0:
            raise ConfigError(f"in_band_mass must lie in (0, 1], got {self.in_band_mass}")
        return self


@dataclass
class TrainConfig:
    n_o: int = 64
    n_p: int = 128
    n_q: int = 128
    learning_rate: float = 5e-5
    epochs: int = 20
    batch_size: int = 8
    optimizer: str = 'adam'
    seed: int = 0

    def validate(self, n_limit: int) -> 'TrainConfig':
        if self.n_o < 1 or self.n_p < 0 or self.n_q < 1:
            raise ConfigError(f"need n_o >= 1, n_p >= 0, n_q >= 1; got {self.n_o}/{self.n_p}/{self.n_q}")
        if self.n_o + self.n_p > n_limit or self.n_q > n_limit:
            raise ConfigError(f"spans n_o+n_p={self.n_o + self.n_p}, n_q={self.n_q} exceed n_limit={n_limit}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}/{self.batch_size}")
        if self.optimizer not in ('sgd', 'adam'):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class DpmConfig:
    n_r: int = 128
    stepping: str = 'sentence'
    stride: Optional[int] = None
    learning_rate: float = 5e-5
    optimizer: str = 'adam'
    emit_trace: bool = False
    strip_emotions: bool = False
    seed: int = 0

    def validate(self) -> 'DpmConfig':
        if self.n_r < 1:
            raise ConfigError(f"n_r must be >= 1, got {self.n_r}")
        if self.stepping not in ('sentence', 'fixed_stride'):
            raise ConfigError(f"unknown stepping strategy {self.stepping!r}")
        if self.stepping == 'fixed_stride' and (self.stride is None or self.stride < 1):
            raise ConfigError(f"fixed_stride stepping needs stride >= 1, got {self.stride}")
        if self.optimizer not in ('sgd', 'adam'):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        return self


@dataclass
class ClassifierConfig:
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    window: int = 256
    pooling: str = 'mean'
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    truncate: str = 'tail'
    seed: int = 0

    def validate(self) -> 'ClassifierConfig':
        if self.pooling != 'mean':
            raise ConfigError(f"only mean pooling is supported, got {self.pooling!r}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.truncate not in ('tail', 'head'):
            raise ConfigError(f"truncate must be 'tail' or 'head', got {self.truncate!r}")
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        return self


@dataclass
class ExperimentConfig:
    """Settings of the ``infer``, ``eval``, ``experiment`` and ``bench`` subcommands."""
    settings: List[str] = field(default_factory=lambda: list(EVALUATION_SETTINGS))
    truncate_to: Optional[int] = None
    keep: str = 'tail'
    test_fraction: float = 0.2
    strides: List[int] = field(default_factory=list)
    small_window: int = 128
    large_window: int = 1024
    bench_sentences: int = 20
    bench_sentence_length: int = 24

    def validate(self) -> 'ExperimentConfig':
        unknown = [s for s in self.settings if s not in EVALUATION_SETTINGS]
        if unknown or not self.settings:
            raise ConfigError(f"settings must be a non-empty subset of {list(EVALUATION_SETTINGS)}, got {self.settings}")
        if self.truncate_to is not None and self.truncate_to < 2:
            raise ConfigError(f"truncate_to must be >= 2, got {self.truncate_to}")
        if self.keep not in ('tail', 'head'):
            raise ConfigError(f"keep must be 'tail' or 'head', got {self.keep!r}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        if any(k < 1 for k in self.strides):
            raise ConfigError(f"strides must be >= 1, got {self.strides}")
        if not 2 <= self.small_window < self.large_window:
            raise ConfigError(f"need 2 <= small_window < large_window, got {self.small_window}/{self.large_window}")
        if self.bench_sentences < 1 or self.bench_sentence_length < 1:
            raise ConfigError(f"bench sizes must be >= 1, got {self.bench_sentences}x{self.bench_sentence_length}")
        return self


@dataclass
class RunConfig:
    data_dir: str = ''
    threads: int = 1
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    log_level: str = 'INFO'

    def validate(self) -> 'RunConfig':
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if str(self.log_level).upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {list(LOG_LEVELS)}, got {self.log_level!r}")
        return self


@dataclass
class ProjectConfig:
    """All config sections; mirrors the nesting of a YAML config file."""
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    corpus: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dpm: DpmConfig = field(default_factory=DpmConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> 'ProjectConfig':
        self.model.validate()
        self.lora.validate()
        self.corpus.validate()
        self.train.validate(self.model.n_limit)
        self.dpm.validate()
        self.classifier.validate()
        self.experiment.validate()
        self.run.validate()
        if self.corpus.num_emotions != self.model.num_emotions:
            raise ConfigError(f"corpus has {self.corpus.num_emotions} emotions, model {self.model.num_emotions}")
        if self.corpus.codebook_size != self.model.codebook_size:
            raise ConfigError(f"corpus codebook {self.corpus.codebook_size} != model codebook {self.model.codebook_size}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['model']['trainable_groups'] = list(self.model.trainable_groups)
        return data


def _build_section(cls, values: Dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    if 'trainable_groups' in values:
        values = dict(values, trainable_groups=tuple(values['trainable_groups'] or ()))
    return cls(**values)


def config_from_dict(data: Dict[str, Any]) -> ProjectConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a mapping of sections, got {type(data).__name__}")
    sections = {f.name: f for f in fields(ProjectConfig)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for name, f in sections.items():
        default = f.default_factory()
        values = data.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a mapping, got {type(values).__name__}")
        built[name] = _build_section(type(default), {**asdict(default), **values}, name)
    return ProjectConfig(**built)


def load_config(path: Optional[Union[str, Path]] = None) -> ProjectConfig:
    """
    Load a YAML config file on top of the defaults.

    Args:
        path: Config file; ``None`` returns the defaults.

    Returns:
        The (not yet validated) project config.
    """
    if path is None:
        return ProjectConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    logger.info(f"Loaded config from {path}")
    return config_from_dict(data)


def apply_overrides(config: ProjectConfig, overrides: Dict[str, Any]) -> ProjectConfig:
    """Apply ``{'section.key': value}`` overrides; ``None`` values are skipped."""
    sections = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition('.')
        if not hasattr(config, section) or not hasattr(getattr(config, section), key):
            raise ConfigError(f"unknown config key {dotted!r}")
        sections.setdefault(section, {})[key] = value
    updated = {name: replace(getattr(config, name), **values) for name, values in sections.items()}
    return replace(config, **updated)


def dump_config(config: ProjectConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def default_data_dir() -> Path:
    """Directory for run outputs: ``$DPM_DATA_DIR`` (``.env`` honoured) or ``./runs``."""
    load_dotenv()
    return Path(os.environ.get(DATA_DIR_ENV) or 'runs')
