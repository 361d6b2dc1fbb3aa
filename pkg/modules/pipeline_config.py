"""
Pipeline Config Module

This module provides the versioned YAML configuration of the pipeline: one frozen dataclass
per section, strict key checking, defaults for everything omitted, and a stable hash of the
resolved configuration for stage manifests.

Full-scale values where the method fixes them: 128×128 inputs, k = 200 clusters, batch 20,
2 epochs of 12,000 iterations, learning rate 1e-5, weight decay 0.0005. The defaults below
keep the input size, weight decay and Adam constants, and shrink the rest to CPU scale.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from modules.coseg_network import AttentionKind, NetworkConfig
from modules.coseg_trainer import TrainConfig
from modules.dense_crf import CrfParams
from modules.encoder_factory import EncoderFactory
from modules.grabcut_segmenter import GrabcutConfig
from modules.phantom_generator import DEFAULT_ARCHETYPES, Archetype, PhantomSpec

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
STRATEGIES = ('single-branch', 'no-clustering', 'channel', 'channel_spatial')


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types or out-of-range values in a config document."""


@dataclass(frozen=True)
class PathsSection:
    images: Optional[str] = None
    annotations: Optional[str] = None
    gt_masks: Optional[str] = None
    out: str = 'runs/default'


@dataclass(frozen=True)
class PreprocessingSection:
    target_size: int = 128
    normalization: str = 'minmax'
    crossing_tolerance: float = 3.0

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError(f"target_size must be > 0, got {self.target_size}")
        if self.normalization != 'minmax':
            raise ValueError(f"Unsupported normalization: {self.normalization}. Supported: ['minmax']")
        if self.crossing_tolerance < 0:
            raise ValueError("crossing_tolerance must be >= 0")


@dataclass(frozen=True)
class PhantomSection:
    count: int = 200
    image_size: int = 96
    archetypes: Tuple[Archetype, ...] = DEFAULT_ARCHETYPES

    def __post_init__(self):
        archetypes = tuple(a if isinstance(a, Archetype) else Archetype(**a) for a in self.archetypes)
        object.__setattr__(self, 'archetypes', archetypes)
        if self.count < 1 or self.image_size < 16:
            raise ValueError("phantom count must be >= 1 and image_size >= 16")
        if not archetypes:
            raise ValueError("at least one archetype is required")

    def spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(self.count, self.image_size, self.archetypes, seed)


@dataclass(frozen=True)
class ClusteringSection:
    k: int = 4
    iterations: int = 100
    feature_mode: str = 'handcrafted'
    feature_csv: Optional[str] = None
    standardize: bool = True
    cap_per_cluster: Optional[int] = None
    pairing: str = 'cluster'
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, 'split_ratios', tuple(float(r) for r in self.split_ratios))
        if self.k < 1 or self.iterations < 1:
            raise ValueError("k and iterations must be >= 1")
        if self.feature_mode not in ('handcrafted', 'precomputed'):
            raise ValueError(f"Unsupported feature_mode: {self.feature_mode}. Supported: ['handcrafted', 'precomputed']")
        if self.feature_mode == 'precomputed' and not self.feature_csv:
            raise ValueError("feature_mode 'precomputed' needs feature_csv")
        if self.cap_per_cluster is not None and self.cap_per_cluster < 1:
            raise ValueError("cap_per_cluster must be >= 1 or null")
        if self.pairing not in ('cluster', 'random'):
            raise ValueError(f"Unsupported pairing: {self.pairing}. Supported: ['cluster', 'random']")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError(f"split_ratios must be three non-negative values summing to 1, got {list(self.split_ratios)}")


@dataclass(frozen=True)
class TrainingSection:
    encoder: str = 'drn-s'
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    output_stride: Optional[int] = None
    attention: str = 'channel'
    batch_size: int = 4
    epochs: int = 1
    iterations_per_epoch: int = 250
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    val_interval: int = 50
    val_pair_limit: Optional[int] = 32

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        if self.encoder not in EncoderFactory().get_supported_variants():
            raise ValueError(f"Unsupported encoder: {self.encoder}. "
                             f"Supported: {EncoderFactory().get_supported_variants()}")
        AttentionKind(self.attention)
        self.train_config()
        self.network_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.iterations_per_epoch, self.learning_rate,
                           self.beta1, self.beta2, self.eps, self.weight_decay, self.val_interval,
                           self.val_pair_limit)

    def network_config(self, attention: Optional[str] = None, single_branch: bool = False,
                       encoder: Optional[str] = None) -> NetworkConfig:
        return NetworkConfig(encoder or self.encoder, self.widths, self.output_stride,
                             AttentionKind(attention or self.attention), single_branch)


@dataclass(frozen=True)
class CrfSection:
    w_app: float = 5.0
    w_smooth: float = 3.0
    theta_alpha: float = 20.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    iterations: int = 5
    max_pixels: int = 4096

    def __post_init__(self):
        self.params()
        if self.max_pixels < 1:
            raise ValueError("max_pixels must be >= 1")

    def params(self) -> CrfParams:
        return CrfParams(self.w_app, self.w_smooth, self.theta_alpha, self.theta_beta, self.theta_gamma,
                         self.iterations)


@dataclass(frozen=True)
class EvaluationSection:
    avd_mode: str = 'max'
    split: str = 'test'

    def __post_init__(self):
        if self.avd_mode not in ('max', 'mean'):
            raise ValueError(f"Unsupported avd_mode: {self.avd_mode}. Supported: ['max', 'mean']")
        if self.split not in ('train', 'val', 'test', 'all'):
            raise ValueError(f"Unsupported split: {self.split}. Supported: ['train', 'val', 'test', 'all']")


@dataclass(frozen=True)
class ExperimentSection:
    encoders: Tuple[str, ...] = ('drn-s',)
    strategies: Tuple[str, ...] = STRATEGIES
    with_crf: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'encoders', tuple(self.encoders))
        object.__setattr__(self, 'strategies', tuple(self.strategies))
        supported = EncoderFactory().get_supported_variants()
        for name in self.encoders:
            if name not in supported:
                raise ValueError(f"Unsupported encoder: {name}. Supported: {supported}")
        for name in self.strategies:
            if name not in STRATEGIES:
                raise ValueError(f"Unsupported strategy: {name}. Supported: {list(STRATEGIES)}")


@dataclass(frozen=True)
class PipelineConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 7
    paths: PathsSection = field(default_factory=PathsSection)
    preprocessing: PreprocessingSection = field(default_factory=PreprocessingSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    grabcut: GrabcutConfig = field(default_factory=GrabcutConfig)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    crf: CrfSection = field(default_factory=CrfSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> 'PipelineConfig':
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if out is not None:
            cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out=str(out)))
        return cfg


_SECTION_CLASSES = {
    'paths': PathsSection, 'preprocessing': PreprocessingSection, 'phantom': PhantomSection,
    'grabcut': GrabcutConfig, 'clustering': ClusteringSection, 'training': TrainingSection,
    'crf': CrfSection, 'evaluation': EvaluationSection, 'experiment': ExperimentSection,
}


def _build_section(name: str, data: Any):
    cls = _SECTION_CLASSES[name]
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key (known: {sorted(known)})")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_dict(data: Optional[Dict[str, Any]]) -> PipelineConfig:
    """Resolve a parsed config document, filling defaults for omitted keys."""
    data = dict(data or {})
    version = data.pop('config_version', CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version: unsupported version {version!r}, expected {CONFIG_VERSION}")
    seed = data.pop('seed', PipelineConfig.seed)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    sections = {}
    for key, value in data.items():
        if key not in _SECTION_CLASSES:
            raise ConfigError(f"{key}: unknown key (known: {sorted(['config_version', 'seed', *_SECTION_CLASSES])})")
        sections[key] = _build_section(key, value)
    return PipelineConfig(config_version=version, seed=seed, **sections)


def load_config(path: Optional[Union[str, Path]]) -> PipelineConfig:
    """Read a YAML config document; None gives the all-defaults configuration."""
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as handle:
            data = yaml.safe_load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(data)
    logger.info("Loaded config %s (hash %s)", path, config_hash(cfg)[:12])
    return cfg


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, AttentionKind):
        return value.value
    return value


def config_to_dict(cfg: PipelineConfig) -> Dict[str, Any]:
    return _plain(cfg)


def config_hash(cfg: PipelineConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


CONFIG_HEADER = """\
# Lesion co-segmentation pipeline configuration.
# Full-scale values: preprocessing.target_size 128, clustering.k 200,
# training.batch_size 20, training.epochs 2, training.iterations_per_epoch 12000,
# training.learning_rate 1e-5, training.weight_decay 0.0005.
"""


def dump_config(cfg: PipelineConfig) -> str:
    body = config_to_dict(cfg)
    ordered = {'config_version': body.pop('config_version'), 'seed': body.pop('seed'), **body}
    return CONFIG_HEADER + yaml.safe_dump(ordered, sort_keys=False, default_flow_style=None)


def write_default_config(path: Union[str, Path]) -> PipelineConfig:
    cfg = PipelineConfig()
    Path(path).write_text(dump_config(cfg))
    return cfg
