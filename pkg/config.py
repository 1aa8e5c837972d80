"""
MaskMotion Desk Configuration
Environment settings, the run configuration tree and seed substreams
"""
import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
from dotenv import load_dotenv
from loguru import logger

# Load environment variables
load_dotenv()

# ====================
# ENVIRONMENT SETTINGS
# ====================
ENVIRONMENT = os.getenv('ENVIRONMENT', 'development')
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
LOG_DIR = os.getenv('LOG_DIR', 'logs')
LOG_FILE = 'maskmotion.log'
LOG_ROTATION = '50 MB'
LOG_RETENTION = '10 days'

DEFAULT_SEED = int(os.getenv('MASKMOTION_SEED', 42))
DATA_DIR = os.getenv('DATA_DIR', 'data_cache')
CHECKPOINT_DIR = os.getenv('CHECKPOINT_DIR', 'checkpoints')
OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'outputs')

CONFIG_VERSION = 1

# ====================
# SKELETON
# ====================
JOINT_NAMES = ('pelvis', 'head', 'left_wrist', 'right_wrist', 'left_foot', 'right_foot')
DEFAULT_FRAMES = 64

# ====================
# SYNTHETIC CLASSES
# ====================
MOTION_CLASSES = (
    'walk_straight',
    'walk_circle_ccw',
    'walk_circle_cw',
    'zigzag',
    'wave_hand_stand',
    'walk_and_wave',
    'stand_still',
    'side_step',
)


class ConfigError(ValueError):
    """Raised for unknown or invalid configuration entries"""


@dataclass
class TokenizerConfig:
    codebook_size: int = 64
    code_dim: int = 32
    levels: int = 2
    beta: float = 0.25
    hidden: int = 64
    downsample: int = 4
    epochs: int = 60
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 100


@dataclass
class TransformerConfig:
    layers: int = 4
    embed: int = 64
    heads: int = 4
    ff_mult: int = 2
    residual_hidden: int = 64
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    label_dropout: float = 0.1
    alpha: float = 0.1
    control_epochs: int = 20
    control_lr: float = 5e-4


@dataclass
class GenerationConfig:
    iterations: int = 10
    cfg_scale: float = 4.0
    cfg_scale_residual: float = 5.0
    temperature: float = 1.0
    residual_temperature: float = 1e-8
    profile: str = 'fast'
    keyframe_threshold: float = 0.5
    obstacle_weight: float = 1.0


@dataclass
class PathsConfig:
    data_dir: str = DATA_DIR
    checkpoint_dir: str = CHECKPOINT_DIR
    output_dir: str = OUTPUT_DIR


@dataclass
class RunConfig:
    """Single self-describing run configuration (serializes to one JSON document)"""
    seed: int = DEFAULT_SEED
    joint_names: Tuple[str, ...] = JOINT_NAMES
    frames: int = DEFAULT_FRAMES
    dataset_size: int = 512
    heldout_size: int = 64
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    profiles: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_classes(self) -> int:
        return len(MOTION_CLASSES)

    @property
    def tokens(self) -> int:
        return self.frames // self.tokenizer.downsample

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['joint_names'] = list(self.joint_names)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        cfg = _build(cls, data, 'config')
        cfg.joint_names = tuple(cfg.joint_names)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> 'RunConfig':
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        with open(path, 'r') as f:
            cfg = cls.from_json(f.read())
        logger.info(f"Loaded run config from {path}")
        return cfg

    def save(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as f:
            f.write(self.to_json())
        logger.debug(f"Run config saved to {path}")


def _build(cls, data: Dict[str, Any], where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) \
            else known[name].default
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name} must be an object")
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Dotted-key overrides, e.g. {'generation.profile': 'accurate'}"""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = key.split('.')
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown override key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown override key: {key}")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


# ====================
# SEED SUBSTREAMS
# ====================
SUBSTREAMS = (
    'dataset', 'heldout', 'tokenizer', 'base', 'control', 'masking', 'gumbel',
    'eval-pairs', 'eval-keyframes', 'classifier',
)


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose derived from the master seed"""
    key = zlib.crc32(name.encode('utf-8'))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *[int(e) for e in extra]]))


# ====================
# SAFETY CHECKS
# ====================
def validate_config(cfg: RunConfig) -> bool:
    """Validate a run configuration"""
    errors: List[str] = []
    warnings: List[str] = []

    tok = cfg.tokenizer
    tr = cfg.transformer
    gen = cfg.generation

    if len(cfg.joint_names) < 2:
        errors.append("Skeleton needs at least two joints")
    if len(set(cfg.joint_names)) != len(cfg.joint_names):
        errors.append("Joint names must be unique")
    if cfg.joint_names[0] != 'pelvis':
        errors.append("Joint 0 must be the pelvis")
    if 'head' not in cfg.joint_names:
        errors.append("Skeleton needs a head joint (heading convention)")
    if cfg.frames < 4 or cfg.frames % tok.downsample != 0:
        errors.append(f"frames must be >= 4 and divisible by {tok.downsample}")
    if tok.downsample != 4:
        errors.append("Tokenizer downsample factor is fixed at 4")
    if tok.codebook_size < 2 or tok.code_dim < 1 or tok.levels < 1:
        errors.append("Codebook needs K >= 2, d >= 1 and at least one level")
    if tok.beta < 0:
        errors.append("Commitment weight beta must be non-negative")
    if tr.embed % tr.heads != 0:
        errors.append("Transformer embed size must be divisible by heads")
    if not 0.0 <= tr.alpha <= 1.0:
        errors.append("alpha must be in [0, 1]")
    if not 0.0 <= tr.label_dropout < 1.0:
        errors.append("label_dropout must be in [0, 1)")
    if gen.iterations < 1:
        errors.append("Generation needs at least one iteration")
    if gen.temperature <= 0 or gen.residual_temperature <= 0:
        errors.append("Temperatures must be positive")
    if gen.keyframe_threshold <= 0:
        errors.append("Keyframe threshold must be positive")
    if cfg.dataset_size < cfg.num_classes:
        warnings.append("Dataset smaller than the number of classes - some labels are missing")
    if gen.cfg_scale < 1.0:
        warnings.append("CFG scale below 1 interpolates toward the unconditional branch")

    for warning in warnings:
        logger.warning(f"Config Warning: {warning}")

    if errors:
        for error in errors:
            logger.error(f"Config Error: {error}")
        raise ConfigError("Configuration validation failed - " + "; ".join(errors))

    return True
