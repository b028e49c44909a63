"""
Run Configuration
Typed run configuration, environment overrides, logging setup and seeding
"""

import json
import logging
import os
import random
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; DEFN_LOG_LEVEL applies when no level is given"""
    name = (level or os.getenv('DEFN_LOG_LEVEL') or 'INFO').upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level: {name}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)


def set_seed(seed: int) -> None:
    """Seed python, numpy and torch generators"""
    import torch

    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class DataConfig(_Section):
    pretrain: Optional[str] = None
    finetune: Optional[str] = None
    test: Optional[str] = None
    format: Literal['nifti', 'slice_dir'] = 'slice_dir'
    input_size: Tuple[int, int, int] = (96, 96, 96)
    spacing: Optional[Tuple[float, float, float]] = None
    num_workers: int = Field(default=0, ge=0)

    @field_validator('input_size')
    @classmethod
    def _positive_size(cls, v):
        if min(v) < 1:
            raise ValueError("input_size dims must be >= 1")
        return v

    @field_validator('spacing')
    @classmethod
    def _positive_spacing(cls, v):
        if v is not None and min(v) <= 0:
            raise ValueError("spacing entries must be > 0")
        return v


class AugmentConfig(_Section):
    enabled: bool = True
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    rotate_prob: float = Field(default=0.2, ge=0.0, le=1.0)
    rotate_degrees: float = Field(default=15.0, ge=0.0)
    translate_prob: float = Field(default=0.2, ge=0.0, le=1.0)
    translate_voxels: int = Field(default=8, ge=0)
    scale_prob: float = Field(default=0.2, ge=0.0, le=1.0)
    scale_range: Tuple[float, float] = (0.9, 1.1)
    noise_prob: float = Field(default=0.15, ge=0.0, le=1.0)
    noise_sigma_max: float = Field(default=0.05, ge=0.0)
    gamma_prob: float = Field(default=0.15, ge=0.0, le=1.0)
    gamma_range: Tuple[float, float] = (0.7, 1.5)

    @model_validator(mode='after')
    def _ordered_ranges(self):
        for name in ('scale_range', 'gamma_range'):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        return self


class SdiConfig(_Section):
    enabled: bool = False
    strategy: Literal['isolated', 'comprehensive'] = 'isolated'
    probability: float = Field(default=0.5, ge=0.0, le=1.0)
    target_slices: int = Field(default=96, ge=1)
    strength_min: float = Field(default=0.5, ge=0.0)
    strength_max: float = Field(default=1.5, ge=0.0)
    base_radius: float = Field(default=8.0, ge=0.0)
    secondary_ratio: float = Field(default=1.0, ge=0.0)
    margin: int = Field(default=15, ge=0)
    centroid_jitter: float = Field(default=2.0, ge=0.0)
    blur_sigma: float = Field(default=1.0, ge=0.0)
    synthesis_alpha: float = Field(default=1.0, ge=0.0, le=1.0)
    synthesize: bool = True

    @model_validator(mode='after')
    def _strength_range(self):
        if self.strength_max < self.strength_min:
            raise ValueError("strength_max must be >= strength_min")
        return self


class NetConfig(_Section):
    in_channels: int = Field(default=1, ge=1)
    base_channels: int = Field(default=16, ge=1)
    depth: int = Field(default=4, ge=1)
    num_classes: int = Field(default=4, ge=2)
    fugh_groups: int = Field(default=4, ge=1)
    se_ratio: int = Field(default=4, ge=1)
    droppath_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    use_hse_branch: bool = True
    use_fugh: bool = True
    split_frequency_weights: bool = False
    upsample_mode: Literal['transpose', 'trilinear'] = 'transpose'

    @model_validator(mode='after')
    def _divisible(self):
        if self.base_channels % self.fugh_groups:
            raise ValueError("base_channels must be divisible by fugh_groups")
        if self.base_channels % self.se_ratio:
            raise ValueError("base_channels must be divisible by se_ratio")
        return self

    @property
    def size_multiple(self) -> int:
        return 2 ** self.depth

    @property
    def min_input_size(self) -> int:
        """The bottleneck keeps two voxels per axis for its instance norm and FuGH"""
        return 2 * self.size_multiple


class FocalConfig(_Section):
    gamma: float = Field(default=2.0, ge=0.0, allow_inf_nan=False)


class BoundaryConfig(_Section):
    kernel: int = Field(default=3, ge=1)

    @field_validator('kernel')
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("boundary pooling kernel must be odd")
        return v


class DiceConfig(_Section):
    eps_numerator: float = Field(default=1e-5, gt=0.0)
    eps_denominator: float = Field(default=1e-5, gt=0.0)


class DeepRankingConfig(_Section):
    margin: float = Field(default=1.0, ge=0.0)
    n_pos: int = Field(default=256, ge=1)
    n_neg: int = Field(default=256, ge=1)
    seed: int = 0


class WeightSchedule(_Section):
    """Endpoint loss weights (focal, boundary, dice, ce) at tau=0 and tau=1 plus ranking coefficient"""
    start: Tuple[float, float, float, float] = (0.1, 0.1, 0.4, 0.4)
    end: Tuple[float, float, float, float] = (0.3, 0.3, 0.2, 0.2)
    beta: float = Field(default=0.1, ge=0.0)

    @model_validator(mode='after')
    def _simplex(self):
        for name in ('start', 'end'):
            w = getattr(self, name)
            if any(x < 0.0 or x > 1.0 for x in w):
                raise ValueError(f"{name} weights must lie in [0, 1]")
            if abs(sum(w) - 1.0) > 1e-9:
                raise ValueError(f"{name} weights must sum to 1")
        return self


class LossConfig(_Section):
    mode: Literal['dwc', 'dicece'] = 'dwc'
    focal: FocalConfig = FocalConfig()
    boundary: BoundaryConfig = BoundaryConfig()
    dice: DiceConfig = DiceConfig()
    ranking: DeepRankingConfig = DeepRankingConfig()
    schedule: WeightSchedule = WeightSchedule()


class OptimConfig(_Section):
    lr: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    batch_size: int = Field(default=8, ge=1)
    pretrain_epochs: int = Field(ge=0)
    finetune_epochs: int = Field(ge=0)
    max_steps: Optional[int] = Field(default=None, ge=1)
    checkpoint_every: int = Field(default=100, ge=1)


class RunConfig(_Section):
    version: int = 1
    seed: int = 0
    device: str = 'cpu'
    output_dir: str = 'runs/defn'
    finetune_from: Optional[str] = None
    data: DataConfig = DataConfig()
    augment: AugmentConfig = AugmentConfig()
    sdi: SdiConfig = SdiConfig()
    net: NetConfig = NetConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig

    @model_validator(mode='after')
    def _input_fits_network(self):
        m = self.net.size_multiple
        if any(s % m for s in self.data.input_size):
            raise ValueError(f"input_size {self.data.input_size} must be divisible by {m}")
        if min(self.data.input_size) < self.net.min_input_size:
            raise ValueError(f"input_size {self.data.input_size} must be at least {self.net.min_input_size} per axis")
        return self

    def dump(self) -> Dict[str, Any]:
        return self.model_dump(mode='json')


ENV_OVERRIDES = {
    'DEFN_SEED': ('seed', int),
    'DEFN_DEVICE': ('device', str),
}


def _set_dotted(payload: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split('.')
    node = payload
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {dotted}: {key} is not a section")
    node[keys[-1]] = value


def _get_dotted(payload: Dict[str, Any], dotted: str) -> Any:
    node = payload
    for key in dotted.split('.'):
        if not isinstance(node, dict) or key not in node:
            return None
        node = node[key]
    return node


def build_run_config(payload: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None,
                     defaults: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validate a raw mapping: defaults fill gaps, then env vars, then explicit dotted-key overrides"""
    payload = json.loads(json.dumps(payload))
    for dotted, value in (defaults or {}).items():
        if _get_dotted(payload, dotted) is None:
            _set_dotted(payload, dotted, value)
    for env, (key, cast) in ENV_OVERRIDES.items():
        raw = os.getenv(env)
        if raw is None or raw == '':
            continue
        try:
            payload[key] = cast(raw)
        except ValueError as e:
            raise ConfigError(f"{env}={raw!r} is invalid: {e}") from e
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(payload, dotted, value)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None,
                    defaults: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a JSON run config file; a missing path means an all-overrides config"""
    payload: Dict[str, Any] = {}
    if path:
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    config = build_run_config(payload, overrides, defaults)
    logger.debug(f"Loaded run config (seed={config.seed}, device={config.device})")
    return config
