import dataclasses
import enum
from typing import Optional, Tuple

import yaml

from segadapt.exceptions import ConfigurationError
from segadapt.utils import config_hash


class Phase(enum.Enum):
    SOURCE = 'source'
    GA = 'ga'
    GA_CA = 'ga-ca'

    @staticmethod
    def parse(value):
        if isinstance(value, Phase):
            return value
        try:
            return Phase(str(value).lower().replace('_', '-'))
        except ValueError:
            raise ConfigurationError(
                f'Unknown phase {value!r}, expected one of {[p.value for p in Phase]}'
            )


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 6
    widths: Tuple[int, ...] = (16, 32, 32)
    dilations: Tuple[int, ...] = (1, 2, 4)
    pool_strides: Tuple[int, ...] = (2, 4)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(self.widths))
        object.__setattr__(self, 'dilations', tuple(self.dilations))
        object.__setattr__(self, 'pool_strides', tuple(self.pool_strides))
        if not 3 <= len(self.widths) <= 5:
            raise ConfigurationError(f'model.widths: expected 3 to 5 layers, got {len(self.widths)}')
        if len(self.dilations) != len(self.widths):
            raise ConfigurationError('model.dilations: one dilation rate per layer is required')
        if len(self.pool_strides) > len(self.widths):
            raise ConfigurationError('model.pool_strides: more pooling stages than layers')
        if self.num_classes < 2:
            raise ConfigurationError('model.num_classes: at least 2 classes are required')
        if min(self.widths) < 1 or min(self.dilations) < 1 or min(self.pool_strides, default=1) < 1:
            raise ConfigurationError('model: widths, dilations and pool strides must be positive')


@dataclasses.dataclass(frozen=True)
class DomainConfig:
    hidden: int = 64

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigurationError('domain.hidden must be positive')


@dataclasses.dataclass(frozen=True)
class PhaseConfig:
    name: str
    epochs: int = 10
    learning_rate: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, 'name', Phase.parse(self.name).value)
        if self.epochs < 0:
            raise ConfigurationError(f'phases.{self.name}.epochs must be >= 0')
        if self.learning_rate <= 0:
            raise ConfigurationError(f'phases.{self.name}.learning_rate must be positive')

    @property
    def phase(self):
        return Phase(self.name)


DEFAULT_PHASES = (
    PhaseConfig('source', epochs=30, learning_rate=0.05),
    PhaseConfig('ga', epochs=10, learning_rate=1e-4),
    PhaseConfig('ga-ca', epochs=10, learning_rate=1e-4),
)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    domain: DomainConfig = DomainConfig()
    phases: Tuple[PhaseConfig, ...] = DEFAULT_PHASES
    batch_size: int = 8
    lambda_da: float = 1.0
    lambda_mi: float = 0.1
    k_d: int = 1
    k_r: int = 1
    momentum: float = 0.9
    classifier_learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1
    eval_every: int = 1
    normalize_by_units: bool = True
    unit_sample: Optional[int] = None
    projection_solver: str = 'lbfgs'
    slack_penalty: float = 10.0
    dump_constraints: bool = False
    source_train: Optional[str] = None
    source_val: Optional[str] = None
    target_train: Optional[str] = None
    target_test: Optional[str] = None
    stats: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'phases', tuple(self.phases))
        if self.lambda_da < 0 or self.lambda_mi < 0:
            raise ConfigurationError('lambda_da and lambda_mi must be >= 0')
        if self.batch_size < 1:
            raise ConfigurationError('batch_size must be >= 1')
        if self.k_d < 0 or self.k_r < 0:
            raise ConfigurationError('k_d and k_r must be >= 0')
        if not 0 <= self.momentum < 1:
            raise ConfigurationError('momentum must be in [0, 1)')
        if self.classifier_learning_rate <= 0:
            raise ConfigurationError('classifier_learning_rate must be positive')
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ConfigurationError('checkpoint_every and eval_every must be >= 1')
        if self.unit_sample is not None and self.unit_sample < 1:
            raise ConfigurationError('unit_sample must be >= 1 when set')
        if self.projection_solver not in ('lbfgs', 'ascent'):
            raise ConfigurationError(f'Unknown projection_solver {self.projection_solver!r}')
        names = [p.name for p in self.phases]
        if len(set(names)) != len(names):
            raise ConfigurationError(f'Duplicate phase entries in {names}')

    def phase_config(self, phase):
        phase = Phase.parse(phase)
        for index, phase_config in enumerate(self.phases):
            if phase_config.phase is phase:
                return index, phase_config
        raise ConfigurationError(f'Phase {phase.value!r} is not configured')

    @property
    def hash(self):
        return config_hash(self)

    def serialize(self):
        return dataclasses.asdict(self)


def _build(cls, data, context):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f'{context}: expected a mapping, got {type(data).__name__}')
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f'{context}: unknown keys {sorted(unknown)}')
    try:
        return cls(**data)
    except TypeError as ex:
        raise ConfigurationError(f'{context}: {ex}')


def parse_config(data):
    if isinstance(data, TrainConfig):
        return data
    data = dict(data or {})
    if 'model' in data:
        data['model'] = _build(ModelConfig, data['model'], 'model')
    if 'domain' in data:
        data['domain'] = _build(DomainConfig, data['domain'], 'domain')
    if 'phases' in data:
        if not isinstance(data['phases'], list):
            raise ConfigurationError('phases: expected a list')
        data['phases'] = tuple(
            _build(PhaseConfig, p, f'phases[{i}]') for i, p in enumerate(data['phases'])
        )
    return _build(TrainConfig, data, 'config')


def load_config(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as ex:
        raise ConfigurationError(f'Cannot read config {path}: {ex}')
    except yaml.YAMLError as ex:
        raise ConfigurationError(f'Malformed config {path}: {ex}')
    return parse_config(data)
