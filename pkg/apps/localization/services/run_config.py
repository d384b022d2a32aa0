"""
Run Configuration
JSON run documents validated by a strict pydantic schema, dotted command-line
overrides generated from the same schema, and canonical serialization.

Precedence: defaults < config file < flags.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterator, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from apps.localization.exceptions import ConfigurationError
from apps.localization.services.toytrain import TrainConfig

logger = logging.getLogger(__name__)

OVERRIDE_PREFIX = 'cfg__'
U64_MAX = 2 ** 64 - 1


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class WeightingConfig(StrictModel):
    a: float = Field(0.5, gt=0, description='Offset bound half-scale (knots span [-2a, 2a])')
    c: float = Field(0.25, gt=0, description='Weighting curvature')
    n_bins: int = Field(32, ge=4, description='Bin count N (even)')

    @field_validator('n_bins')
    @classmethod
    def n_bins_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError('n_bins must be even')
        return value


class LossWeightsConfig(StrictModel):
    fgl: float = Field(0.15, ge=0, description='FGL loss weight')
    ddf: float = Field(1.5, ge=0, description='DDF loss weight')


class TrainSection(StrictModel):
    steps: int = Field(500, ge=0, description='Gradient-descent steps')
    learning_rate: float = Field(0.5, gt=0, description='Step size on logits')
    seed: int = Field(0, ge=0, le=U64_MAX, description='Toy problem seed')
    rematch_every: int = Field(10, ge=1, description='Steps between Hungarian rematches')
    distill: bool = Field(True, description='Apply the DDF gradient')
    kl_direction: Literal['teacher_student', 'student_teacher'] = Field(
        'teacher_student', description='KL argument order in DDF',
    )


class DataConfig(StrictModel):
    num_queries: int = Field(8, ge=1, description='Predictions K')
    num_gt: int = Field(4, ge=1, description='Ground truths G')
    scene_size: float = Field(100.0, gt=0, description='Side of the square scene')
    noise: float = Field(0.05, ge=0, description='Jitter of the matched queries, fraction of scene size')

    @model_validator(mode='after')
    def queries_cover_gts(self) -> 'DataConfig':
        if self.num_queries < self.num_gt:
            raise ValueError('num_queries must be >= num_gt')
        return self


class RunConfig(StrictModel):
    weighting: WeightingConfig = Field(default_factory=WeightingConfig)
    layers: int = Field(3, ge=2, description='Decoder layers L')
    temperature: float = Field(5.0, gt=0, description='DDF temperature T')
    loss_weights: LossWeightsConfig = Field(default_factory=LossWeightsConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataConfig = Field(default_factory=DataConfig)

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.train.steps,
            learning_rate=self.train.learning_rate,
            a=self.weighting.a,
            c=self.weighting.c,
            n_bins=self.weighting.n_bins,
            temperature=self.temperature,
            w_fgl=self.loss_weights.fgl,
            w_ddf=self.loss_weights.ddf,
            distill_enabled=self.train.distill,
            rematch_every=self.train.rematch_every,
            kl_direction=self.train.kl_direction,
        )

    def to_canonical_json(self) -> str:
        """Sorted keys, 2-space indent, trailing newline"""
        return json.dumps(self.model_dump(mode='json'), sort_keys=True, indent=2) + '\n'


def config_leaves(model_cls=RunConfig, prefix: str = '') -> Iterator[Tuple[str, Any]]:
    """Yield (dotted name, FieldInfo) for every scalar field of the schema"""
    for name, info in model_cls.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            yield from config_leaves(annotation, f"{prefix}{name}.")
        else:
            yield f"{prefix}{name}", info


def _dest(dotted: str) -> str:
    return OVERRIDE_PREFIX + dotted.replace('.', '__')


def add_config_arguments(parser):
    """Register --config plus one --<dotted.name> flag per RunConfig leaf (--seed aliases --train.seed)"""
    parser.add_argument('--config', dest='config_path', default=None, help='RunConfig JSON file')
    for dotted, info in config_leaves():
        flags = [f'--{dotted}']
        if dotted == 'train.seed':
            flags.append('--seed')
        parser.add_argument(
            *flags,
            dest=_dest(dotted),
            default=None,
            metavar=dotted.rsplit('.', 1)[-1].upper(),
            help=f"{info.description or dotted} (default: {info.default})",
        )


def collect_overrides(options: Dict[str, Any]) -> Dict[str, Any]:
    """Dotted overrides from parsed command options, skipping flags that were not given"""
    overrides = {}
    for dotted, _ in config_leaves():
        value = options.get(_dest(dotted))
        if value is not None:
            overrides[dotted] = value
    return overrides


def _apply_override(data: Dict[str, Any], dotted: str, value: Any):
    *sections, leaf = dotted.split('.')
    node = data
    for section in sections:
        child = node.setdefault(section, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"{section}: expected an object, got {type(child).__name__}")
        node = child
    node[leaf] = value


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = '.'.join(str(part) for part in item['loc']) or '<root>'
        parts.append(f"{location}: {item['msg']}")
    return '; '.join(parts)


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run config: {_format_validation_error(e)}") from None


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the effective RunConfig.

    Args:
        path: Optional JSON config file
        overrides: Dotted key -> value, applied on top of the file

    Raises:
        ConfigurationError: malformed JSON or schema violation (the message names the key)
        OSError: unreadable config file
    """
    data: Dict[str, Any] = {}
    if path:
        text = Path(path).read_text(encoding='utf-8')
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config {path} must hold a JSON object")
        logger.debug(f"Loaded run config from {path}")

    for dotted, value in (overrides or {}).items():
        _apply_override(data, dotted, value)
    return parse_run_config(data)
