import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

from errors import ConfigurationError
from models import ScenarioKind

# Load environment variables
load_dotenv()


class Config:
    """Process-level settings for the ILNet toolkit"""

    # Logging Configuration
    LOG_LEVEL = os.getenv("ILNET_LOG_LEVEL", "INFO")
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Execution Configuration
    WORKERS = int(os.getenv("ILNET_WORKERS", "1"))

    # Storage Configuration
    DATA_DIR = os.getenv("ILNET_DATA_DIR", "data")
    RUNS_DIR = os.getenv("ILNET_RUNS_DIR", "runs")

    @classmethod
    def validate(cls) -> bool:
        """Validate process settings"""
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"ILNET_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")
        if cls.WORKERS < 1:
            raise ValueError("ILNET_WORKERS must be at least 1")
        return True


# Keys that change the parameter layout; a checkpoint only loads under the same values
MODEL_SHAPE_KEYS = (
    "history_steps", "future_steps", "num_modes", "hidden_dim", "num_heads", "num_recurrent",
    "disable_fa", "disable_ha", "das_mode", "das_hidden", "das_strict_shapes",
)

DEFAULT_KIND_MIX = {kind.value: 0.25 for kind in ScenarioKind}


class RunConfig(BaseModel):
    """Every knob of a generate/train/eval/ablate run"""

    seed: int = 1
    task: Literal["joint", "marginal"] = "joint"

    # Data
    data_dir: str = Field(default_factory=lambda: Config.DATA_DIR)
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(400, ge=1)
    kind_mix: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_KIND_MIX))
    sample_rate_hz: float = Field(10.0, gt=0)
    history_steps: int = Field(10, ge=2)
    future_steps: int = Field(15, ge=2)

    # Model
    num_modes: int = Field(6, ge=1)
    hidden_dim: int = Field(32, ge=1)
    num_heads: int = Field(4, ge=1)
    num_recurrent: int = Field(2, ge=1)
    map_radius: float = Field(50.0, gt=0)
    agent_radius: float = Field(50.0, gt=0)
    future_radius: float = Field(50.0, gt=0)
    history_radius: float = Field(50.0, gt=0)
    disable_fa: bool = False
    disable_ha: bool = False
    il_order: Literal["inverse", "forward"] = "inverse"
    das_mode: Literal["dynamic", "midpoint", "no_conv"] = "dynamic"
    das_strict_shapes: bool = True
    das_hidden: int = Field(8, ge=1)

    # Optimization
    lr: float = Field(5e-4, gt=0)
    lr_min: float = Field(0.0, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    huber_delta: float = Field(1.0, gt=0)
    workers: int = Field(default_factory=lambda: Config.WORKERS, ge=1)

    # Evaluation
    mr_threshold: float = Field(2.0, gt=0)
    raster_cell: float = Field(0.5, gt=0)
    raster_margin: float = Field(10.0, ge=0)
    mask_ratio: float = Field(0.0, ge=0, lt=1)
    challenge_fde: float = Field(5.0, ge=0)
    challenge_interaction_steps: int = Field(12, ge=0)
    challenge_alpha_deg: float = Field(10.0, ge=0)

    # Ablation
    ablation_seeds: List[int] = Field(default_factory=lambda: [1, 2, 3])
    ablation_rows: Optional[List[str]] = None
    mask_ratios: List[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5])

    class Config:
        extra = "forbid"

    @validator("kind_mix")
    def _check_kind_mix(cls, mix):
        known = {kind.value for kind in ScenarioKind}
        unknown = sorted(set(mix) - known)
        if unknown:
            raise ValueError(f"unknown scenario kinds {unknown}; expected a subset of {sorted(known)}")
        if any(weight < 0 for weight in mix.values()) or sum(mix.values()) <= 0:
            raise ValueError("kind weights must be non-negative with a positive sum")
        return mix

    @validator("mask_ratios", each_item=True)
    def _check_mask_ratio(cls, ratio):
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"mask ratio {ratio} outside [0, 1)")
        return ratio

    @validator("ablation_seeds")
    def _check_seeds(cls, seeds):
        if not seeds:
            raise ValueError("at least one ablation seed is required")
        return seeds

    @root_validator(skip_on_failure=True)
    def _check_heads(cls, values):
        if values["hidden_dim"] % values["num_heads"]:
            raise ValueError(f"hidden_dim {values['hidden_dim']} is not divisible by num_heads {values['num_heads']}")
        return values

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate_hz

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> "RunConfig":
        """Read a JSON config file, apply ``key=value`` overrides, validate everything"""
        values: Dict[str, Any] = {}
        if path:
            try:
                loaded = json.loads(Path(path).read_text())
            except OSError as e:
                raise ConfigurationError(f"cannot read config file {path}: {e}")
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}")
            if not isinstance(loaded, dict):
                raise ConfigurationError(f"{path}: top level must be an object")
            values.update(loaded)
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key.strip():
                raise ConfigurationError(f"override '{item}' is not of the form key=value")
            values[key.strip()] = _parse_value(raw)
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: Dict[str, Any]) -> "RunConfig":
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"invalid configuration: {e}")

    def updated(self, **changes) -> "RunConfig":
        """A validated copy with ``changes`` applied"""
        return self.from_values({**self.dict(), **changes})

    def model_signature(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in MODEL_SHAPE_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.dict(), indent=2, sort_keys=True) + "\n"


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
