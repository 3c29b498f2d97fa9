import logging
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.config import ModelSection
from core.errors import ConfigurationError
from model.network import DaSNet, load_model, save_model

logger = logging.getLogger(__name__)

WEIGHTS_SUFFIX = ".dsv2"


class TrainingState(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch: int = Field(ge=0)
    lr: float = Field(ge=0.0)
    seed: int
    step: int = Field(default=0, ge=0)
    val_f1: float | None = None


def sidecar_path(weights_path: Path | str) -> Path:
    return Path(weights_path).with_suffix(".json")


def save_checkpoint(model: DaSNet, state: TrainingState, weights_path: Path | str) -> Path:
    weights_path = Path(weights_path)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    size = save_model(model, weights_path)
    sidecar_path(weights_path).write_text(state.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Checkpoint epoch {state.epoch} written to {weights_path} ({size} bytes)")
    return weights_path


def load_training_state(weights_path: Path | str) -> TrainingState:
    path = sidecar_path(weights_path)
    if not path.is_file():
        raise ConfigurationError(f"training state not found: {path}")
    try:
        return TrainingState.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"invalid training state {path}: {e.error_count()} errors") from e


def load_checkpoint(cfg: ModelSection, weights_path: Path | str) -> tuple[DaSNet, TrainingState]:
    return load_model(cfg, weights_path), load_training_state(weights_path)
