import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.errors import ConfigurationError
from data.rle import RLE, rle_decode, rle_encode
from detection.decode import Detection
from metrics.evaluation import ImagePrediction

logger = logging.getLogger(__name__)


class DetectionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    box: tuple[float, float, float, float]
    score: float = Field(ge=0.0, le=1.0)
    class_id: int = 0
    mask: RLE | None = None


class DetectionDump(BaseModel):
    """Per-image inference result as written by `infer` and read by `eval`/`pointcloud`."""

    model_config = ConfigDict(extra="forbid")

    image: str
    image_size: tuple[int, int]
    detections: list[DetectionRecord] = Field(default_factory=list)
    branch_mask: RLE | None = None

    @classmethod
    def from_prediction(
        cls,
        image: str,
        image_size: tuple[int, int],
        detections: list[Detection],
        branch_map: np.ndarray | None,
    ) -> "DetectionDump":
        return cls(
            image=image,
            image_size=image_size,
            detections=[
                DetectionRecord(
                    box=d.box,
                    score=min(max(d.score, 0.0), 1.0),
                    class_id=d.class_id,
                    mask=rle_encode(d.rendered_mask) if d.rendered_mask is not None else None,
                )
                for d in detections
            ],
            branch_mask=rle_encode(branch_map) if branch_map is not None else None,
        )

    def instance_masks(self) -> list[np.ndarray | None]:
        return [rle_decode(d.mask) if d.mask is not None else None for d in self.detections]

    def branch_map(self) -> np.ndarray | None:
        return rle_decode(self.branch_mask) if self.branch_mask is not None else None

    def to_image_prediction(self) -> ImagePrediction:
        return ImagePrediction(
            detections=self.detections,
            rendered_masks=self.instance_masks(),
            branch_map=self.branch_map(),
        )


def write_dump(dump: DetectionDump, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{dump.image}.json"
    path.write_text(dump.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_dump(path: Path | str) -> DetectionDump:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"detection dump not found: {path}")
    try:
        return DetectionDump.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"invalid detection dump {path}: {e.error_count()} errors") from e


def read_dumps(directory: Path | str) -> dict[str, DetectionDump]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigurationError(f"detections directory not found: {directory}")
    dumps = {}
    for path in sorted(directory.glob("*.json")):
        dump = read_dump(path)
        dumps[dump.image] = dump
    logger.info(f"Read {len(dumps)} detection dumps from {directory}")
    return dumps
