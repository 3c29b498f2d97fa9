import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from core.errors import ConfigurationError, DatasetLoadError
from data.rle import RLE, rle_decode, rle_encode

logger = logging.getLogger(__name__)

IntBox = tuple[int, int, int, int]  # (x, y, w, h) in pixels


@dataclass
class Instance:
    box: IntBox
    mask: np.ndarray  # (H, W) uint8, full image
    class_name: str = "apple"

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class AnnotatedImage:
    name: str
    rgb: np.ndarray  # (H, W, 3) uint8, RGB order
    branch_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    instances: list[Instance] = field(default_factory=list)
    depth: np.ndarray | None = None  # (H, W) uint16 millimeters

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[0], self.rgb.shape[1]


class InstanceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    class_name: Literal["apple"] = "apple"
    box: IntBox
    mask: RLE


class AnnotationDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: tuple[int, int]
    instances: list[InstanceRecord]
    branch_mask: RLE


class ManifestRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image: str
    depth: str | None = None
    annotation: str


def tight_box(mask: np.ndarray) -> IntBox | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def check_instance(inst: Instance, size: tuple[int, int]) -> str | None:
    """Return a description of the first violated annotation invariant, or None."""
    height, width = size
    x, y, w, h = inst.box
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        return f"box {inst.box} outside image {width}x{height}"
    if inst.mask.shape != (height, width):
        return f"mask shape {inst.mask.shape} != image {size}"
    ys, xs = np.nonzero(inst.mask)
    if xs.size and (
        xs.min() < x - 1 or xs.max() > x + w or ys.min() < y - 1 or ys.max() > y + h
    ):
        return f"mask extends beyond box {inst.box} by more than 1 px"
    return None


def to_document(image: AnnotatedImage) -> AnnotationDocument:
    return AnnotationDocument(
        image_size=image.size,
        instances=[
            InstanceRecord(class_name="apple", box=inst.box, mask=rle_encode(inst.mask))
            for inst in image.instances
        ],
        branch_mask=rle_encode(image.branch_mask),
    )


def read_rgb(path: Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(path)
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def read_depth(path: Path) -> np.ndarray:
    depth = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if depth is None:
        raise FileNotFoundError(path)
    return depth.astype(np.uint16)


def write_rgb(path: Path, rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))


def write_depth(path: Path, depth: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), depth.astype(np.uint16))


def _load_record(record: ManifestRecord, root: Path, label: str) -> AnnotatedImage:
    image_path = root / record.image
    ann_path = root / record.annotation
    for p in (image_path, ann_path, *([root / record.depth] if record.depth else [])):
        if not p.is_file():
            raise DatasetLoadError(label, f"missing file {p}")
    try:
        doc = AnnotationDocument.model_validate_json(ann_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetLoadError(label, f"invalid annotation {ann_path}: {e}") from e
    rgb = read_rgb(image_path)
    size = (rgb.shape[0], rgb.shape[1])
    if tuple(doc.image_size) != size:
        raise DatasetLoadError(label, f"annotation size {doc.image_size} != image {size}")
    if tuple(doc.branch_mask.size) != size:
        raise DatasetLoadError(label, "branch mask size differs from image")
    depth = read_depth(root / record.depth) if record.depth else None
    if depth is not None and depth.shape != size:
        raise DatasetLoadError(label, f"depth shape {depth.shape} != image {size}")
    instances = []
    for k, inst_rec in enumerate(doc.instances):
        if tuple(inst_rec.mask.size) != size:
            raise DatasetLoadError(label, f"instance {k} mask size differs from image")
        inst = Instance(box=tuple(inst_rec.box), mask=rle_decode(inst_rec.mask))
        problem = check_instance(inst, size)
        if problem:
            raise DatasetLoadError(label, f"instance {k}: {problem}")
        instances.append(inst)
    return AnnotatedImage(
        name=Path(record.image).stem,
        rgb=rgb,
        depth=depth,
        instances=instances,
        branch_mask=rle_decode(doc.branch_mask),
    )


def load_dataset(manifest_path: Path | str) -> list[AnnotatedImage]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ConfigurationError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    images = []
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        label = f"{manifest_path.name}:{lineno}"
        try:
            record = ManifestRecord.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DatasetLoadError(label, f"malformed manifest entry: {e}") from e
        images.append(_load_record(record, root, label))
    logger.info(f"Loaded {len(images)} images from {manifest_path}")
    return images


def save_dataset(images: list[AnnotatedImage], out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for image in images:
        record = ManifestRecord(
            image=f"images/{image.name}.png",
            depth=f"depth/{image.name}.png" if image.depth is not None else None,
            annotation=f"annotations/{image.name}.json",
        )
        write_rgb(out_dir / record.image, image.rgb)
        if image.depth is not None:
            write_depth(out_dir / record.depth, image.depth)
        ann_path = out_dir / record.annotation
        ann_path.parent.mkdir(parents=True, exist_ok=True)
        ann_path.write_text(to_document(image).model_dump_json(), encoding="utf-8")
        lines.append(record.model_dump_json())
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    logger.info(f"Wrote {len(images)} images to {out_dir}")
    return manifest
