import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from autodiff.tensor import Tensor, backward
from core.config import EvalSection, RunConfig
from core.errors import ConfigurationError, NumericError, TrainingDivergedError
from data.annotations import AnnotatedImage
from data.augment import augment, scale_amplifier
from detection.anchors import Anchor, generate_anchors
from detection.predictor import Predictor
from metrics.evaluation import EvalReport, ImagePrediction, ImageTruth, evaluate
from model.network import DaSNet
from training.checkpoint import TrainingState, save_checkpoint
from training.losses import LossBreakdown, total_loss
from training.optim import Adam
from training.targets import assign_targets, collate_targets

logger = logging.getLogger(__name__)


class EpochReport(BaseModel):
    epoch: int
    lr: float
    losses: dict[str, float]
    val_f1: float | None = None
    aborted_steps: int = 0


class TrainingReport(BaseModel):
    parameter_count: int
    weight_bytes: int = 0
    epochs: list[EpochReport] = Field(default_factory=list)
    best_epoch: int | None = None
    best_f1: float | None = None
    best_checkpoint: str | None = None


def ground_truth(image: AnnotatedImage) -> ImageTruth:
    return ImageTruth(
        name=image.name,
        boxes=[tuple(float(v) for v in inst.box) for inst in image.instances],
        masks=[inst.mask for inst in image.instances],
        branch_map=image.branch_mask,
    )


def images_to_batch(images: list[AnnotatedImage], input_size: tuple[int, int]) -> Tensor:
    for im in images:
        if im.size != tuple(input_size):
            raise ConfigurationError(
                f"image {im.name} is {im.size}, model input size is {tuple(input_size)}"
            )
    stack = np.stack([im.rgb for im in images]).astype(np.float32) / 255.0
    return Tensor(stack.transpose(0, 3, 1, 2))


def validate(
    model: DaSNet,
    anchors: list[Anchor],
    eval_cfg: EvalSection,
    images: list[AnnotatedImage],
    batch_size: int = 4,
) -> EvalReport:
    predictor = Predictor(model, anchors, eval_cfg)
    predictions: list[ImagePrediction] = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        for pred in predictor.predict_batch(images_to_batch(chunk, model.config.input_size)):
            predictions.append(
                ImagePrediction(
                    detections=pred.detections,
                    rendered_masks=pred.rendered_masks,
                    branch_map=pred.branch_map,
                )
            )
    return evaluate([ground_truth(im) for im in images], predictions, eval_cfg.match_iou)


def training_step(
    model: DaSNet,
    anchors: list[Anchor],
    images: list[AnnotatedImage],
    cfg: RunConfig,
) -> LossBreakdown:
    """Forward + backward on one batch; gradients are left on the parameters."""
    model.train()
    model.zero_grad()
    targets = collate_targets(
        [
            assign_targets(im, anchors, cfg.model.input_size, cfg.train.ignore_iou)
            for im in images
        ]
    )
    out = model(images_to_batch(images, cfg.model.input_size))
    losses = total_loss(out.levels, model.mask_decoders, out.semantic, targets, cfg.train)
    backward(losses.total, model.parameters())
    return losses


def _augmented_batch(
    batch: list[AnnotatedImage],
    rng: np.random.Generator,
    cfg: RunConfig,
    median_area: float,
) -> list[AnnotatedImage]:
    policy = cfg.train.augmentation
    out = []
    for im in batch:
        im = augment(im, int(rng.integers(0, 2**31 - 1)), policy)
        amp_seed = int(rng.integers(0, 2**31 - 1))
        if policy.scale_amplifier and rng.random() < policy.amplifier_probability:
            im = scale_amplifier(im, amp_seed, median_area)
        out.append(im)
    return out


def _median_box_area(images: list[AnnotatedImage]) -> float:
    areas = [inst.box[2] * inst.box[3] for im in images for inst in im.instances]
    return float(np.median(areas)) if areas else 0.0


def fit(
    train_set: list[AnnotatedImage],
    val_set: list[AnnotatedImage],
    model: DaSNet,
    cfg: RunConfig,
    out_dir: Path | str,
) -> TrainingReport:
    """Train with per-epoch lr decay.

    Writes `last.dsv2` every epoch and `best.dsv2` whenever validation F1 improves.
    """
    if not train_set:
        raise ConfigurationError("training set is empty")
    out_dir = Path(out_dir)
    tcfg = cfg.train
    anchors = generate_anchors(cfg.model.anchors)
    params = model.parameters()
    optimizer = Adam(params, lr=tcfg.lr, decay=tcfg.decay)
    rng = np.random.default_rng(tcfg.seed)
    median_area = _median_box_area(train_set)
    report = TrainingReport(parameter_count=model.parameter_count())
    logger.info(
        f"Training on {len(train_set)} images ({len(val_set)} validation), "
        f"{report.parameter_count} parameters, {tcfg.epochs} epochs"
    )

    batch_index = 0
    for epoch in range(tcfg.epochs):
        lr = optimizer.set_epoch(epoch)
        aborted_before = len(optimizer.state.aborted_steps)
        totals: dict[str, float] = {}
        batches = 0
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), tcfg.batch_size):
            batch = [train_set[k] for k in order[start : start + tcfg.batch_size]]
            batch = _augmented_batch(batch, rng, cfg, median_area)
            try:
                losses = training_step(model, anchors, batch, cfg)
            except NumericError as e:
                logger.error(f"Divergence at batch {batch_index}: {e.message}")
                raise TrainingDivergedError(batch_index, e.message) from e
            optimizer.step([p.grad for p in params])
            for key, value in losses.as_floats().items():
                totals[key] = totals.get(key, 0.0) + value
            batches += 1
            batch_index += 1

        mean_losses = {k: v / batches for k, v in totals.items()}
        val_f1 = None
        if val_set:
            val_f1 = validate(model, anchors, cfg.eval, val_set, tcfg.batch_size).f1
        entry = EpochReport(
            epoch=epoch,
            lr=lr,
            losses=mean_losses,
            val_f1=val_f1,
            aborted_steps=len(optimizer.state.aborted_steps) - aborted_before,
        )
        report.epochs.append(entry)
        logger.info(
            f"Epoch {epoch}: lr={lr:.6f} total={mean_losses['total']:.4f} "
            f"focal={mean_losses['focal']:.4f} box={mean_losses['box']:.4f} "
            f"mask={mean_losses['mask']:.4f} semantic={mean_losses['semantic']:.4f} "
            f"val_f1={val_f1}"
        )

        state = TrainingState(
            epoch=epoch, lr=lr, seed=tcfg.seed, step=optimizer.state.step, val_f1=val_f1
        )
        save_checkpoint(model, state, out_dir / "last.dsv2")
        score = val_f1 if val_f1 is not None else 0.0
        if report.best_f1 is None or score > report.best_f1:
            best = save_checkpoint(model, state, out_dir / "best.dsv2")
            report.best_epoch, report.best_f1 = epoch, score
            report.best_checkpoint = str(best)

    report.weight_bytes = (out_dir / "last.dsv2").stat().st_size
    (out_dir / "training_report.json").write_text(
        report.model_dump_json(indent=2), encoding="utf-8"
    )
    return report
