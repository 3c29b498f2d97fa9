"""Detection, mask and semantic losses as fused graph nodes."""

import logging
from dataclasses import dataclass

import numpy as np

from autodiff.ops import gather_cells, merge, scale
from autodiff.tensor import Tensor, make_node
from core.config import LossWeights, TrainSection
from core.errors import ConfigurationError
from model.heads import MaskDecoder, RawLevelPrediction, SemanticMap
from training.targets import TargetTensors

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def focal_loss(
    p_t: np.ndarray | float, alpha: float = 0.25, gamma: float = 2.0
) -> np.ndarray:
    """Elementwise FL = -alpha * (1 - p_t)^gamma * log(p_t)."""
    p = np.clip(np.asarray(p_t, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def sigmoid_focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    weights: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float = 1.0,
) -> Tensor:
    """sum(weights * FL(sigmoid(logits), targets)) / normalizer with alpha for positives."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    wts = np.asarray(weights, dtype=x.dtype)
    if y.shape != x.shape or wts.shape != x.shape:
        raise ConfigurationError(
            f"focal targets {y.shape} / weights {wts.shape} != logits {x.shape}"
        )
    sign = 2.0 * y - 1.0
    p_t = np.clip(0.5 * (np.tanh(0.5 * sign * x) + 1.0), PROB_CLAMP, 1.0 - PROB_CLAMP)
    alpha_t = np.where(y > 0, alpha, 1.0 - alpha)
    one_minus = 1.0 - p_t
    log_p = np.log(p_t)
    per_entry = -alpha_t * one_minus**gamma * log_p
    out = np.asarray((wts * per_entry).sum() / normalizer, dtype=x.dtype)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        slope = gamma * p_t * one_minus**gamma * log_p - one_minus ** (gamma + 1)
        dx = sign * alpha_t * slope
        return ((g * wts * dx / normalizer).astype(x.dtype),)

    return make_node(out, [logits], _backward, "sigmoid_focal_loss")


def softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, normalizer: float | None = None
) -> Tensor:
    """Per-pixel cross-entropy over the channel axis of (n, C, H, W) logits."""
    x = logits.data
    lab = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or lab.shape != (x.shape[0], *x.shape[2:]):
        raise ConfigurationError(f"labels {lab.shape} do not fit logits {x.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= x.shape[1]):
        raise ConfigurationError("cross-entropy label out of range")
    norm = float(lab.size) if normalizer is None else normalizer
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    onehot = np.moveaxis(np.eye(x.shape[1], dtype=x.dtype)[lab], -1, 1)
    out = np.asarray(-(onehot * log_probs).sum() / max(norm, 1.0), dtype=x.dtype)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return ((g * (np.exp(log_probs) - onehot) / max(norm, 1.0)).astype(x.dtype),)

    return make_node(out, [logits], _backward, "softmax_cross_entropy")


def smooth_l1(
    pred: Tensor,
    target: np.ndarray,
    weights: np.ndarray,
    normalizer: float = 1.0,
    beta: float = 1.0,
) -> Tensor:
    x = pred.data
    tgt = np.asarray(target, dtype=x.dtype)
    wts = np.asarray(weights, dtype=x.dtype)
    if tgt.shape != x.shape or wts.shape != x.shape:
        raise ConfigurationError(f"smooth_l1 target {tgt.shape} != prediction {x.shape}")
    d = x - tgt
    ad = np.abs(d)
    per_entry = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray((wts * per_entry).sum() / normalizer, dtype=x.dtype)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return ((g * wts * np.clip(d / beta, -1.0, 1.0) / normalizer).astype(x.dtype),)

    return make_node(out, [pred], _backward, "smooth_l1")


def _zero_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=t.dtype))


@dataclass
class LossBreakdown:
    focal: Tensor
    box: Tensor
    mask: Tensor
    semantic: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "focal": self.focal.item(),
            "box": self.box.item(),
            "mask": self.mask.item(),
            "semantic": self.semantic.item(),
            "total": self.total.item(),
        }


def objectness_loss(
    levels: list[RawLevelPrediction],
    targets: TargetTensors,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Objectness focal loss on non-ignored anchors plus class focal loss at positives."""
    normalizer = float(max(targets.num_positive, 1))
    terms = []
    for raw, tgt in zip(levels, targets.levels):
        n, channels, h, w = raw.cls.shape
        num_anchors = tgt.objectness.shape[1]
        per_anchor = channels // num_anchors
        y = np.zeros((n, num_anchors, per_anchor, h, w), dtype=raw.cls.dtype)
        wts = np.zeros_like(y)
        y[:, :, 0] = tgt.objectness
        wts[:, :, 0] = ~tgt.ignore
        y[:, :, 1:] = tgt.objectness[:, :, None]
        wts[:, :, 1:] = tgt.positive[:, :, None]
        terms.append(
            sigmoid_focal_loss(
                raw.cls,
                y.reshape(n, channels, h, w),
                wts.reshape(n, channels, h, w),
                alpha,
                gamma,
                normalizer,
            )
        )
    return merge(terms, "add")


def regression_and_mask_losses(
    levels: list[RawLevelPrediction],
    mask_decoders: list[MaskDecoder],
    semantic: SemanticMap,
    targets: TargetTensors,
) -> tuple[Tensor, Tensor, Tensor]:
    """(box_loss, mask_loss, semantic_loss); box and mask are 0 without positives."""
    num_pos = targets.num_positive
    num_masks = sum(len(t.mask_cells) for t in targets.levels)
    box_terms, mask_terms = [], []
    for raw, decoder, tgt in zip(levels, mask_decoders, targets.levels):
        if tgt.num_positive:
            n, channels, h, w = raw.box.shape
            wts = np.broadcast_to(tgt.positive[:, :, None], tgt.box.shape)
            box_terms.append(
                smooth_l1(
                    raw.box,
                    tgt.box.reshape(n, channels, h, w),
                    wts.reshape(n, channels, h, w),
                    normalizer=float(num_pos),
                )
            )
        if len(tgt.mask_cells):
            b, i, j = tgt.mask_cells.T
            seeds = gather_cells(raw.mask_feat, b, i, j)
            pixels = float(num_masks * tgt.mask_targets.shape[1] * tgt.mask_targets.shape[2])
            mask_terms.append(softmax_cross_entropy(decoder(seeds), tgt.mask_targets, pixels))
    ref = semantic.logits
    box_loss = merge(box_terms, "add") if box_terms else _zero_like(ref)
    mask_loss = merge(mask_terms, "add") if mask_terms else _zero_like(ref)
    semantic_loss = softmax_cross_entropy(semantic.logits, targets.semantic)
    return box_loss, mask_loss, semantic_loss


def total_loss(
    levels: list[RawLevelPrediction],
    mask_decoders: list[MaskDecoder],
    semantic: SemanticMap,
    targets: TargetTensors,
    cfg: TrainSection,
) -> LossBreakdown:
    weights: LossWeights = cfg.loss_weights
    focal = objectness_loss(levels, targets, cfg.focal_alpha, cfg.focal_gamma)
    box, mask, sem = regression_and_mask_losses(levels, mask_decoders, semantic, targets)
    total = merge(
        [
            scale(focal, weights.focal),
            scale(box, weights.box),
            scale(mask, weights.mask),
            scale(sem, weights.semantic),
        ],
        "add",
    )
    return LossBreakdown(focal=focal, box=box, mask=mask, semantic=sem, total=total)
