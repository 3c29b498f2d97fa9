"""Finite-difference checks over every operator and the full composed model."""

import logging
from collections.abc import Callable

import numpy as np

from autodiff import ops
from autodiff.gradcheck import GradCheckReport, finite_diff_gradcheck
from autodiff.ops import ConvSpec, weighted_sum
from autodiff.tensor import Parameter, Tensor
from core.config import RunConfig, SynthSection
from data.synth import synth_orchard
from detection.anchors import generate_anchors
from model.network import build_dasnet
from training.losses import (
    sigmoid_focal_loss,
    smooth_l1,
    softmax_cross_entropy,
    total_loss,
)
from training.targets import assign_targets
from training.trainer import images_to_batch

logger = logging.getLogger(__name__)

MODEL_CHECK_FLOOR = 1e-5


def _projector(rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Reduce any tensor to a scalar with fixed random weights."""
    cache: dict[tuple[int, ...], np.ndarray] = {}

    def _project(t: Tensor) -> Tensor:
        if t.shape not in cache:
            cache[t.shape] = rng.standard_normal(t.shape)
        return weighted_sum(t, cache[t.shape])

    return _project


def _conv_case(rng: np.random.Generator, stride: int, dilation: int) -> GradCheckReport:
    spec = ConvSpec(
        in_channels=3,
        out_channels=4,
        kernel=(3, 3),
        stride=stride,
        dilation=dilation,
        padding=dilation,
        has_bias=True,
    )
    weight = Parameter(rng.standard_normal((4, 3, 3, 3)), name="weight")
    bias = Parameter(rng.standard_normal(4), name="bias")
    project = _projector(rng)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), name="x")
    return finite_diff_gradcheck(
        lambda t: project(ops.conv2d(t, spec, weight, bias)), x, [weight, bias]
    )


def operator_checks(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}
    project = _projector(rng)

    def _x(shape: tuple[int, ...], name: str = "x") -> Tensor:
        return Tensor(rng.standard_normal(shape), name=name)

    reports["conv2d"] = _conv_case(rng, stride=1, dilation=1)
    reports["conv2d_strided_dilated"] = _conv_case(rng, stride=2, dilation=2)

    scale = Parameter(rng.uniform(0.5, 1.5, 4), name="scale")
    shift = Parameter(rng.standard_normal(4), name="shift")
    mean, var = np.zeros(4), np.ones(4)
    reports["batch_norm"] = finite_diff_gradcheck(
        lambda t: project(ops.batch_norm(t, scale, shift, mean, var, mode="train")),
        _x((3, 4, 5, 5)),
        [scale, shift],
        buffers=[mean, var],
    )
    for kind in ("tanh", "sigmoid", "leaky_relu", "softmax_channels"):
        reports[kind] = finite_diff_gradcheck(
            lambda t, k=kind: project(ops.activation(t, k)), _x((2, 3, 4, 4))
        )
    reports["upsample_nearest"] = finite_diff_gradcheck(
        lambda t: project(ops.upsample_nearest(t, 2)), _x((1, 2, 3, 3))
    )
    reports["avg_pool"] = finite_diff_gradcheck(
        lambda t: project(ops.avg_pool(t, 2)), _x((1, 2, 4, 4))
    )
    gate = Parameter(rng.standard_normal(3), name="gate")
    reports["channel_gate"] = finite_diff_gradcheck(
        lambda t: project(ops.channel_gate(t, gate)), _x((2, 3, 3, 3)), [gate]
    )
    other = Parameter(rng.standard_normal((1, 2, 3, 3)), name="other")
    reports["merge_add"] = finite_diff_gradcheck(
        lambda t: project(ops.merge([t, other], "add")), _x((1, 2, 3, 3)), [other]
    )
    reports["merge_concat"] = finite_diff_gradcheck(
        lambda t: project(ops.merge([t, other], "concat_channels")),
        _x((1, 3, 3, 3)),
        [other],
    )
    rows, cols = np.array([0, 2, 2]), np.array([1, 0, 1])
    reports["gather_cells"] = finite_diff_gradcheck(
        lambda t: project(ops.gather_cells(t, np.array([0, 1, 1]), rows, cols)),
        _x((2, 4, 3, 3)),
    )

    targets = (rng.random((2, 4, 3, 3)) < 0.3).astype(np.float64)
    weights = (rng.random((2, 4, 3, 3)) < 0.8).astype(np.float64)
    reports["sigmoid_focal_loss"] = finite_diff_gradcheck(
        lambda t: sigmoid_focal_loss(t, targets, weights, 0.25, 2.0, 3.0), _x((2, 4, 3, 3))
    )
    labels = rng.integers(0, 2, (2, 4, 4))
    reports["softmax_cross_entropy"] = finite_diff_gradcheck(
        lambda t: softmax_cross_entropy(t, labels), _x((2, 2, 4, 4))
    )
    box_target = rng.standard_normal((1, 8, 3, 3))
    box_weights = np.ones((1, 8, 3, 3))
    reports["smooth_l1"] = finite_diff_gradcheck(
        lambda t: smooth_l1(t, box_target, box_weights, 2.0), _x((1, 8, 3, 3))
    )
    return reports


def model_check(
    cfg: RunConfig, size: int = 96, entries: int = 100, seed: int = 0
) -> GradCheckReport:
    """Total-loss gradient of the full network on one synthetic image, spot-checked."""
    model_cfg = cfg.model.model_copy(update={"input_size": (size, size)})
    model = build_dasnet(model_cfg, seed=seed)
    model.train()
    anchors = generate_anchors(model_cfg.anchors)
    synth_cfg = SynthSection(
        image_size=(size, size),
        fruit_count=(2, 3),
        branch_count=(1, 2),
        fruit_radius=(8, max(size // 6, 8)),
        branch_width=(3, 6),
    )
    image = synth_orchard(seed, synth_cfg)
    targets = assign_targets(image, anchors, (size, size), cfg.train.ignore_iou)
    x = images_to_batch([image], (size, size))

    def _fragment(t: Tensor) -> Tensor:
        out = model(t)
        losses = total_loss(
            out.levels, model.mask_decoders, out.semantic, targets, cfg.train
        )
        return losses.total

    return finite_diff_gradcheck(
        _fragment,
        x,
        model.parameters(),
        max_entries=entries,
        check_input=False,
        buffers=[buf for _, buf in model.named_buffers()],
        seed=seed,
        floor=MODEL_CHECK_FLOOR,
    )
