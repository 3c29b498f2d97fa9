from autodiff.gradcheck import GradCheckReport, finite_diff_gradcheck
from autodiff.ops import (
    ConvSpec,
    activation,
    avg_pool,
    batch_norm,
    channel_gate,
    conv2d,
    gather_cells,
    merge,
    reduce_sum,
    scale,
    upsample_nearest,
    weighted_sum,
)
from autodiff.tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "ConvSpec",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "activation",
    "avg_pool",
    "backward",
    "batch_norm",
    "channel_gate",
    "conv2d",
    "finite_diff_gradcheck",
    "gather_cells",
    "merge",
    "no_grad",
    "reduce_sum",
    "scale",
    "upsample_nearest",
    "weighted_sum",
]
