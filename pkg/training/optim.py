import logging
from dataclasses import dataclass, field

import numpy as np

from autodiff.tensor import Parameter
from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def learning_rate(base_lr: float, decay: float, epoch: int) -> float:
    """Per-epoch exponential schedule, epochs counted from 0."""
    return base_lr * decay**epoch


@dataclass
class OptimizerState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    lr: float = 0.01
    decay: float = 0.9
    aborted_steps: list[int] = field(default_factory=list)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 0.01, decay: float = 0.9):
        self.params = list(params)
        self.base_lr = lr
        self.state = OptimizerState(
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            lr=lr,
            decay=decay,
        )

    def set_epoch(self, epoch: int) -> float:
        self.state.lr = learning_rate(self.base_lr, self.state.decay, epoch)
        return self.state.lr

    def step(self, grads: list[np.ndarray | None] | None = None) -> bool:
        """Apply one update; returns False (and changes nothing) on a non-finite gradient."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ConfigurationError(
                f"{len(grads)} gradients for {len(self.params)} parameters"
            )
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ConfigurationError(
                    f"gradient shape {g.shape} != parameter {p.name} shape {p.data.shape}"
                )
            if not np.all(np.isfinite(g)):
                step = self.state.step + 1
                logger.warning(f"Adam step {step} aborted: non-finite gradient in {p.name}")
                self.state.aborted_steps.append(step)
                return False

        st = self.state
        st.step += 1
        lr = st.lr
        bias1 = 1.0 - BETA1**st.step
        bias2 = 1.0 - BETA2**st.step
        for p, g, m, v in zip(self.params, grads, st.first_moment, st.second_moment):
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            update = lr * (m / bias1) / (np.sqrt(v / bias2) + EPSILON)
            p.data = (p.data - update).astype(p.data.dtype)
        return True
