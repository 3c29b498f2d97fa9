import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from autodiff.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}
RELATIVE_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_relative_error: float = 0.0
    worst_parameter: str = ""
    per_parameter_errors: list[tuple[str, float]] = field(default_factory=list)
    checked_entries: int = 0

    def passed(self, tolerance: float = 1e-3) -> bool:
        return self.max_relative_error < tolerance


def relative_error(
    analytic: float, numeric: float, floor: float = RELATIVE_FLOOR
) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _select_entries(
    sizes: list[int], max_entries: int | None, rng: np.random.Generator
) -> list[list[int]]:
    if max_entries is None or max_entries >= sum(sizes):
        return [list(range(s)) for s in sizes]
    offsets = np.cumsum([0, *sizes])
    picks = np.sort(rng.choice(int(offsets[-1]), size=max_entries, replace=False))
    chosen: list[list[int]] = [[] for _ in sizes]
    for flat in picks:
        owner = int(np.searchsorted(offsets, flat, side="right") - 1)
        chosen[owner].append(int(flat - offsets[owner]))
    return chosen


def finite_diff_gradcheck(
    fragment: Callable[[Tensor], Tensor],
    input: Tensor,
    parameters: Sequence[Tensor] = (),
    epsilon: float | None = None,
    dtype: type = np.float64,
    max_entries: int | None = None,
    check_input: bool = True,
    buffers: Sequence[np.ndarray] = (),
    seed: int = 0,
    floor: float = RELATIVE_FLOOR,
) -> GradCheckReport:
    """Compare backward() against central differences (f(θ+ε) − f(θ−ε)) / 2ε.

    Parameters and input are promoted to `dtype` for the duration of the check and restored
    afterwards. `buffers` (e.g. running statistics) are reset before every evaluation.
    Gradients smaller than `floor` are compared in absolute terms against `floor`.
    """
    dt = np.dtype(dtype)
    eps = DEFAULT_EPSILON.get(dt, 1e-3) if epsilon is None else epsilon
    targets = list(parameters) + ([input] if check_input else [])
    names = [t.name or f"param{i}" for i, t in enumerate(parameters)]
    if check_input:
        names.append(input.name or "input")
    originals = [t.data for t in targets]
    input_original = input.data
    snapshots = [b.copy() for b in buffers]
    requires = [t.requires_grad for t in targets]

    def _reset_buffers() -> None:
        for buf, snap in zip(buffers, snapshots):
            buf[...] = snap

    try:
        for t in targets:
            t.data = t.data.astype(dt)
            t.requires_grad = True
            t.grad = None
        if not check_input:
            input.data = input.data.astype(dt)
        _reset_buffers()
        loss = fragment(input)
        backward(loss, targets)
        analytic = [t.grad.copy() for t in targets]

        rng = np.random.default_rng(seed)
        chosen = _select_entries([t.size for t in targets], max_entries, rng)
        report = GradCheckReport()
        with no_grad():
            for name, t, grad, entries in zip(names, targets, analytic, chosen):
                if not entries:
                    continue
                flat = t.data.reshape(-1)
                worst = 0.0
                for k in entries:
                    orig = flat[k]
                    flat[k] = orig + eps
                    _reset_buffers()
                    f_plus = float(fragment(input).data)
                    flat[k] = orig - eps
                    _reset_buffers()
                    f_minus = float(fragment(input).data)
                    flat[k] = orig
                    numeric = (f_plus - f_minus) / (2.0 * eps)
                    err = relative_error(float(grad.reshape(-1)[k]), numeric, floor)
                    worst = max(worst, err)
                report.per_parameter_errors.append((name, worst))
                report.checked_entries += len(entries)
                if worst >= report.max_relative_error:
                    report.max_relative_error = worst
                    report.worst_parameter = name
    finally:
        for t, orig, req in zip(targets, originals, requires):
            t.data = orig
            t.requires_grad = req
            t.grad = None
        input.data = input_original
        _reset_buffers()

    logger.info(
        f"gradcheck: {report.checked_entries} entries, max relative error "
        f"{report.max_relative_error:.3e} at {report.worst_parameter!r}"
    )
    return report
