"""Central finite-difference oracle for the gradient tape.

`numerical_gradient` perturbs one element at a time by ``±h`` and evaluates a
scalar function; `check_gradients` compares those estimates against the tape's
analytic gradients with an elementwise relative error
``|a - n| / max(1, |a|, |n|)``. Both are meant for 64-bit mode.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .tensor import GradTape, Tensor, default_dtype

_LOGGER = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-4


def numerical_gradient(
    fn: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    *,
    step: float = DEFAULT_STEP,
) -> list[np.ndarray]:
    """Estimate d fn / d arrays[i] by central differences."""

    dtype = default_dtype()
    base = [np.array(a, dtype=dtype) for a in arrays]
    estimates: list[np.ndarray] = []
    for index, arr in enumerate(base):
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            upper = fn([Tensor(a) for a in base]).item()
            flat[j] = original - step
            lower = fn([Tensor(a) for a in base]).item()
            flat[j] = original
            grad.reshape(-1)[j] = (upper - lower) / (2.0 * step)
        estimates.append(grad)
        _LOGGER.debug("Estimated %d partials for argument %d", flat.size, index)
    return estimates


def analytic_gradient(
    fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Gradients of fn with respect to each argument, taken from the tape."""

    inputs = [Tensor(a) for a in arrays]
    with GradTape() as tape:
        loss = fn(inputs)
    tape.backward(loss)
    grads = []
    for tensor in inputs:
        grad = tape.grad(tensor)
        grads.append(np.zeros(tensor.shape) if grad is None else np.asarray(grad))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise ``|a - n| / max(1, |a|, |n|)``."""

    if analytic.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(
    fn: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    *,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> float:
    """Raise `NumericalError` when any partial misses its finite-difference estimate.

    Returns the worst relative error so callers can log or assert on it.
    """

    analytic = analytic_gradient(fn, arrays)
    numeric = numerical_gradient(fn, arrays, step=step)
    worst = 0.0
    for index, (a, n) in enumerate(zip(analytic, numeric, strict=True)):
        err = relative_error(a, n)
        worst = max(worst, err)
        if err > tolerance:
            raise NumericalError(
                f"gradient check failed for argument {index}: relative error {err:.3e}"
            )
    return worst
