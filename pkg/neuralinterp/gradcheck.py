"""
Finite-difference gradient checking.

Compares tape gradients against central differences. Used by the test suite
and by anyone wiring a new primitive into the model.
"""

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from neuralinterp.autodiff import Tape, Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
RELATIVE_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """
    Outcome of a gradient check.

    Attributes:
        max_relative_error: Worst componentwise relative error over all parameters
        worst_parameter: Name of the parameter holding the worst component
        per_parameter: Worst relative error per parameter name
    """
    max_relative_error: float = 0.0
    worst_parameter: str = ""
    per_parameter: dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def numerical_gradient(
    fn: Callable[[], float],
    array: np.ndarray,
    step: float = DEFAULT_STEP,
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function w.r.t. an array.

    The array is perturbed in place one component at a time and restored.

    Args:
        fn: Zero-argument function returning a float; reads `array` implicitly
        array: Writable float64 array to perturb
        step: Difference step h

    Returns:
        Array of the same shape holding (f(x+h) - f(x-h)) / 2h
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(
    analytic: np.ndarray,
    numeric: np.ndarray,
    floor: float = RELATIVE_FLOOR,
) -> np.ndarray:
    """Componentwise |a - n| / max(|a|, |n|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    floor: float = RELATIVE_FLOOR,
) -> GradCheckReport:
    """
    Check tape gradients of `loss_fn` against central differences.

    Args:
        loss_fn: Builds the forward pass from `params` and returns a scalar loss
        params: Trainable leaves to check
        step: Difference step h
        floor: Lower bound of the relative-error denominator

    Returns:
        GradCheckReport with the worst relative errors
    """
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.backward(loss, params)

    def evaluate() -> float:
        return float(loss_fn().data.reshape(-1)[0])

    report = GradCheckReport()
    for name, tensor in params.items():
        numeric = numerical_gradient(evaluate, tensor.data, step)
        worst = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
        report.per_parameter[name] = worst
        if worst >= report.max_relative_error:
            report.max_relative_error = worst
            report.worst_parameter = name

    logger.debug(
        f"Gradient check over {len(params)} parameters: "
        f"max relative error {report.max_relative_error:.3e} ({report.worst_parameter})"
    )
    return report
