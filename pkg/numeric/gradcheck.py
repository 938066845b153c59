"""
Central finite-difference gradient checks.

`check_gradients` compares the tape's analytic gradient against
(f(x + h) - f(x - h)) / 2h for every element of every input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

from numeric.tensor import GradTape, Tensor, backward


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    analytic: Dict[str, np.ndarray] = field(default_factory=dict)
    numeric: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_error < tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def _evaluate(fn: Callable[[Dict[str, Tensor]], Tensor], values: Mapping[str, np.ndarray]) -> float:
    return fn({k: Tensor(v, dtype=np.float64) for k, v in values.items()}).item()


def numerical_gradient(
    fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    name: str,
    eps: float = 1e-5,
) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    target = base[name]
    grad = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        original = target[idx]
        target[idx] = original + eps
        up = _evaluate(fn, base)
        target[idx] = original - eps
        down = _evaluate(fn, base)
        target[idx] = original
        grad[idx] = (up - down) / (2.0 * eps)
    return grad


def check_gradients(
    fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> GradCheckReport:
    """`fn` maps named input tensors to a scalar loss tensor."""
    params = {k: Tensor(v, requires_grad=True, name=k, dtype=np.float64) for k, v in inputs.items()}
    with GradTape() as tape:
        loss = fn(params)
    analytic = backward(loss, tape).for_params(params)

    report = GradCheckReport()
    for name in inputs:
        numeric = numerical_gradient(fn, inputs, name, eps=eps)
        report.analytic[name] = analytic[name]
        report.numeric[name] = numeric
        report.errors[name] = relative_error(analytic[name], numeric)
    return report
