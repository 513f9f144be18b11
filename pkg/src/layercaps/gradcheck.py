"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T

GRAD_FLOOR = 1e-8


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d array by central differences, perturbing ``array`` in place entry by entry."""
    if not array.flags.c_contiguous:
        raise ValueError("numerical_gradient needs a contiguous array to perturb in place")
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` over the whole tensor (Euclidean norms)."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def by_module(self) -> dict[str, float]:
        """Max error grouped by the first dotted component of the parameter name."""
        out: dict[str, float] = {}
        for name, err in self.errors.items():
            key = name.split(".")[0]
            out[key] = max(out.get(key, 0.0), err)
        return out

    def passed(self, tolerance: float) -> bool:
        return all(err < tolerance for err in self.errors.values())


def check_parameters(loss_fn: Callable[[], T.Tensor], params: Mapping[str, T.Tensor],
                     step: float = 1e-5) -> GradReport:
    """Compare autodiff gradients of ``loss_fn()`` against central differences for every param."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in params.items()}

    def value() -> float:
        with T.no_grad():
            return loss_fn().item()

    report = GradReport()
    for name, p in params.items():
        numeric = numerical_gradient(value, p.data, step)
        report.errors[name] = relative_error(analytic[name], numeric)
    return report


def check_model(model, batch, step: float = 1e-5) -> GradReport:
    params = {name: p for name, p in model.named_parameters().items() if p.trainable}
    return check_parameters(lambda: model.loss(batch), params, step)
