"""Central finite-difference checks for autograd gradients."""

from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from .autograd import Tensor


def numerical_gradient(
    fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5
) -> np.ndarray:
    """Estimate d fn() / d param by central differences, perturbing in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = fn().item()
        flat[k] = orig - step
        down = fn().item()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``.

    When both gradients are smaller than ``floor`` the absolute difference
    is returned instead, since a ratio of two roundoff-sized numbers is
    meaningless.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < floor:
        return diff
    return diff / scale


def gradcheck(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> List[float]:
    """Relative error between autodiff and finite differences, per parameter.

    ``fn`` must rebuild the graph on each call and return a scalar tensor.
    """
    for p in params:
        p.grad = None
    fn().backward()
    errors = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        errors.append(relative_error(analytic, numerical_gradient(fn, p, step)))
    return errors
