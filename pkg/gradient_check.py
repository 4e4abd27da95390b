"""
Central finite-difference checks for layer and network backward passes.
Run in float64: build layers/networks with dtype=np.float64.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from neural_core import Layer, Network, mse_loss


ABSOLUTE_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABSOLUTE_FLOOR) -> float:
    """
    ||a - n|| / (||a|| + ||n||), or 0 when both norms sum below `floor`.
    A conv bias feeding batchnorm has an exactly zero gradient; its analytic value is
    roundoff (~1e-18).
    """
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-4,
                       indices=None) -> np.ndarray:
    """Perturbs `array` in place, one element at a time. `indices` restricts
    the elements checked; the others stay zero."""
    grad = np.zeros_like(array)
    if indices is None:
        indices = np.ndindex(array.shape)
    for idx in indices:
        original = array[idx]
        array[idx] = original + step
        plus = f()
        array[idx] = original - step
        minus = f()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def _sample_indices(array: np.ndarray, rng: np.random.Generator, limit: Optional[int]):
    if limit is None or array.size <= limit:
        return None
    flat = rng.choice(array.size, size=limit, replace=False)
    return [np.unravel_index(i, array.shape) for i in sorted(flat)]


def _compare(analytic, f, array, step, rng, limit) -> float:
    indices = _sample_indices(array, rng, limit)
    numeric = numerical_gradient(f, array, step, indices)
    if indices is None:
        return relative_error(analytic, numeric)
    picked = tuple(np.array(ix) for ix in zip(*indices))
    return relative_error(analytic[picked], numeric[picked])


def check_layer(layer: Layer, x: np.ndarray, seed: int = 0, step: float = 1e-4,
                limit: Optional[int] = None) -> Dict[str, float]:
    """Scalar loss sum(forward(x) * R) for a fixed random R; compares d/dx and every parameter.
    Uses train mode so batchnorm differentiates through its batch statistics."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    projection = rng.standard_normal(layer.forward(x, train=True).shape)

    def loss() -> float:
        return float(np.sum(layer.forward(x, train=True) * projection))

    layer.forward(x, train=True)
    dx, grads = layer.backward(projection)
    errors = {"input": _compare(dx, loss, x, step, rng, limit)}
    for name, param in layer.params.items():
        errors[name] = _compare(grads[name], loss, param, step, rng, limit)
    return errors


def check_network(network: Network, x: np.ndarray, target: np.ndarray, step: float = 1e-4,
                  limit: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Gradient of the MSE loss w.r.t. every parameter, train mode (batch statistics)."""
    rng = np.random.default_rng(seed)

    def loss() -> float:
        return mse_loss(network.forward(x, mode="train"), target)[0]

    _, grad = mse_loss(network.forward(x, mode="train"), target)
    analytic = network.backward(grad)
    return {name: _compare(analytic[name], loss, param, step, rng, limit)
            for name, param in network.params.items()}
