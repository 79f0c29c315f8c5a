"""Central finite differences, the reference every backward rule is checked against."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, no_grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(()))


def finite_diff_gradient(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-5,
                         indices: Optional[Iterable[tuple]] = None) -> np.ndarray:
    """Estimate df/dx by (f(x + h e_i) - f(x - h e_i)) / 2h for each coordinate.

    ``x`` is perturbed in place and restored. When ``indices`` is given only
    those coordinates are estimated; the rest of the result stays zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grad = np.zeros(x.shape, dtype=np.float64)
    coords = np.ndindex(*x.shape) if indices is None else indices
    with no_grad():
        for idx in coords:
            orig = x.data[idx].copy()
            x.data[idx] = orig + step
            f_plus = _scalar(f(x))
            x.data[idx] = orig - step
            f_minus = _scalar(f(x))
            x.data[idx] = orig
            grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-7) -> float:
    """Max elementwise relative error; entries where both sides are below
    ``abs_floor`` in magnitude are compared absolutely."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    small = scale < abs_floor
    rel = np.where(small, 0.0, diff / np.where(small, 1.0, scale))
    if np.any(small & (diff >= abs_floor)):
        return float("inf")
    return float(rel.max()) if rel.size else 0.0


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
                    abs_floor: float = 1e-7, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> dict:
    """Compare backward() against finite differences for every tensor in ``params``.

    ``f`` rebuilds the scalar loss from scratch on each call. Returns a map
    from parameter position (or name) to max relative error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    errors = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        indices = None
        if max_coords is not None and p.data.size > max_coords:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.data.size, size=max_coords, replace=False)
            indices = [np.unravel_index(k, p.shape) for k in flat]
        numeric = finite_diff_gradient(lambda _x: f(), p, step=step, indices=indices)
        if indices is not None:
            sel = tuple(np.array(ix) for ix in zip(*indices))
            errors[p.name or i] = relative_error(a[sel], numeric[sel], abs_floor)
        else:
            errors[p.name or i] = relative_error(a, numeric, abs_floor)
    return errors
