"""Dense float64 tensors and the finite-difference probe.

Tensors are plain C-contiguous (row-major) ``numpy.ndarray`` objects of dtype
float64. The helpers here add the shape checks and finiteness guarantees the
rest of the package relies on.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .exceptions import DimensionError, NumericalError

Tensor = np.ndarray


def as_tensor(values, shape=None) -> Tensor:
    """Return ``values`` as a C-contiguous float64 array, optionally reshaped.

    Raises ``NumericalError`` when any entry is NaN or infinite.
    """
    out = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"tensor extents must be positive, got {shape}")
        if out.size != int(np.prod(shape)):
            raise DimensionError(
                f"cannot view {out.size} values as shape {shape}")
        out = out.reshape(shape)
    if not np.all(np.isfinite(out)):
        raise NumericalError("tensor contains NaN or Inf")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor,
                     h: float = 1e-5) -> Tensor:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    Each coordinate is perturbed in turn on a private copy of ``x``, so ``f``
    may close over arrays that alias ``x`` only if it reads them through its
    argument.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(
                f"non-finite function value while probing coordinate {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``.

    Returns 0 when both tensors are exactly zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise DimensionError(
            f"cannot compare shapes {analytic.shape} and {numeric.shape}")
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
