"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from medusa.tensor import Tensor, backward, no_grad
from medusa import ops


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


# Gradients that are analytically zero (a conv bias feeding batch-statistics
# normalization) have no meaningful relative error: the tape gives ~1e-16 and
# central differences give rounding noise of about eps * |f| / step ~ 1e-10.
# Below this norm the comparison becomes absolute (1e-4 * floor = 1e-9).
GRAD_FLOOR = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: list[Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
) -> dict[int, float]:
    """Compare tape and finite-difference gradients of ``fn(*inputs)``.

    Non-scalar outputs are reduced against a fixed random projection so every
    output element contributes. Returns the relative error per input index.
    """
    with no_grad():
        probe = fn(*inputs)
    proj = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def scalar(out: Tensor) -> Tensor:
        return out if proj is None else ops.total(ops.hadamard(out, Tensor(proj)))

    for t in inputs:
        t.grad = None
    backward(scalar(fn(*inputs)))

    def value() -> float:
        with no_grad():
            return float(scalar(fn(*inputs)).data)

    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        num = numeric_grad(value, t.data, step)
        tape = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[i] = relative_error(tape, num)
    return errors
