"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad, tape


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 1e-9) -> float:
    """Norm-wise relative error.

    Gradients that are identically zero (for example a key bias under a
    shift-invariant softmax) leave only finite-difference round-off, so two
    vectors both below ``zero_tol`` in norm count as agreeing.
    """
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den < zero_tol:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / den)


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4
) -> list[float]:
    """Relative error between tape and finite-difference gradients per input.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call.
    """
    for x in inputs:
        x.zero_grad()
    with tape():
        loss = fn()
        backward(loss)
    errors = []
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        errors.append(relative_error(analytic, numeric_grad(fn, x, h)))
    return errors
