"""Central finite differences, the oracle for every backward rule."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from konvlina.core.tensor import Parameter, Tape, Tensor, backward, no_record


def finite_diff_grad(f: Callable[[], float], params: Sequence[Parameter], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f()`` with respect to each parameter.

    ``f`` is re-evaluated twice per scalar coordinate, with the parameter's
    value temporarily shifted by ±h.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = []
    with no_record():
        for p in params:
            base = p.data.copy()
            g = np.zeros(p.shape)
            flat = base.reshape(-1)
            for i in range(flat.size):
                bumped = flat.copy()
                bumped[i] = flat[i] + h
                p.assign(bumped.reshape(p.shape))
                up = float(f())
                bumped[i] = flat[i] - h
                p.assign(bumped.reshape(p.shape))
                down = float(f())
                g.reshape(-1)[i] = (up - down) / (2 * h)
            p.assign(base)
            grads.append(g)
    return grads


def analytic_grad(f: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    """Gradients of the scalar tensor ``f()`` via one taped pass."""
    with Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = f()
    grads = backward(tape, loss)
    return [grads[p.id] for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative difference, with an absolute floor on the scale.

    The floor keeps exactly-zero gradients (where the difference quotient
    only sees rounding noise) from reading as a 100% error.
    """
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> list[float]:
    """Per-parameter relative error between backward() and finite differences."""
    ana = analytic_grad(f, params)
    num = finite_diff_grad(lambda: f().item(), params, h)
    return [relative_error(a, n) for a, n in zip(ana, num)]
