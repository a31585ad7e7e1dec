"""Central finite-difference checks for the hand-written backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, current_tape, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
                    n_entries: int | None = 10, rng: np.random.Generator | None = None) -> list[float]:
    """Compare taped gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph from the current ``tensors`` on every
    call.  For each tensor, ``n_entries`` randomly chosen coordinates are
    perturbed by ``±h`` (all coordinates if ``None``).  Returns one relative
    error per tensor, measured as a norm ratio over the sampled coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    current_tape().clear()
    loss = loss_fn()
    backward(loss)
    errors = []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if n_entries is None or n_entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=n_entries, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data.astype(np.float64).sum())
                flat[i] = orig - h
                down = float(loss_fn().data.astype(np.float64).sum())
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        errors.append(relative_error(analytic.reshape(-1)[idx], numeric))
    return errors
