"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Params


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), 0 when both vanish."""
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if den < 1e-12 else float(num / den)


def check_gradients(
    loss: Callable[[], float],
    tensors: Params,
    analytic: Params,
    h: float = 1e-5,
) -> dict[str, float]:
    """Relative error per named tensor; ``loss`` must read the tensors live."""
    return {name: rel_error(analytic[name], numeric_grad(loss, x, h)) for name, x in tensors.items()}
