"""EPE-driven preference over the five segment movements."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

MOVES = np.array([-2, -1, 0, 1, 2])


def modulate(epe: float, k: float = 0.02, n: int = 4, b: float = 1.0) -> np.ndarray:
    """Preference vector for movements (-2, -1, 0, +1, +2) nm.

    Five points are spread evenly between 0 and ``epe`` in strictly descending
    order and pushed through ``k * x**n + b``; the softmax of the result is the
    preference. With an even power, a positive EPE (contour outside the target)
    puts the largest weight on the inward 2nm move and a negative EPE on the
    outward one.
    """
    if n % 2 or k <= 0 or b <= 0:
        raise ConfigError("modulator needs an even power and positive k, b")
    epe = float(epe)
    x = max(epe, 0.0) - np.arange(5) * (abs(epe) / 4.0)
    p = k * x**n + b
    e = np.exp(p - p.max())
    return e / e.sum()


def modulate_all(epes, **kw) -> np.ndarray:
    return np.stack([modulate(e, **kw) for e in np.asarray(epes, dtype=float)]) if len(epes) else np.zeros((0, 5))
