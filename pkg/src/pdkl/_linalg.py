"""Small eigenvalue estimators shared by the FEM and PD time-step selection."""

from __future__ import annotations

import numpy as np

from pdkl.errors import NumericalError


def power_iteration(matvec, n: int, *, rtol: float = 1e-6, max_iter: int = 10_000, seed: int = 0):
    """Largest-magnitude eigenvalue of a symmetric operator given as ``matvec``.

    Returns the Rayleigh quotient once its relative change between iterations
    drops below ``rtol``. For the symmetric positive semidefinite operators
    used here the quotient increases monotonically towards the true value.
    """
    if n == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = None
    for _ in range(max_iter):
        y = matvec(x)
        new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        if lam is not None and abs(new - lam) <= rtol * abs(new):
            return abs(new)
        lam = new
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")
