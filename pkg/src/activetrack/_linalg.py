"""Small dense linear-algebra helpers shared by the filter, smoother and DP code."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve

LOG_2PI = float(np.log(2.0 * np.pi))


class IllPosedModelError(ValueError):
    """A covariance that should be positive definite is not, even after regularization."""


def regularized_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix.

    On failure a single jitter of ``1e-10 * trace / d`` is added to the
    diagonal before giving up with :class:`IllPosedModelError`.
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    d = A.shape[0]
    eps = 1e-10 * float(np.trace(A)) / d
    if eps > 0.0:
        try:
            return np.linalg.cholesky(A + eps * np.eye(d))
        except np.linalg.LinAlgError:
            pass
    raise IllPosedModelError(f"matrix is not positive definite (trace={np.trace(A):.3g}, d={d})")


def spd_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A`` via Cholesky."""
    L = regularized_cholesky(A)
    return cho_solve((L, True), B, check_finite=False)


def sym(B: np.ndarray) -> np.ndarray:
    return 0.5 * (B + B.T)
