"""Fixed-point, fixed-interval and fixed-lag smoothers built on the Kalman-like filter.

All smoothers work on a recorded list of :class:`~activetrack.filtering.FilterStep`
and return *raw* estimates unless ``project=True``. The anchor estimate for
the fixed-point smoother is the raw filtered belief ``p_{k|k}``; the joint
moment recursion starts from ``diag`` of the projected one so it stays a
nonnegative pmf.
"""
from __future__ import annotations

import logging
from collections import deque
from typing import Literal, Sequence

import numpy as np
from scipy.linalg import cho_solve

from ._linalg import regularized_cholesky
from .filtering import FilterStep, project_to_simplex
from .model import MarkovModel, ObservationModel

log = logging.getLogger(__name__)

__all__ = [
    "theta_init",
    "theta_step",
    "smoother_gain",
    "fixed_point_path",
    "fixed_point_smooth",
    "fixed_interval_smooth",
    "fixed_lag_smooth",
    "FixedLagSmoother",
]

GammaForm = Literal["derived", "short"]


def theta_init(filtered: np.ndarray) -> np.ndarray:
    """Joint second moment ``E{x_k x_k^T | F_k} = diag(p_{k|k})``."""
    return np.diag(np.asarray(filtered, dtype=float))


def theta_step(
    theta_prev: np.ndarray, y: np.ndarray, u: int, chain: MarkovModel, obs: ObservationModel
) -> tuple[np.ndarray, np.ndarray]:
    """Condition the anchor/current joint on a new observation, then predict one step.

    ``theta_prev`` is ``E{x_k x_{s-1}^T | F_{s-2}}`` and ``(y, u)`` the
    observation at ``s-1`` with the control that produced it. Returns the
    normalized joint ``E{x_k x_{s-1}^T | F_{s-1}}`` and
    ``Theta_{k,s} = joint @ P^T``.
    """
    ll = obs.loglik(y, u)
    mass = theta_prev.sum(axis=0)
    support = mass > 0
    joint = None
    top = ll[support].max() if support.any() else -np.inf
    if np.isfinite(top):
        w = np.exp(ll - top)
        cand = theta_prev * w[None, :]
        total = cand.sum()
        if total > 0 and np.isfinite(total):
            joint = cand / total
    if joint is None:
        log.warning("degenerate joint normalizer; keeping previous joint moment")
        joint = theta_prev / theta_prev.sum()
    return joint, joint @ chain.P.T


def smoother_gain(
    theta: np.ndarray,
    p_anchor: np.ndarray,
    predicted_s: np.ndarray,
    u: int,
    obs: ObservationModel,
    innovation_cov: np.ndarray | None = None,
    center: Literal["joint", "filter"] = "joint",
) -> np.ndarray:
    """Smoother gain ``C_s = Cov(x_k, x_s | F_{s-1}) M^T S_s^{-1}``.

    ``S_s`` is the filter's innovation covariance at ``s``; it is rebuilt
    from ``predicted_s`` when not supplied. With ``center="joint"`` the
    covariance is ``Theta - (Theta 1)(Theta^T 1)^T``, whose rows and columns
    sum to zero, so corrections keep unit mass and vanish when the means do
    not depend on the state. ``center="filter"`` subtracts
    ``p_anchor predicted_s^T`` instead; that mixes the exact joint with the
    linear estimates, and the mismatch feeds back through later anchors.
    """
    M = obs.mean_matrix(u)
    if innovation_cov is None:
        Sigma = np.diag(predicted_s) - np.outer(predicted_s, predicted_s)
        innovation_cov = M @ Sigma @ M.T + np.tensordot(predicted_s, obs.covs[u], axes=1)
    if center == "joint":
        B = theta - np.outer(theta.sum(axis=1), theta.sum(axis=0))
    elif center == "filter":
        B = theta - np.outer(p_anchor, predicted_s)
    else:
        raise ValueError(f"unknown centering {center!r}")
    L = regularized_cholesky(innovation_cov)
    return cho_solve((L, True), M @ B.T, check_finite=False).T


def _corrections(
    steps: Sequence[FilterStep], k: int, R: int, chain: MarkovModel, obs: ObservationModel
) -> list[np.ndarray]:
    """``C_s zeta_s`` for ``s = k+1..R`` with gains anchored at ``k``."""
    p = steps[k].raw_filtered.copy()
    theta = theta_init(steps[k].filtered) @ chain.P.T
    out = []
    for s in range(k + 1, R + 1):
        if s > k + 1:
            prev = steps[s - 1]
            _, theta = theta_step(theta, prev.y, prev.control, chain, obs)
        st = steps[s]
        C = smoother_gain(theta, p, st.predicted, st.control, obs, st.innovation_cov)
        corr = C @ st.innovation
        out.append(corr)
        p = p + corr
    return out


def fixed_point_path(
    steps: Sequence[FilterStep], k: int, R: int, chain: MarkovModel, obs: ObservationModel
) -> np.ndarray:
    """Raw ``p_{k|s}`` for ``s = k..R`` as rows of an ``(R-k+1, n)`` array."""
    if not 0 <= k <= R < len(steps):
        raise ValueError(f"need 0 <= k <= R < {len(steps)}, got k={k}, R={R}")
    out = [steps[k].raw_filtered.copy()]
    for corr in _corrections(steps, k, R, chain, obs):
        out.append(out[-1] + corr)
    return np.array(out)


def fixed_point_smooth(
    steps: Sequence[FilterStep],
    k: int,
    R: int,
    chain: MarkovModel,
    obs: ObservationModel,
    project: bool = True,
) -> np.ndarray:
    """Estimate of ``x_k`` given data through ``R``."""
    p = fixed_point_path(steps, k, R, chain, obs)[-1]
    return project_to_simplex(p) if project else p


def fixed_interval_smooth(
    steps: Sequence[FilterStep],
    L: int,
    chain: MarkovModel,
    obs: ObservationModel,
    project: bool = False,
) -> np.ndarray:
    """``p_{k|L}`` for ``k = 0..L`` via the forward fixed-interval recursion.

    ``p_{0|L}`` is the fixed-point estimate; each later row is
    ``P p_{k-1|L} + (I - P) sum_{s=k}^{L} C_s zeta_s`` with gains anchored
    at ``k`` (so ``C_k = G_k``). Row ``L`` is the filtered ``p_{L|L}``.
    """
    if not 0 <= L < len(steps):
        raise ValueError(f"L must be in [0, {len(steps) - 1}]")
    n = chain.n
    P = chain.P
    I_P = np.eye(n) - P
    out = np.empty((L + 1, n))
    out[0] = steps[0].raw_filtered + sum(_corrections(steps, 0, L, chain, obs), np.zeros(n))
    for k in range(1, L):
        st = steps[k]
        tail = st.gain @ st.innovation + sum(_corrections(steps, k, L, chain, obs), np.zeros(n))
        out[k] = P @ out[k - 1] + I_P @ tail
    if L > 0:
        out[L] = steps[L].raw_filtered
    if project:
        out = np.array([project_to_simplex(p) for p in out])
    return out


class FixedLagSmoother:
    """Online fixed-lag smoother emitting ``p_{k|k+delta}`` once ``delta`` more steps arrive.

    Holds exactly ``delta + 1`` filter steps. ``gamma`` selects the
    one-step correction term ``Gamma``: ``"short"`` is
    ``C zeta - p_{k+1|k} - p_{k|k-1} + P p_{k|k-1}``, ``"derived"`` is
    ``C zeta + (I - P)(p_{k|k} - p_{k|k-1})`` on the raw update, which is
    what differencing two fixed-point sums gives. The short form lacks a
    ``p_{k|k}`` term, so every step removes one unit of total mass.
    """

    def __init__(
        self, delta: int, chain: MarkovModel, obs: ObservationModel, gamma: GammaForm = "derived"
    ) -> None:
        if delta < 1:
            raise ValueError("delta must be >= 1")
        if gamma not in ("derived", "short"):
            raise ValueError(f"unknown gamma form {gamma!r}")
        self.delta = delta
        self.chain = chain
        self.obs = obs
        self.gamma = gamma
        self._buf: deque[FilterStep] = deque(maxlen=delta + 1)
        self._k = 0
        self._prev: np.ndarray | None = None

    def push(self, step: FilterStep) -> np.ndarray | None:
        """Add filter step ``k + delta``; return raw ``p_{k|k+delta}`` when available."""
        self._buf.append(step)
        if len(self._buf) <= self.delta:
            return None
        buf = list(self._buf)
        corr = _corrections(buf, 0, self.delta, self.chain, self.obs)
        if self._prev is None:
            out = buf[0].raw_filtered + sum(corr, np.zeros(self.chain.n))
        else:
            P = self.chain.P
            cur, nxt = buf[0], buf[1]
            if self.gamma == "short":
                gamma = corr[-1] - nxt.predicted - cur.predicted + P @ cur.predicted
            else:
                # (I - P) G_k zeta_k with G_k zeta_k = raw p_{k|k} - p_{k|k-1}
                jump = cur.raw_filtered - cur.predicted
                gamma = corr[-1] + jump - P @ jump
            middle = sum(corr[:-1], np.zeros(self.chain.n))
            out = P @ self._prev + gamma + middle - P @ middle
        self._prev = out
        self._k += 1
        return out


def fixed_lag_smooth(
    steps: Sequence[FilterStep],
    delta: int,
    chain: MarkovModel,
    obs: ObservationModel,
    gamma: GammaForm = "derived",
    project: bool = False,
) -> np.ndarray:
    """Run :class:`FixedLagSmoother` over a recorded run; rows are ``k = 0..T-1-delta``."""
    sm = FixedLagSmoother(delta, chain, obs, gamma)
    out = [r for r in (sm.push(st) for st in steps) if r is not None]
    arr = np.array(out).reshape(-1, chain.n)
    if project:
        arr = np.array([project_to_simplex(p) for p in arr]).reshape(-1, chain.n)
    return arr
