"""Kalman-like MMSE filter for a Markov chain seen through controlled Gaussian observations.

The filter keeps a single canonical belief: each update produces an
unprojected estimate ``raw_filtered`` (it sums to one but may leave the
simplex) and a projected ``filtered`` belief that is propagated forward.
The exact Bayes recursion is provided alongside as an oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve

from ._linalg import regularized_cholesky, sym
from .model import MarkovModel, ObservationModel

__all__ = [
    "FilterStep",
    "CovarianceCheck",
    "predict_belief",
    "predict_observation",
    "prediction_covariance",
    "gain",
    "update",
    "filter_step",
    "project_to_simplex",
    "mse_trace",
    "covariance_identity_check",
    "bayes_update",
    "bayes_filter_step",
    "predicted_belief_update",
    "run_filter",
    "run_bayes",
]


@dataclass(frozen=True)
class FilterStep:
    control: int
    y: np.ndarray
    predicted: np.ndarray
    predicted_obs: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray
    raw_filtered: np.ndarray
    filtered: np.ndarray
    Sigma_pred: np.ndarray
    Sigma_filt: np.ndarray
    mse_trace: float


def prediction_covariance(p: np.ndarray) -> np.ndarray:
    """``diag(p) - p p^T``, the conditional error covariance of a belief."""
    return np.diag(p) - np.outer(p, p)


def mse_trace(p: np.ndarray) -> float:
    """Trace of ``diag(p) - p p^T``, i.e. ``1 - ||p||^2`` for ``p`` summing to one."""
    return float(np.sum(p) - p @ p)


def predict_belief(prev: np.ndarray, chain: MarkovModel) -> np.ndarray:
    return chain.P @ prev


def predict_observation(predicted: np.ndarray, u: int, obs: ObservationModel) -> np.ndarray:
    return obs.mean_matrix(u) @ predicted


def gain(predicted: np.ndarray, u: int, obs: ObservationModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Filter gain ``G``, prediction covariance and innovation covariance ``S``.

    ``S = M Sigma M^T + sum_i p_i Q_i`` and ``G = Sigma M^T S^{-1}``, solved
    through a Cholesky factorization of ``S``.
    """
    M = obs.mean_matrix(u)
    Sigma = prediction_covariance(predicted)
    Q_mix = np.tensordot(predicted, obs.covs[u], axes=1)
    MS = M @ Sigma
    S = sym(MS @ M.T + Q_mix)
    L = regularized_cholesky(S)
    G = cho_solve((L, True), MS, check_finite=False).T
    return G, Sigma, S


def project_to_simplex(raw: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and renormalize; all-zero input maps to uniform."""
    p = np.clip(np.asarray(raw, dtype=float), 0.0, None)
    total = p.sum()
    if total > 0.0:
        return p / total
    return np.full(p.shape, 1.0 / p.shape[0])


def update(predicted: np.ndarray, y: np.ndarray, u: int, obs: ObservationModel) -> FilterStep:
    """Measurement update from a predicted belief."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    y_pred = predict_observation(predicted, u, obs)
    G, Sigma_pred, S = gain(predicted, u, obs)
    innovation = y - y_pred
    raw = predicted + G @ innovation
    filtered = project_to_simplex(raw)
    return FilterStep(
        control=u,
        y=y,
        predicted=predicted,
        predicted_obs=y_pred,
        gain=G,
        innovation=innovation,
        innovation_cov=S,
        raw_filtered=raw,
        filtered=filtered,
        Sigma_pred=Sigma_pred,
        Sigma_filt=prediction_covariance(filtered),
        mse_trace=mse_trace(filtered),
    )


def filter_step(
    prev: np.ndarray, y: np.ndarray, u: int, chain: MarkovModel, obs: ObservationModel
) -> FilterStep:
    return update(predict_belief(prev, chain), y, u, obs)


@dataclass(frozen=True)
class CovarianceCheck:
    """Max elementwise gaps between direct and recursive covariance forms."""

    filtering: float
    prediction: float


def covariance_identity_check(
    step: FilterStep, prev_filtered: np.ndarray | None, chain: MarkovModel
) -> CovarianceCheck:
    """Compare the recursive covariance forms with the direct ones on the raw update.

    ``prev_filtered`` is the belief the prediction was made from, or ``None``
    for the first step, whose prediction covariance is ``diag(pi) - pi pi^T``.
    """
    p, G, lam, raw = step.predicted, step.gain, step.innovation, step.raw_filtered
    mu = G @ lam
    direct_filt = prediction_covariance(raw)
    recursive_filt = step.Sigma_pred + np.diag(mu) - np.outer(mu, mu) - 2.0 * sym(np.outer(p, mu))

    if prev_filtered is None:
        recursive_pred = prediction_covariance(chain.pi)
    else:
        P = chain.P
        recursive_pred = (
            P @ prediction_covariance(prev_filtered) @ P.T
            + np.diag(step.predicted)
            - P @ np.diag(prev_filtered) @ P.T
        )
    return CovarianceCheck(
        filtering=float(np.max(np.abs(direct_filt - recursive_filt))),
        prediction=float(np.max(np.abs(step.Sigma_pred - recursive_pred))),
    )


def _bayes_posterior(predicted: np.ndarray, loglik: np.ndarray) -> np.ndarray | None:
    with np.errstate(divide="ignore"):
        a = np.log(predicted) + loglik
    top = a.max()
    if not np.isfinite(top):
        return None
    w = np.exp(a - top)
    return w / w.sum()


def bayes_update(predicted: np.ndarray, y: np.ndarray, u: int, obs: ObservationModel) -> np.ndarray:
    """Exact posterior ``r(y,u) p / 1^T r(y,u) p``; returns ``predicted`` if the normalizer vanishes."""
    post = _bayes_posterior(predicted, obs.loglik(y, u))
    return predicted.copy() if post is None else post


def bayes_filter_step(
    prev: np.ndarray, y: np.ndarray, u: int, chain: MarkovModel, obs: ObservationModel
) -> np.ndarray:
    return bayes_update(predict_belief(prev, chain), y, u, obs)


def predicted_belief_update(
    predicted: np.ndarray, y: np.ndarray, u: int, chain: MarkovModel, obs: ObservationModel
) -> np.ndarray:
    """Next predicted belief ``P r(y,u) p / 1^T r(y,u) p`` from the current one."""
    return chain.P @ bayes_update(predicted, y, u, obs)


def run_filter(
    ys: Sequence[np.ndarray], controls: Sequence[int], chain: MarkovModel, obs: ObservationModel
) -> list[FilterStep]:
    """Filter a recorded run; step 0 is predicted from ``pi`` directly."""
    steps: list[FilterStep] = []
    predicted = chain.pi.copy()
    for y, u in zip(ys, controls, strict=True):
        step = update(predicted, y, int(u), obs)
        steps.append(step)
        predicted = predict_belief(step.filtered, chain)
    return steps


def run_bayes(
    ys: Sequence[np.ndarray], controls: Sequence[int], chain: MarkovModel, obs: ObservationModel
) -> np.ndarray:
    out = np.empty((len(ys), chain.n))
    predicted = chain.pi.copy()
    for k, (y, u) in enumerate(zip(ys, controls, strict=True)):
        out[k] = bayes_update(predicted, y, int(u), obs)
        predicted = predict_belief(out[k], chain)
    return out
