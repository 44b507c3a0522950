"""Markov chain, controlled Gaussian observation models and density evaluation.

Conventions
-----------
* The transition matrix is column-stochastic: ``P[j, i] = P(x_{k+1}=j | x_k=i)``,
  so a belief is propagated with ``P @ p``.
* Each control ``u`` fixes an observation dimension ``d_u``; under state ``i``
  the observation is ``N(means[u][i], covs[u][i])``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular, toeplitz

from ._linalg import LOG_2PI, IllPosedModelError, regularized_cholesky

__all__ = [
    "MarkovModel",
    "Control",
    "SensorSpec",
    "ObservationModel",
    "TrackingModel",
    "IllPosedModelError",
    "validate_model",
    "build_ar1_observation_model",
    "enumerate_controls",
    "sensor_observation_model",
    "gaussian_logpdf",
    "likelihood_matrix",
    "load_model",
]

STOCHASTIC_TOL = 1e-12
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class MarkovModel:
    """Finite-state Markov chain with column-stochastic transitions ``P`` and initial law ``pi``."""

    P: np.ndarray
    pi: np.ndarray

    def __post_init__(self) -> None:
        P = np.array(self.P, dtype=float)
        pi = np.array(self.pi, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"P must be square, got shape {P.shape}")
        if pi.shape != (P.shape[0],):
            raise ValueError(f"pi must have length {P.shape[0]}, got shape {pi.shape}")
        P.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "pi", pi)

    @property
    def n(self) -> int:
        return self.P.shape[0]


@dataclass(frozen=True)
class Control:
    id: int
    label: str
    dim: int
    counts: tuple[int, ...] | None = None


@dataclass(frozen=True)
class SensorSpec:
    """One feature stream whose samples follow an AR(1)-correlated Gaussian model.

    ``mu[i]`` and ``sigma2[i]`` are the per-state feature mean and variance,
    ``phi`` the AR(1) coefficient and ``noise_var`` the additive white noise.
    """

    name: str
    mu: tuple[float, ...]
    sigma2: tuple[float, ...]
    phi: float
    noise_var: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        object.__setattr__(self, "sigma2", tuple(float(v) for v in self.sigma2))
        if not abs(self.phi) < 1.0:
            raise ValueError(f"sensor {self.name!r}: AR(1) coefficient must satisfy |phi| < 1, got {self.phi}")
        if len(self.mu) != len(self.sigma2):
            raise ValueError(f"sensor {self.name!r}: mu and sigma2 lengths differ")
        if any(v < 0 for v in self.sigma2):
            raise ValueError(f"sensor {self.name!r}: sigma2 entries must be >= 0")
        if self.noise_var < 0:
            raise ValueError(f"sensor {self.name!r}: noise_var must be >= 0")


@dataclass(frozen=True)
class ObservationModel:
    """Per-control, per-state Gaussian observation statistics.

    ``means[u]`` has shape ``(n, d_u)`` and ``covs[u]`` shape ``(n, d_u, d_u)``.
    Cholesky factors are computed lazily, so an ill-posed model can still be
    constructed and reported on by :func:`validate_model`.
    """

    controls: tuple[Control, ...]
    means: tuple[np.ndarray, ...]
    covs: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        means, covs = [], []
        for c, m, Q in zip(self.controls, self.means, self.covs, strict=True):
            m = np.array(m, dtype=float)
            Q = np.array(Q, dtype=float)
            if m.ndim == 1:
                m = m[:, None]
            if Q.ndim == 1:
                Q = Q[:, None, None]
            m.setflags(write=False)
            Q.setflags(write=False)
            means.append(m)
            covs.append(Q)
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "means", tuple(means))
        object.__setattr__(self, "covs", tuple(covs))
        if [c.id for c in self.controls] != list(range(len(self.controls))):
            raise ValueError("control ids must be dense 0..alpha-1 in order")

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    @property
    def n(self) -> int:
        return self.means[0].shape[0]

    @property
    def max_dim(self) -> int:
        return max(c.dim for c in self.controls)

    def dim(self, u: int) -> int:
        return self.means[u].shape[1]

    def mean_matrix(self, u: int) -> np.ndarray:
        """``M(u)``: the ``d_u x n`` matrix whose columns are the state means."""
        return self.means[u].T

    @cached_property
    def _factors(self) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]:
        out = []
        for Q in self.covs:
            chol = np.stack([regularized_cholesky(Qi) for Qi in Q])
            eye = np.eye(Q.shape[1])
            inv_chol = np.stack([solve_triangular(L, eye, lower=True) for L in chol])
            logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
            out.append((chol, inv_chol, logdet))
        return tuple(out)

    def chol(self, u: int) -> np.ndarray:
        return self._factors[u][0]

    def loglik(self, y: np.ndarray, u: int) -> np.ndarray:
        """Log-density of ``y`` under every state for control ``u``; shape ``(n,)``."""
        _, inv_chol, logdet = self._factors[u]
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != self.dim(u):
            raise ValueError(f"observation has dim {y.shape[0]}, control {u} expects {self.dim(u)}")
        z = np.einsum("nij,nj->ni", inv_chol, y[None, :] - self.means[u])
        return -0.5 * (np.einsum("ni,ni->n", z, z) + logdet + y.shape[0] * LOG_2PI)

    def loglik_batch(self, Y: np.ndarray, u: int) -> np.ndarray:
        """Log-densities for a batch of observations ``Y[..., d_u]``; returns ``Y.shape[:-1] + (n,)``."""
        _, inv_chol, logdet = self._factors[u]
        diff = Y[..., None, :] - self.means[u]
        z = np.einsum("nij,...nj->...ni", inv_chol, diff)
        return -0.5 * (np.einsum("...ni,...ni->...n", z, z) + logdet + Y.shape[-1] * LOG_2PI)

    def sample(self, state: int, u: int, z: np.ndarray) -> np.ndarray:
        """Map a standard-normal draw ``z`` (length >= d_u) to an observation."""
        d = self.dim(u)
        return self.means[u][state] + self.chol(u)[state] @ np.asarray(z)[:d]


@dataclass(frozen=True)
class TrackingModel:
    """A Markov chain paired with its controlled observation model."""

    chain: MarkovModel
    obs: ObservationModel
    states: tuple[str, ...] = ()
    sensors: tuple[SensorSpec, ...] = field(default=())
    budget: int | None = None

    @property
    def n(self) -> int:
        return self.chain.n

    @classmethod
    def from_dict(cls, doc: dict) -> "TrackingModel":
        chain = MarkovModel(np.array(doc["P"], dtype=float), np.array(doc["pi"], dtype=float))
        states = tuple(doc.get("states") or (f"s{i}" for i in range(chain.n)))
        if "controls" in doc:
            controls, means, covs = [], [], []
            for i, c in enumerate(doc["controls"]):
                m = np.array(c["mean"], dtype=float)
                if m.ndim == 1:
                    m = m[:, None]
                controls.append(Control(i, str(c.get("label", f"u{i}")), m.shape[1]))
                means.append(m)
                covs.append(np.array(c["cov"], dtype=float).reshape(m.shape[0], m.shape[1], m.shape[1]))
            obs = ObservationModel(tuple(controls), tuple(means), tuple(covs))
            return cls(chain, obs, states)
        sensors = tuple(
            SensorSpec(s["name"], s["mu"], s["sigma2"], float(s["phi"]), float(s["noise_var"]))
            for s in doc["sensors"]
        )
        budget = int(doc["budget"])
        return cls(chain, sensor_observation_model(sensors, budget), states, sensors, budget)

    def to_dict(self) -> dict:
        doc: dict = {"states": list(self.states), "P": self.chain.P.tolist(), "pi": self.chain.pi.tolist()}
        if self.sensors:
            doc["sensors"] = [
                {"name": s.name, "mu": list(s.mu), "sigma2": list(s.sigma2), "phi": s.phi, "noise_var": s.noise_var}
                for s in self.sensors
            ]
            doc["budget"] = self.budget
        else:
            doc["controls"] = [
                {"label": c.label, "mean": m.tolist(), "cov": Q.tolist()}
                for c, m, Q in zip(self.obs.controls, self.obs.means, self.obs.covs)
            ]
        return doc


def load_model(path: str | Path) -> TrackingModel:
    with open(path) as fh:
        return TrackingModel.from_dict(json.load(fh))


def validate_model(chain: MarkovModel, obs: ObservationModel | None = None) -> list[str]:
    """Return a list of human-readable violations; empty iff the model is valid."""
    problems: list[str] = []
    P, pi = chain.P, chain.pi
    n = chain.n
    if np.any(P < 0) or np.any(P > 1):
        problems.append("P has entries outside [0, 1]")
    for j, s in enumerate(P.sum(axis=0)):
        if abs(s - 1.0) > STOCHASTIC_TOL:
            problems.append(f"column {j} sum {s:.12g}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        problems.append(f"pi is not a probability vector (sum {pi.sum():.12g})")
    if obs is None:
        return problems

    for c, m, Q in zip(obs.controls, obs.means, obs.covs):
        tag = f"control {c.id} ({c.label})"
        if m.shape[0] != n or Q.shape[0] != n:
            problems.append(f"{tag}: expected {n} states, got means {m.shape} covs {Q.shape}")
            continue
        if m.shape[1] != c.dim or Q.shape[1:] != (c.dim, c.dim):
            problems.append(f"{tag}: dimension mismatch (dim {c.dim}, means {m.shape}, covs {Q.shape})")
            continue
        for i in range(n):
            if np.max(np.abs(Q[i] - Q[i].T)) > STOCHASTIC_TOL:
                problems.append(f"{tag}, state {i}: covariance not symmetric")
                continue
            lam = np.linalg.eigvalsh(Q[i]).min()
            if lam < -1e-12 * max(1.0, np.abs(Q[i]).max()):
                problems.append(f"{tag}, state {i}: covariance not PSD (min eigenvalue {lam:.3g})")
                continue
            try:
                regularized_cholesky(Q[i])
            except IllPosedModelError:
                problems.append(f"{tag}, state {i}: covariance singular")
    return problems


def _ar1_block(sensor: SensorSpec, state: int, count: int) -> np.ndarray:
    T = toeplitz(sensor.phi ** np.arange(count))
    return sensor.sigma2[state] / (1.0 - sensor.phi**2) * T + sensor.noise_var * np.eye(count)


def build_ar1_observation_model(
    sensors: Sequence[SensorSpec], counts: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Means ``(n, d)`` and block-diagonal AR(1) covariances ``(n, d, d)`` for one control.

    ``counts[l]`` is the number of samples requested from ``sensors[l]``.
    """
    if len(counts) != len(sensors):
        raise ValueError("one sample count per sensor is required")
    if any(c < 0 for c in counts) or sum(counts) < 1:
        raise ValueError(f"sample counts must be >= 0 with at least one positive, got {tuple(counts)}")
    n = len(sensors[0].mu)
    d = int(sum(counts))
    means = np.zeros((n, d))
    covs = np.zeros((n, d, d))
    for i in range(n):
        pos = 0
        for s, c in zip(sensors, counts):
            if c == 0:
                continue
            means[i, pos : pos + c] = s.mu[i]
            covs[i, pos : pos + c, pos : pos + c] = _ar1_block(s, i, c)
            pos += c
    return means, covs


def enumerate_controls(sensors: Sequence[SensorSpec] | int, budget: int) -> list[Control]:
    """All per-sensor sample-count tuples with total in ``1..budget``.

    Ordered by total, then lexicographically descending, so that the
    single-sample controls come first in sensor order.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    names = [f"S{l}" for l in range(sensors)] if isinstance(sensors, int) else [s.name for s in sensors]
    tuples = [t for t in itertools.product(range(budget + 1), repeat=len(names)) if 1 <= sum(t) <= budget]
    tuples.sort(key=lambda t: (sum(t), tuple(-v for v in t)))
    controls = []
    for i, t in enumerate(tuples):
        label = " + ".join(f"{name} x{c}" for name, c in zip(names, t) if c)
        controls.append(Control(i, label, sum(t), t))
    return controls


def sensor_observation_model(sensors: Sequence[SensorSpec], budget: int) -> ObservationModel:
    controls = enumerate_controls(sensors, budget)
    means, covs = zip(*(build_ar1_observation_model(sensors, c.counts) for c in controls))
    return ObservationModel(tuple(controls), means, covs)


def gaussian_logpdf(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L = regularized_cholesky(cov)
    z = solve_triangular(L, y - mean, lower=True)
    return float(-0.5 * (z @ z) - np.log(np.diag(L)).sum() - 0.5 * y.shape[0] * LOG_2PI)


def likelihood_matrix(y: np.ndarray, u: int, obs: ObservationModel) -> np.ndarray:
    """``diag(f(y | e_1, u), ..., f(y | e_n, u))`` as an ``n x n`` matrix."""
    return np.diag(np.exp(obs.loglik(y, u)))


def scaled_likelihoods(y: np.ndarray, u: int, obs: ObservationModel) -> tuple[np.ndarray, float]:
    """Likelihoods divided by their maximum, plus the log of that maximum.

    ``f(y | e_i, u) == w[i] * exp(shift)``; ratios survive even when every raw
    density underflows.
    """
    ll = obs.loglik(y, u)
    shift = float(ll.max())
    return np.exp(ll - shift), shift
