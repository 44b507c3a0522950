"""Finite-horizon sensing control by backward induction over a simplex grid.

The dynamic-programming state at stage ``t`` (control ``u_t``) is the
predicted belief ``p_{t+1|t}``. The stage cost of a control is the expected
trace of the filtering error covariance after the Kalman-like update, which
has a closed form; the expected cost-to-go is estimated by stratified Monte
Carlo with common random numbers across controls.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .filtering import gain, predict_observation, predicted_belief_update
from .model import MarkovModel, ObservationModel
from .sim import ControlRule, aggregate_metrics, run_trials

__all__ = [
    "BeliefGrid",
    "CostSample",
    "Policy",
    "StaticPolicy",
    "GreedyPolicy",
    "ControlRule",
    "immediate_cost",
    "immediate_cost_terms",
    "immediate_costs",
    "expected_future_cost",
    "cost_sample",
    "backward_induction",
    "greedy_policy",
    "static_policy",
    "SequencePolicy",
    "PolicyEvaluation",
    "evaluate_policy",
    "write_value_csv",
    "write_partition_csv",
]


class BeliefGrid:
    """Regular lattice ``{a / d : a in N^n, sum(a) = d}`` on the probability simplex.

    Points are ordered by their integer compositions in descending
    lexicographic order, so point 0 is ``e_1``.
    """

    def __init__(self, n: int, d: int) -> None:
        if n < 1 or d < 1:
            raise ValueError("grid needs n >= 1 and d >= 1")
        self.n = n
        self.d = d
        comps = []
        # stars and bars: bar positions among d + n - 1 slots
        for bars in combinations(range(d + n - 1), n - 1):
            edges = (-1,) + bars + (d + n - 1,)
            comps.append(tuple(edges[i + 1] - edges[i] - 1 for i in range(n)))
        comps.sort(reverse=True)
        self.compositions = np.array(comps, dtype=np.int64).reshape(-1, n)
        self.points = self.compositions / d
        self._radix = (d + 1) ** np.arange(n, dtype=np.int64)
        keys = self.compositions @ self._radix
        self._order = np.argsort(keys)
        self._sorted_keys = keys[self._order]
        self.index = {c: i for i, c in enumerate(comps)}

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest(self, beliefs: np.ndarray) -> np.ndarray:
        """Ids of the Euclidean-nearest grid points; ties go to the lowest id.

        Rounds ``d * p`` down and hands the remaining units to the largest
        fractional parts, which is the exact nearest point of the lattice.
        """
        B = np.atleast_2d(np.asarray(beliefs, dtype=float))
        B = np.clip(B, 0.0, None)
        B = B / B.sum(axis=1, keepdims=True)
        x = B * self.d
        a = np.floor(x).astype(np.int64)
        frac = x - a
        short = self.d - a.sum(axis=1)
        # stable sort on -frac keeps lower coordinates first among equal fractions
        rank = np.argsort(np.argsort(-frac, axis=1, kind="stable"), axis=1, kind="stable")
        a += rank < short[:, None]
        keys = a @ self._radix
        ids = self._order[np.searchsorted(self._sorted_keys, keys)]
        return ids if np.ndim(beliefs) > 1 else ids[:1]

    def nearest_one(self, belief: np.ndarray) -> int:
        return int(self.nearest(np.asarray(belief)[None, :])[0])


def immediate_cost_terms(
    predicted: np.ndarray, u: int, obs: ObservationModel
) -> np.ndarray:
    """Per-state expected posterior MSE ``h(e_i, p, u)``.

    ``h_i = 1 - tr(G^T G Q_i) - ||p + G (m_i - y_pred)||^2``.
    """
    G, _, _ = gain(predicted, u, obs)
    y_pred = predict_observation(predicted, u, obs)
    GtG = G.T @ G
    shifted = predicted[None, :] + (obs.means[u] - y_pred) @ G.T
    return 1.0 - np.einsum("ij,nji->n", GtG, obs.covs[u]) - np.einsum("ni,ni->n", shifted, shifted)


def immediate_cost(predicted: np.ndarray, u: int, chain: MarkovModel | None, obs: ObservationModel) -> float:
    """Expected ``tr Sigma_{k|k}`` after observing under control ``u``: ``p^T h(p, u)``."""
    return float(predicted @ immediate_cost_terms(predicted, u, obs))


def immediate_costs(beliefs: np.ndarray, u: int, obs: ObservationModel) -> np.ndarray:
    """Vectorized stage cost over many beliefs via ``tr Sigma - tr(G S G^T)``.

    Algebraically equal to ``p^T h(p, u)``; used by the DP sweep.
    """
    B = np.atleast_2d(beliefs)
    M = obs.mean_matrix(u)
    Sigma = np.einsum("gi,ij->gij", B, np.eye(B.shape[1])) - np.einsum("gi,gj->gij", B, B)
    MS = np.einsum("di,gij->gdj", M, Sigma)
    S = np.einsum("gdj,ej->gde", MS, M) + np.einsum("gi,ide->gde", B, obs.covs[u])
    X = np.linalg.solve(S, MS)
    explained = np.einsum("gdi,gdi->g", MS, X)
    return (1.0 - np.einsum("gi,gi->g", B, B)) - explained


@dataclass(frozen=True)
class CostSample:
    control: int
    immediate: float
    future: float
    total: float
    mc_stderr: float


@dataclass(frozen=True)
class StaticPolicy:
    """Always the same control."""

    control: int

    def select(self, stage: int, predicted: np.ndarray) -> int:
        return self.control


@dataclass(frozen=True)
class SequencePolicy:
    """Open-loop rule: a fixed control per stage, the last one repeated past the end."""

    controls: tuple[int, ...]

    def select(self, stage: int, predicted: np.ndarray) -> int:
        return self.controls[min(stage, len(self.controls) - 1)]


@dataclass(frozen=True)
class GreedyPolicy:
    """Myopic rule: minimize the immediate expected MSE at the current belief."""

    obs: ObservationModel

    def select(self, stage: int, predicted: np.ndarray) -> int:
        costs = [immediate_cost(predicted, u, None, self.obs) for u in range(self.obs.n_controls)]
        return int(np.argmin(costs))


@dataclass
class Policy:
    """Tabulated finite-horizon policy; ``table[t, g]`` is the control for stage ``t`` at grid point ``g``.

    Stage ``t`` picks ``u_t`` from ``p_{t+1|t}``; the last row is the myopic
    terminal stage. Beyond the horizon the stage-0 row is reused
    (receding horizon).
    """

    grid: BeliefGrid
    table: np.ndarray
    values: np.ndarray
    M: int
    seed: int
    controls: list[str] = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.table.shape[0]

    def select(self, stage: int, predicted: np.ndarray) -> int:
        t = stage if stage < self.L else 0
        return int(self.table[t, self.grid.nearest_one(predicted)])

    def value(self, stage: int, predicted: np.ndarray) -> float:
        return float(self.values[stage, self.grid.nearest_one(predicted)])

    def to_dict(self) -> dict:
        return {
            "n": self.grid.n,
            "d": self.grid.d,
            "L": self.L,
            "M": self.M,
            "seed": self.seed,
            "controls": list(self.controls),
            "table": self.table.astype(int).tolist(),
            "values": self.values.tolist(),
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "Policy":
        grid = BeliefGrid(int(doc["n"]), int(doc["d"]))
        table = np.array(doc["table"], dtype=np.int64).reshape(int(doc["L"]), len(grid))
        values = np.array(doc["values"], dtype=float).reshape(table.shape)
        return cls(grid, table, values, int(doc["M"]), int(doc["seed"]), list(doc.get("controls", [])))

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _mc_base(rng: np.random.Generator, M: int, dmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified uniforms for the mixture component and standard normals for the noise."""
    strata = (np.arange(M) + rng.random(M)) / M
    return strata, rng.standard_normal((M, dmax))


def _next_predicted(
    beliefs: np.ndarray,
    u: int,
    strata: np.ndarray,
    Z: np.ndarray,
    chain: MarkovModel,
    obs: ObservationModel,
) -> np.ndarray:
    """Sample ``y`` from each belief's mixture and return the Bayes-updated predicted beliefs.

    Shapes: ``beliefs (G, n)`` -> ``(G, M, n)``.
    """
    n = beliefs.shape[1]
    d = obs.dim(u)
    cum = np.cumsum(beliefs, axis=1)
    cum[:, -1] = np.inf
    states = (strata[None, :, None] >= cum[:, None, :]).sum(axis=2)
    states = np.minimum(states, n - 1)
    chol = obs.chol(u)
    Y = obs.means[u][states] + np.einsum("gmij,mj->gmi", chol[states], Z[:, :d])
    ll = obs.loglik_batch(Y, u)
    with np.errstate(divide="ignore"):
        a = np.log(beliefs)[:, None, :] + ll
    a -= a.max(axis=2, keepdims=True)
    w = np.exp(a)
    post = w / w.sum(axis=2, keepdims=True)
    return post @ chain.P.T


def expected_future_cost(
    predicted: np.ndarray,
    u: int,
    next_values: np.ndarray,
    grid: BeliefGrid,
    chain: MarkovModel,
    obs: ObservationModel,
    M: int,
    seed: int | np.random.Generator,
) -> tuple[float, float]:
    """Monte Carlo estimate of ``E_y[J_{next}(p_{k+1|k})]`` and its standard error."""
    rng = np.random.default_rng(seed)
    strata, Z = _mc_base(rng, M, obs.max_dim)
    nxt = _next_predicted(np.asarray(predicted, dtype=float)[None, :], u, strata, Z, chain, obs)[0]
    vals = next_values[grid.nearest(nxt)]
    stderr = float(vals.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    return float(vals.mean()), stderr


def cost_sample(
    predicted: np.ndarray,
    u: int,
    next_values: np.ndarray | None,
    grid: BeliefGrid,
    chain: MarkovModel,
    obs: ObservationModel,
    M: int,
    seed: int | np.random.Generator,
) -> CostSample:
    imm = immediate_cost(predicted, u, chain, obs)
    if next_values is None:
        return CostSample(u, imm, 0.0, imm, 0.0)
    fut, se = expected_future_cost(predicted, u, next_values, grid, chain, obs, M, seed)
    return CostSample(u, imm, fut, imm + fut, se)


def backward_induction(
    chain: MarkovModel,
    obs: ObservationModel,
    grid: BeliefGrid,
    L: int,
    M: int = 256,
    seed: int = 0,
    controls: list[int] | None = None,
) -> Policy:
    """Solve the finite-horizon problem on ``grid``; ties go to the lowest control id.

    ``controls`` restricts the admissible set (default: all).
    """
    if L < 1:
        raise ValueError("horizon L must be >= 1")
    allowed = list(range(obs.n_controls)) if controls is None else sorted(controls)
    G = len(grid)
    pts = grid.points
    stage_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(L)]
    imm = np.stack([immediate_costs(pts, u, obs) for u in allowed])
    table = np.zeros((L, G), dtype=np.int64)
    values = np.zeros((L, G))
    for t in range(L - 1, -1, -1):
        total = imm.copy()
        if t < L - 1:
            strata, Z = _mc_base(stage_rngs[t], M, obs.max_dim)
            for j, u in enumerate(allowed):
                nxt = _next_predicted(pts, u, strata, Z, chain, obs)
                ids = grid.nearest(nxt.reshape(-1, grid.n)).reshape(G, M)
                total[j] += values[t + 1][ids].mean(axis=1)
        best = np.argmin(total, axis=0)
        table[t] = np.asarray(allowed)[best]
        values[t] = total[best, np.arange(G)]
    return Policy(grid, table, values, M, seed, [c.label for c in obs.controls])


def greedy_policy(chain: MarkovModel | None, obs: ObservationModel) -> GreedyPolicy:
    return GreedyPolicy(obs)


def static_policy(control: int, obs: ObservationModel | None = None) -> StaticPolicy:
    if control < 0 or (obs is not None and control >= obs.n_controls):
        raise ValueError(f"invalid control id {control}")
    return StaticPolicy(control)


@dataclass
class PolicyEvaluation:
    """Closed-loop performance of one control rule.

    ``per_trial_cost`` and ``per_trial_accuracy`` are kept so that runs
    sharing a seed can be compared pairwise.
    """

    mean_cost: float
    cost_stderr: float
    mse_curve: np.ndarray
    accuracy: float
    accuracy_stderr: float
    per_trial_cost: np.ndarray
    per_trial_accuracy: np.ndarray

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.mean_cost - z * self.cost_stderr, self.mean_cost + z * self.cost_stderr


def evaluate_policy(
    policy: ControlRule,
    chain: MarkovModel,
    obs: ObservationModel,
    trials: int,
    horizon: int,
    seed: int,
    threads: int = 1,
) -> PolicyEvaluation:
    """Mean cumulative ``tr Sigma_{k|k}`` of the filter and MAP accuracy over seeded rollouts.

    Trials draw the same state paths and noise for any policy given the
    same seed, so differences between policies are paired.
    """
    records = run_trials(chain, obs, policy, trials, horizon, seed, threads=threads)
    em = aggregate_metrics(records)["filter"]
    cost, cost_se = em.cumulative_cost()
    acc, acc_se = em.accuracy()
    return PolicyEvaluation(
        cost, cost_se, em.mse_curve, acc, acc_se, np.nansum(em.mse, axis=1), em.per_trial_accuracy()
    )


def write_value_csv(path: str | Path, policy: Policy) -> None:
    """One row per (stage, grid point): coordinates, chosen control and cost-to-go."""
    n = policy.grid.n
    with open(path, "w") as fh:
        fh.write(",".join(["stage", "point"] + [f"p_{i}" for i in range(n)] + ["control", "value"]) + "\n")
        for t in range(policy.L):
            for g, pt in enumerate(policy.grid.points):
                coords = ",".join(repr(float(v)) for v in pt)
                fh.write(f"{t},{g},{coords},{int(policy.table[t, g])},{float(policy.values[t, g])!r}\n")


def write_partition_csv(path: str | Path, grid: BeliefGrid, rule: ControlRule, stage: int = 0) -> None:
    """Control chosen by ``rule`` at each grid point, for plotting simplex partitions."""
    with open(path, "w") as fh:
        fh.write(",".join(["point"] + [f"p_{i}" for i in range(grid.n)] + ["control"]) + "\n")
        for g, pt in enumerate(grid.points):
            coords = ",".join(repr(float(v)) for v in pt)
            fh.write(f"{g},{coords},{int(rule.select(stage, pt))}\n")
