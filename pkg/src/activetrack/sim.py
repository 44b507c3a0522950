"""Seeded closed-loop simulation, MAP detection and metric aggregation.

Each trial owns an independent PCG64 substream spawned from
``SeedSequence(seed)``. Within a trial every step draws, in this order, one
uniform for the state transition (the initial state at step 0) and one
standard-normal vector of length ``max_dim``. The draw pattern does not
depend on the chosen control, so two policies run with the same seed see
the same state path and the same noise (common random numbers).
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .filtering import FilterStep, bayes_update, predict_belief, project_to_simplex, update
from .model import MarkovModel, ObservationModel
from .smoother import fixed_point_path

__all__ = [
    "ControlRule",
    "TrajectoryRecord",
    "EstimatorMetrics",
    "Metrics",
    "RecordedRun",
    "paired_difference",
    "realized_squared_error",
    "map_detect",
    "sample_trajectory",
    "run_trials",
    "aggregate_metrics",
    "smoothed_lag_beliefs",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_metrics_csv",
    "write_summary_csv",
]


class ControlRule(Protocol):
    def select(self, stage: int, predicted: np.ndarray) -> int: ...


def map_detect(belief: np.ndarray) -> int:
    """Index of the largest component; the lowest index wins ties."""
    return int(np.argmax(belief))


def _sample_index(cdf_row: np.ndarray, v: float) -> int:
    return min(int(np.searchsorted(cdf_row, v, side="right")), cdf_row.shape[0] - 1)


@dataclass
class TrajectoryRecord:
    true_state: np.ndarray
    control: np.ndarray
    observations: list[np.ndarray]
    predicted: np.ndarray
    raw_filtered: np.ndarray
    filtered: np.ndarray
    mse_trace: np.ndarray
    map_estimate: np.ndarray
    oracle: np.ndarray
    smoothed: dict[int, np.ndarray] = field(default_factory=dict)
    steps: list[FilterStep] = field(default_factory=list, repr=False)

    @property
    def horizon(self) -> int:
        return self.true_state.shape[0]

    def estimates(self) -> dict[str, np.ndarray]:
        """Belief sequences by estimator name; smoothed rows are NaN where the lag runs past the end."""
        out = {"filter": self.filtered, "oracle": self.oracle}
        for lag, arr in sorted(self.smoothed.items()):
            out[f"lag{lag}"] = arr
        return out


def smoothed_lag_beliefs(
    steps: Sequence[FilterStep], lags: Iterable[int], chain: MarkovModel, obs: ObservationModel
) -> dict[int, np.ndarray]:
    """Projected fixed-point estimates ``p_{k|k+lag}`` for each requested lag.

    One forward pass per anchor serves every lag. Rows without enough
    future data are NaN.
    """
    lags = sorted(set(int(x) for x in lags))
    T, n = len(steps), chain.n
    out = {lag: np.full((T, n), np.nan) for lag in lags}
    if not lags:
        return out
    top = lags[-1]
    for k in range(T):
        R = min(k + top, T - 1)
        if R == k:
            continue
        path = fixed_point_path(steps, k, R, chain, obs)
        for lag in lags:
            if k + lag <= R:
                out[lag][k] = project_to_simplex(path[lag])
    return out


def sample_trajectory(
    chain: MarkovModel,
    obs: ObservationModel,
    policy: ControlRule,
    horizon: int,
    seed: int | np.random.SeedSequence | np.random.Generator,
    lags: Iterable[int] = (),
    control_from: str = "filter",
) -> TrajectoryRecord:
    """Simulate one closed-loop run of ``horizon`` steps.

    ``control_from`` picks which predicted belief drives the policy:
    the Kalman-like filter (``"filter"``) or the exact Bayes recursion
    (``"oracle"``).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if control_from not in ("filter", "oracle"):
        raise ValueError(f"unknown control source {control_from!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, dmax = chain.n, obs.max_dim
    cdf_pi = np.cumsum(chain.pi)
    cdf_P = np.cumsum(chain.P, axis=0).T

    states = np.empty(horizon, dtype=np.int64)
    controls = np.empty(horizon, dtype=np.int64)
    ys: list[np.ndarray] = []
    steps: list[FilterStep] = []
    oracle = np.empty((horizon, n))

    pred_f = chain.pi.copy()
    pred_o = chain.pi.copy()
    x = -1
    for k in range(horizon):
        v = rng.random()
        z = rng.standard_normal(dmax)
        x = _sample_index(cdf_pi, v) if k == 0 else _sample_index(cdf_P[x], v)
        u = int(policy.select(k, pred_f if control_from == "filter" else pred_o))
        y = obs.sample(x, u, z)
        step = update(pred_f, y, u, obs)
        oracle[k] = bayes_update(pred_o, y, u, obs)
        states[k], controls[k] = x, u
        ys.append(y)
        steps.append(step)
        pred_f = predict_belief(step.filtered, chain)
        pred_o = predict_belief(oracle[k], chain)

    filtered = np.array([s.filtered for s in steps])
    return TrajectoryRecord(
        true_state=states,
        control=controls,
        observations=ys,
        predicted=np.array([s.predicted for s in steps]),
        raw_filtered=np.array([s.raw_filtered for s in steps]),
        filtered=filtered,
        mse_trace=np.array([s.mse_trace for s in steps]),
        map_estimate=np.array([map_detect(p) for p in filtered]),
        oracle=oracle,
        smoothed=smoothed_lag_beliefs(steps, lags, chain, obs),
        steps=steps,
    )


def run_trials(
    chain: MarkovModel,
    obs: ObservationModel,
    policy: ControlRule,
    trials: int,
    horizon: int,
    seed: int,
    lags: Iterable[int] = (),
    threads: int = 1,
    control_from: str = "filter",
) -> list[TrajectoryRecord]:
    """Independent trials on spawned substreams; output order is trial order for any thread count."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lags = tuple(lags)
    seeds = np.random.SeedSequence(seed).spawn(trials)

    def one(ss: np.random.SeedSequence) -> TrajectoryRecord:
        return sample_trajectory(chain, obs, policy, horizon, ss, lags, control_from)

    if threads <= 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, seeds))


def _nanmean(x: np.ndarray, axis: int) -> np.ndarray:
    # all-NaN columns (steps a lag never reaches) stay NaN without a warning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(x, axis=axis)


def _se(x: np.ndarray, axis: int = 0) -> np.ndarray:
    cnt = np.sum(~np.isnan(x), axis=axis)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sd = np.nan_to_num(np.nanstd(x, axis=axis, ddof=1))
    return sd / np.sqrt(np.maximum(cnt, 1))


@dataclass
class EstimatorMetrics:
    """Per-trial, per-step scores for one estimator; NaN marks steps it does not cover."""

    name: str
    mse: np.ndarray
    correct: np.ndarray

    @property
    def mse_curve(self) -> np.ndarray:
        return _nanmean(self.mse, axis=0)

    @property
    def mse_curve_se(self) -> np.ndarray:
        return _se(self.mse)

    @property
    def accuracy_curve(self) -> np.ndarray:
        return _nanmean(self.correct, axis=0)

    def per_trial_accuracy(self, steps: slice = slice(None)) -> np.ndarray:
        return _nanmean(self.correct[:, steps], axis=1)

    def accuracy(self, steps: slice = slice(None)) -> tuple[float, float]:
        """Overall detection rate and its standard error across trials."""
        a = self.per_trial_accuracy(steps)
        se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
        return float(a.mean()), se

    def per_trial_mse(self, steps: slice = slice(None)) -> np.ndarray:
        return _nanmean(self.mse[:, steps], axis=1)

    def cumulative_cost(self) -> tuple[float, float]:
        """Mean over trials of ``sum_k tr Sigma_k`` and its standard error."""
        c = np.nansum(self.mse, axis=1)
        se = float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0
        return float(c.mean()), se


@dataclass
class Metrics:
    horizon: int
    trials: int
    estimators: dict[str, EstimatorMetrics]

    def __getitem__(self, name: str) -> EstimatorMetrics:
        return self.estimators[name]


def paired_difference(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean and standard error of ``a - b`` over paired trials."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


def aggregate_metrics(records: Sequence[TrajectoryRecord]) -> Metrics:
    """Stack per-trial scores for every estimator present in all records, in record order."""
    if not records:
        raise ValueError("no records to aggregate")
    H = records[0].horizon
    if any(r.horizon != H for r in records):
        raise ValueError("records have different horizons")
    names = list(records[0].estimates())
    out: dict[str, EstimatorMetrics] = {}
    for name in names:
        mse = np.full((len(records), H), np.nan)
        correct = np.full((len(records), H), np.nan)
        for i, r in enumerate(records):
            B = r.estimates()[name]
            ok = ~np.isnan(B).any(axis=1)
            mse[i, ok] = B[ok].sum(axis=1) - np.einsum("ki,ki->k", B[ok], B[ok])
            correct[i, ok] = np.argmax(B[ok], axis=1) == r.true_state[ok]
        out[name] = EstimatorMetrics(name, mse, correct)
    return Metrics(H, len(records), out)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(path: str | Path, records: Sequence[TrajectoryRecord], dmax: int) -> None:
    if not records:
        raise ValueError("no records to write")
    n = records[0].predicted.shape[1]
    header = (
        ["trial", "k", "true_state", "control"]
        + [f"y_{j}" for j in range(dmax)]
        + [f"pred_{i}" for i in range(n)]
        + [f"filt_{i}" for i in range(n)]
        + ["mse_trace", "map"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, r in enumerate(records):
            for k in range(r.horizon):
                y = [_fmt(v) for v in r.observations[k]]
                w.writerow(
                    [t, k, int(r.true_state[k]), int(r.control[k])]
                    + y
                    + [""] * (dmax - len(y))
                    + [_fmt(v) for v in r.predicted[k]]
                    + [_fmt(v) for v in r.filtered[k]]
                    + [_fmt(r.mse_trace[k]), int(r.map_estimate[k])]
                )


@dataclass
class RecordedRun:
    """Observations and controls of one trial read back from a trajectory CSV."""

    trial: int
    true_state: np.ndarray
    control: np.ndarray
    observations: list[np.ndarray]
    filtered: np.ndarray


def read_trajectory_csv(path: str | Path) -> list[RecordedRun]:
    """Parse a trajectory CSV; raises ``ValueError`` on malformed content."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        need = {"trial", "k", "true_state", "control"}
        if not need.issubset(fields):
            raise ValueError(f"trajectory CSV lacks columns {sorted(need - set(fields))}")
        ycols = sorted((c for c in fields if c.startswith("y_")), key=lambda c: int(c[2:]))
        fcols = sorted((c for c in fields if c.startswith("filt_")), key=lambda c: int(c[5:]))
        runs: dict[int, list[tuple[int, int, int, np.ndarray, np.ndarray]]] = {}
        for row in reader:
            try:
                y = np.array([float(row[c]) for c in ycols if row[c] not in ("", None)])
                f = np.array([float(row[c]) for c in fcols])
                entry = (int(row["k"]), int(row["true_state"]), int(row["control"]), y, f)
                runs.setdefault(int(row["trial"]), []).append(entry)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed trajectory row {reader.line_num}: {exc}") from exc
    out = []
    for trial in sorted(runs):
        rows = sorted(runs[trial], key=lambda e: e[0])
        if [e[0] for e in rows] != list(range(len(rows))):
            raise ValueError(f"trial {trial}: step indices are not 0..T-1")
        out.append(
            RecordedRun(
                trial,
                np.array([e[1] for e in rows]),
                np.array([e[2] for e in rows]),
                [e[3] for e in rows],
                np.array([e[4] for e in rows]),
            )
        )
    return out


def write_metrics_csv(path: str | Path, metrics: Metrics) -> None:
    """Per-estimator, per-step mean ``tr Sigma`` and detection rate with standard errors."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "k", "mean_mse_trace", "se_mse_trace", "accuracy", "se_accuracy", "count"])
        for name, em in metrics.estimators.items():
            mse, mse_se = em.mse_curve, em.mse_curve_se
            acc, acc_se = em.accuracy_curve, _se(em.correct)
            cnt = np.sum(~np.isnan(em.correct), axis=0)
            for k in range(metrics.horizon):
                if cnt[k] == 0:
                    continue
                w.writerow([name, k, _fmt(mse[k]), _fmt(mse_se[k]), _fmt(acc[k]), _fmt(acc_se[k]), int(cnt[k])])


def write_summary_csv(path: str | Path, metrics: Metrics) -> None:
    """One row per estimator: overall accuracy and mean cumulative ``tr Sigma``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "accuracy", "se_accuracy", "mean_mse_trace", "cumulative_mse_trace", "se_cumulative"])
        for name, em in metrics.estimators.items():
            acc, se = em.accuracy()
            cum, cse = em.cumulative_cost()
            w.writerow([name, _fmt(acc), _fmt(se), _fmt(np.nanmean(em.mse)), _fmt(cum), _fmt(cse)])


def realized_squared_error(beliefs: np.ndarray, states: np.ndarray) -> np.ndarray:
    """``||e_x - p||^2`` per step; its mean estimates the true MSE of an estimator."""
    e = np.eye(beliefs.shape[1])[states]
    return np.sum((e - beliefs) ** 2, axis=1)

