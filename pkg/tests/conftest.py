from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from activetrack.model import Control, MarkovModel, ObservationModel, load_model

ROOT = Path(__file__).resolve().parents[1]
SYNTHETIC_CONFIG = ROOT / "configs" / "body_sensing_synthetic.json"

ACTIVITY_P = np.array(
    [
        [0.6, 0.2, 0.0, 0.4],
        [0.1, 0.4, 0.1, 0.0],
        [0.0, 0.1, 0.3, 0.3],
        [0.3, 0.3, 0.6, 0.3],
    ]
)


def random_chain(rng: np.random.Generator, n: int) -> MarkovModel:
    P = rng.dirichlet(np.ones(n), size=n).T
    return MarkovModel(P, rng.dirichlet(np.ones(n)))


def random_spd(rng: np.random.Generator, d: int, floor: float = 0.2) -> np.ndarray:
    A = rng.normal(size=(d, d))
    return A @ A.T / d + floor * np.eye(d)


def random_obs(rng: np.random.Generator, n: int, dims: list[int], spread: float = 2.0) -> ObservationModel:
    controls, means, covs = [], [], []
    for u, d in enumerate(dims):
        controls.append(Control(u, f"c{u}", d))
        means.append(rng.normal(scale=spread, size=(n, d)))
        covs.append(np.stack([random_spd(rng, d) for _ in range(n)]))
    return ObservationModel(tuple(controls), tuple(means), tuple(covs))


def uninformative_obs(n: int, d: int, mean: float = 0.7, var: float = 1.3) -> ObservationModel:
    m = np.full((n, d), mean)
    Q = np.stack([var * np.eye(d)] * n)
    return ObservationModel((Control(0, "flat", d),), (m,), (Q,))


def two_state_scalar(means=(0.0, 2.0), var=(1.0, 1.0)) -> ObservationModel:
    m = np.array(means, dtype=float)[:, None]
    Q = np.array(var, dtype=float)[:, None, None]
    return ObservationModel((Control(0, "scalar", 1),), (m,), (Q,))


def informative_and_noise(separation: float = 1.5) -> ObservationModel:
    """Two scalar controls on two states: one separates the states, one is pure noise."""
    return ObservationModel(
        (Control(0, "informative", 1), Control(1, "noise", 1)),
        (np.array([[0.0], [separation]]), np.zeros((2, 1))),
        (np.ones((2, 1, 1)), np.ones((2, 1, 1))),
    )


def simulate_observations(rng, chain, obs, controls):
    """Draw a state path and observations for a fixed control sequence."""
    n = chain.n
    x = rng.choice(n, p=chain.pi)
    ys = []
    for k, u in enumerate(controls):
        if k > 0:
            x = rng.choice(n, p=chain.P[:, x])
        ys.append(rng.multivariate_normal(obs.means[u][x], obs.covs[u][x]))
    return ys


@pytest.fixture(scope="session")
def synthetic_model():
    return load_model(SYNTHETIC_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
