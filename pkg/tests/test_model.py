import json
from math import comb, log, pi

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activetrack.model import (
    Control,
    IllPosedModelError,
    MarkovModel,
    ObservationModel,
    SensorSpec,
    TrackingModel,
    build_ar1_observation_model,
    enumerate_controls,
    gaussian_logpdf,
    likelihood_matrix,
    load_model,
    sensor_observation_model,
    validate_model,
)

from .conftest import ACTIVITY_P, SYNTHETIC_CONFIG, random_obs, two_state_scalar
from .oracles import density


def test_activity_chain_is_valid():
    chain = MarkovModel(ACTIVITY_P, np.full(4, 0.25))
    assert validate_model(chain) == []
    assert np.max(np.abs(ACTIVITY_P.sum(axis=0) - 1.0)) <= 1e-12


def test_identity_chain_is_valid():
    assert validate_model(MarkovModel(np.eye(3), np.full(3, 1 / 3))) == []


def test_bad_column_is_reported():
    P = np.array([[0.5, 0.2, 0.3], [0.5, 0.3, 0.3], [0.0, 0.5, 0.3]])
    problems = validate_model(MarkovModel(P, np.full(3, 1 / 3)))
    assert problems == ["column 2 sum 0.9"]


def test_negative_entry_and_bad_pi_reported():
    P = np.array([[1.1, 0.0], [-0.1, 1.0]])
    problems = validate_model(MarkovModel(P, np.array([0.7, 0.7])))
    assert any("outside [0, 1]" in p for p in problems)
    assert any("pi" in p for p in problems)


def test_observation_problems_reported():
    bad_cov = np.array([[[1.0, 0.0], [0.0, -1.0]], [[1.0, 0.0], [0.0, 1.0]]])
    asym = np.array([[[1.0, 0.5], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]])
    obs = ObservationModel(
        (Control(0, "neg", 2), Control(1, "asym", 2)),
        (np.zeros((2, 2)), np.zeros((2, 2))),
        (bad_cov, asym),
    )
    problems = validate_model(MarkovModel(np.eye(2), np.array([0.5, 0.5])), obs)
    assert any("not PSD" in p for p in problems)
    assert any("not symmetric" in p for p in problems)


def test_state_count_mismatch_reported():
    obs = two_state_scalar()
    problems = validate_model(MarkovModel(np.eye(3), np.full(3, 1 / 3)), obs)
    assert any("expected 3 states" in p for p in problems)


def test_ar1_single_sample():
    s = SensorSpec("a", (0.0, 1.0), (1.5, 3.0), 0.25, 2.0)
    _, covs = build_ar1_observation_model([s], [1])
    assert covs[0, 0, 0] == pytest.approx(1.5 / (1 - 0.0625) + 2.0, abs=1e-14)
    assert covs[1, 0, 0] == pytest.approx(3.0 / (1 - 0.0625) + 2.0, abs=1e-14)


def test_ar1_two_samples_hand_values():
    s = SensorSpec("a", (0.0,), (1.0,), 0.25, 2.0)
    means, covs = build_ar1_observation_model([s], [2])
    expected = np.array([[1 / 0.9375 + 2, 0.25 / 0.9375], [0.25 / 0.9375, 1 / 0.9375 + 2]])
    np.testing.assert_allclose(covs[0], expected, atol=1e-14)
    np.testing.assert_array_equal(means[0], [0.0, 0.0])


def test_ar1_two_sensors_block_diagonal():
    a = SensorSpec("a", (1.0, 2.0), (1.0, 1.0), 0.25, 2.0)
    b = SensorSpec("b", (5.0, 6.0), (2.0, 2.0), 0.25, 2.0)
    means, covs = build_ar1_observation_model([a, b], [1, 1])
    np.testing.assert_array_equal(means, [[1.0, 5.0], [2.0, 6.0]])
    assert np.all(covs[:, 0, 1] == 0.0) and np.all(covs[:, 1, 0] == 0.0)


def test_ar1_skips_unused_sensor():
    a = SensorSpec("a", (1.0,), (1.0,), 0.25, 2.0)
    b = SensorSpec("b", (5.0,), (2.0,), 0.25, 2.0)
    means, covs = build_ar1_observation_model([a, b], [0, 2])
    np.testing.assert_array_equal(means, [[5.0, 5.0]])
    assert covs.shape == (1, 2, 2)


def test_ar1_rejects_unit_root_and_empty_control():
    with pytest.raises(ValueError):
        SensorSpec("a", (0.0,), (1.0,), 1.0, 2.0)
    with pytest.raises(ValueError):
        SensorSpec("a", (0.0,), (1.0,), -1.2, 2.0)
    s = SensorSpec("a", (0.0,), (1.0,), 0.5, 2.0)
    with pytest.raises(ValueError):
        build_ar1_observation_model([s], [0])


@settings(max_examples=60, deadline=None)
@given(
    phi=st.floats(-0.95, 0.95),
    sigma2=st.floats(0.0, 5.0),
    noise=st.floats(0.05, 4.0),
    count=st.integers(1, 6),
)
def test_ar1_min_eigenvalue_at_least_noise(phi, sigma2, noise, count):
    s = SensorSpec("a", (0.0,), (sigma2,), phi, noise)
    _, covs = build_ar1_observation_model([s], [count])
    Q = covs[0]
    assert np.max(np.abs(Q - Q.T)) == 0.0
    assert np.linalg.eigvalsh(Q).min() >= noise - 1e-10


def test_enumerate_budget_one():
    assert [c.counts for c in enumerate_controls(3, 1)] == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]


def test_enumerate_budget_two_counts():
    ctrls = enumerate_controls(3, 2)
    assert len(ctrls) == 9
    assert sum(1 for c in ctrls if c.dim == 1) == 3
    assert sum(1 for c in ctrls if c.dim == 2) == 6
    assert [c.id for c in ctrls] == list(range(9))
    brute = {(a, b, c) for a in range(3) for b in range(3) for c in range(3) if 1 <= a + b + c <= 2}
    assert {c.counts for c in ctrls} == brute


def test_enumerate_single_sensor():
    assert [c.counts for c in enumerate_controls(1, 3)] == [(1,), (2,), (3,)]


@settings(max_examples=30, deadline=None)
@given(sensors=st.integers(1, 4), budget=st.integers(1, 4))
def test_enumerate_count_matches_stars_and_bars(sensors, budget):
    ctrls = enumerate_controls(sensors, budget)
    expected = sum(comb(t + sensors - 1, sensors - 1) for t in range(1, budget + 1))
    assert len(ctrls) == expected
    assert len({c.counts for c in ctrls}) == expected


def test_gaussian_logpdf_examples():
    assert gaussian_logpdf([0.3], [0.3], [[1.0]]) == pytest.approx(-0.5 * log(2 * pi), abs=1e-14)
    assert gaussian_logpdf([0.0], [0.0], [[4.0]]) == pytest.approx(-0.5 * log(8 * pi), abs=1e-14)
    assert gaussian_logpdf([1.0, 1.0], [0.0, 0.0], np.eye(2)) == pytest.approx(-log(2 * pi) - 1.0, abs=1e-14)


def test_gaussian_logpdf_matches_scipy(rng):
    for d in (1, 2, 4):
        A = rng.normal(size=(d, d))
        cov = A @ A.T + 0.5 * np.eye(d)
        mean, y = rng.normal(size=d), rng.normal(size=d)
        assert gaussian_logpdf(y, mean, cov) == pytest.approx(log(density(y, mean, cov)), abs=1e-11)


def test_gaussian_logpdf_singular_raises():
    with pytest.raises(IllPosedModelError):
        gaussian_logpdf([0.0, 0.0], [0.0, 0.0], np.zeros((2, 2)))


def test_likelihood_matrix_identical_states_is_scaled_identity():
    obs = two_state_scalar(means=(1.0, 1.0), var=(2.0, 2.0))
    r = likelihood_matrix(np.array([0.4]), 0, obs)
    assert r[0, 0] > 0 and r[0, 0] == r[1, 1]
    assert r[0, 1] == 0 and r[1, 0] == 0


def test_likelihood_matrix_far_tail_underflows_to_zero():
    obs = two_state_scalar(means=(0.0, 100.0), var=(1.0, 1.0))
    r = likelihood_matrix(np.array([100.0]), 0, obs)
    assert r[0, 0] == 0.0 and r[1, 1] > 0.0


def test_likelihood_matrix_matches_logpdf(rng):
    obs = random_obs(rng, 3, [2])
    y = rng.normal(size=2)
    r = np.diag(likelihood_matrix(y, 0, obs))
    ref = [np.exp(gaussian_logpdf(y, obs.means[0][i], obs.covs[0][i])) for i in range(3)]
    np.testing.assert_allclose(r, ref, rtol=1e-12)


def test_likelihood_ratio_invariant_under_common_shift(rng):
    obs = two_state_scalar(means=(0.0, 1.5), var=(1.0, 1.0))
    shifted = two_state_scalar(means=(3.0, 4.5), var=(1.0, 1.0))
    for y in rng.normal(size=5):
        a = obs.loglik(np.array([y]), 0)
        b = shifted.loglik(np.array([y + 3.0]), 0)
        assert a[0] - a[1] == pytest.approx(b[0] - b[1], abs=1e-12)


def test_loglik_batch_matches_single(rng):
    obs = random_obs(rng, 4, [3])
    Y = rng.normal(size=(5, 3))
    batch = obs.loglik_batch(Y, 0)
    for j in range(5):
        np.testing.assert_allclose(batch[j], obs.loglik(Y[j], 0), atol=1e-12)


def test_model_arrays_are_read_only():
    chain = MarkovModel(np.eye(2), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        chain.P[0, 0] = 0.3


def test_synthetic_config_round_trip(tmp_path):
    model = load_model(SYNTHETIC_CONFIG)
    assert model.n == 4 and model.obs.n_controls == 9
    assert validate_model(model.chain, model.obs) == []
    np.testing.assert_array_equal(model.chain.P, ACTIVITY_P)
    out = tmp_path / "m.json"
    out.write_text(json.dumps(model.to_dict()))
    again = load_model(out)
    for u in range(model.obs.n_controls):
        np.testing.assert_array_equal(again.obs.means[u], model.obs.means[u])
        np.testing.assert_array_equal(again.obs.covs[u], model.obs.covs[u])


def test_explicit_controls_round_trip():
    obs = two_state_scalar()
    model = TrackingModel(MarkovModel(np.eye(2), np.array([0.5, 0.5])), obs, ("a", "b"))
    again = TrackingModel.from_dict(json.loads(json.dumps(model.to_dict())))
    np.testing.assert_array_equal(again.obs.means[0], obs.means[0])
    assert again.states == ("a", "b")


def test_sensor_model_single_sample_controls_first():
    sensors = [SensorSpec(name, (0.0, 1.0), (1.0, 1.0), 0.25, 2.0) for name in ("x", "y", "z")]
    obs = sensor_observation_model(sensors, 2)
    assert [c.counts for c in obs.controls[:3]] == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
