import numpy as np
import numpy.testing as npt
import pytest

from conftest import random_doas, random_steering
from covariance import denoise, exact_stats, model_covariance
from cpd_acdc import (
    PAIR_WEIGHTS,
    PAIRS,
    AcdcSchedule,
    CpdState,
    DcConstants,
    ac_column_update,
    ac_sweep,
    acdc_run,
    cls_cost,
    dc_constants,
    dc_stationary_angles,
    ejd_init,
    extract_doa,
    modified_dc_sweep,
    normalize_estimate,
    svec,
    unsvec,
)
from sim import avs_manifold, c_matrix, wrap_angle


def _noisy_stats(rng, M=4, D=2, perturbation=0.3):
    """Denoised statistics that do not follow the CPD model exactly."""
    abar = avs_manifold(random_steering(rng, M, D), random_doas(rng, D)).matrix
    E = random_steering(rng, 3 * M, 3 * M)
    R = model_covariance(abar, 0.0) + perturbation * (E + E.conj().T) / 2
    return denoise(R, 0.0)


def _random_state(rng, stats, D):
    A = random_steering(rng, stats.M, D)
    theta = random_doas(rng, D)
    return CpdState(A=A, theta=theta, cost=cls_cost(theta, A, stats))


def _single_doa_cost(consts: DcConstants, theta):
    return (
        consts.alpha * np.sin(theta)
        + consts.beta * np.cos(theta)
        + consts.gamma * np.sin(2 * theta) / 2
        + consts.delta * np.cos(2 * theta) / 2
    )


def test_cls_cost_is_zero_at_truth(ula_truth):
    theta, A, stats = ula_truth
    assert cls_cost(theta, A, stats) < 1e-20 * np.sum(np.abs(stats.rx) ** 2)


def test_cls_cost_equals_weighted_slab_sum(rng):
    stats = _noisy_stats(rng)
    A = random_steering(rng, 4, 2)
    theta = np.array([-0.5, 1.3])
    C = c_matrix(theta)
    expected = 0.0
    for (i, j), w in zip(PAIRS, PAIR_WEIGHTS):
        model = (A * (C[i] * C[j])) @ A.conj().T
        expected += w * np.sum(np.abs(model - stats.slabs[i, j]) ** 2)
    assert cls_cost(theta, A, stats) == pytest.approx(expected, rel=1e-12)


def test_dc_derivative_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(100):
        stats = _noisy_stats(rng, M=3, D=2)
        A = random_steering(rng, 3, 2)
        theta = random_doas(rng, 2)
        d = int(rng.integers(2))
        consts = dc_constants(d, theta, A, stats)
        plus, minus = theta.copy(), theta.copy()
        plus[d] += h
        minus[d] -= h
        fd = (cls_cost(plus, A, stats) - cls_cost(minus, A, stats)) / (2 * h)
        scale = max(1.0, consts.magnitude)
        assert consts.derivative(theta[d]) == pytest.approx(fd, rel=1e-6, abs=1e-6 * scale)


def test_single_doa_cost_matches_cls_cost_up_to_constant(rng):
    stats = _noisy_stats(rng, M=3, D=2)
    A = random_steering(rng, 3, 2)
    theta = random_doas(rng, 2)
    consts = dc_constants(0, theta, A, stats)
    offsets = []
    for t in np.linspace(-3.0, 3.0, 7):
        trial = theta.copy()
        trial[0] = t
        offsets.append(cls_cost(trial, A, stats) - _single_doa_cost(consts, t))
    npt.assert_allclose(offsets, offsets[0], rtol=1e-9, atol=1e-9)


def test_stationary_angles_pure_cosine():
    npt.assert_allclose(dc_stationary_angles(DcConstants(1.0, 0.0, 0.0, 0.0)), [-np.pi / 2, np.pi / 2])


def test_stationary_angles_double_angle():
    angles = dc_stationary_angles(DcConstants(0.0, 0.0, 1.0, 0.0))
    npt.assert_allclose(angles, [-3 * np.pi / 4, -np.pi / 4, np.pi / 4, 3 * np.pi / 4], atol=1e-12)


def test_stationary_angles_include_pi_when_stationary():
    npt.assert_allclose(dc_stationary_angles(DcConstants(0.0, 1.0, 0.0, 0.0)), [-np.pi, 0.0], atol=1e-12)


def test_stationary_angles_empty_for_zero_constants():
    assert dc_stationary_angles(DcConstants(0.0, 0.0, 0.0, 0.0)) == []


def test_stationary_angles_match_grid_oracle(rng):
    grid = np.linspace(-np.pi, np.pi, 200_001)
    for _ in range(100):
        consts = DcConstants(*rng.standard_normal(4))
        angles = dc_stationary_angles(consts)
        assert 2 <= len(angles) <= 4
        bound = 1e-8 * (consts.magnitude + np.finfo(float).eps)
        for t in angles:
            assert -np.pi <= t < np.pi
            assert abs(consts.derivative(t)) < bound
        best = min(_single_doa_cost(consts, t) for t in angles)
        grid_best = _single_doa_cost(consts, grid).min()
        assert best <= grid_best + 1e-12
        assert grid_best - best < 1e-6 * consts.magnitude


def test_modified_dc_sweep_keeps_truth(ula_truth):
    theta, A, stats = ula_truth
    state = CpdState(A=A, theta=theta, cost=cls_cost(theta, A, stats))
    npt.assert_allclose(modified_dc_sweep(state, stats).theta, theta, atol=1e-9)


def test_modified_dc_sweep_rejects_zero_sweeps(ula_truth):
    theta, A, stats = ula_truth
    with pytest.raises(ValueError):
        modified_dc_sweep(CpdState(A=A, theta=theta, cost=0.0), stats, 0)


def test_ac_column_update_keeps_truth(ula_truth):
    theta, A, stats = ula_truth
    state = CpdState(A=A, theta=theta, cost=cls_cost(theta, A, stats))
    new = ac_column_update(state, stats, 1)
    npt.assert_allclose(np.outer(new.A[:, 1], new.A[:, 1].conj()), np.outer(A[:, 1], A[:, 1].conj()), atol=1e-8)


def test_cost_is_non_increasing_across_steps(rng):
    for _ in range(100):
        stats = _noisy_stats(rng, M=4, D=2)
        state = _random_state(rng, stats, 2)
        costs = [state.cost]
        for _ in range(3):
            for d in range(2):
                state = ac_column_update(state, stats, d)
                costs.append(state.cost)
            state = modified_dc_sweep(state, stats)
            costs.append(state.cost)
        assert np.all(np.diff(costs) <= 1e-12 * costs[0])
        assert state.cost == pytest.approx(cls_cost(state.theta, state.A, stats), rel=1e-10)


def test_svec_inner_product_and_roundtrip(rng):
    P, Q = random_steering(rng, 4, 4), random_steering(rng, 4, 4)
    P, Q = P + P.conj().T, Q + Q.conj().T
    assert svec(P) @ svec(Q) == pytest.approx(np.trace(P @ Q).real)
    npt.assert_allclose(unsvec(svec(P)), P, atol=1e-14)
    assert svec(P).shape == (16,)


def test_svec_validation():
    with pytest.raises(ValueError):
        svec(np.triu(np.ones((3, 3))))
    with pytest.raises(ValueError):
        unsvec(np.ones(5))


def test_extract_doa():
    assert extract_doa(0.0, 1.0) == pytest.approx(np.pi / 2)
    assert extract_doa(-1.0, 0.0) == pytest.approx(-np.pi)
    assert extract_doa(1.0, -1.0) == pytest.approx(-np.pi / 4)
    with pytest.raises(ValueError):
        extract_doa(0.0, 0.0)


def test_normalize_estimate(rng):
    A = random_steering(rng, 4, 3)
    theta = np.array([2.0, -1.0, 4.0])
    t1, A1 = normalize_estimate(theta, A)
    assert np.all(np.diff(t1) > 0)
    assert np.all(t1 >= -np.pi) and np.all(t1 < np.pi)
    npt.assert_allclose(A1[0].imag, 0.0)
    assert np.all(A1[0].real >= 0)
    npt.assert_allclose(np.abs(A1), np.abs(A[:, np.argsort(np.array([2.0, -1.0, 4.0 - 2 * np.pi]))]))
    t2, A2 = normalize_estimate(t1, A1)
    npt.assert_allclose(t2, t1, atol=1e-14)
    npt.assert_allclose(A2, A1)


def test_ejd_recovers_exact_model(ula_truth):
    theta, A, stats = ula_truth
    theta0, A0 = ejd_init(stats, 3)
    npt.assert_allclose(theta0, theta, atol=1e-6)
    npt.assert_allclose(A0, normalize_estimate(theta, A)[1], atol=1e-6)


def test_ejd_validates_source_count(ula_truth):
    _, _, stats = ula_truth
    with pytest.raises(ValueError):
        ejd_init(stats, 7)


def test_acdc_noiseless_exact_recovery(ula_truth):
    theta, A, stats = ula_truth
    state = acdc_run(stats, n_sources=3)
    npt.assert_allclose(state.theta, theta, atol=1e-6)
    assert state.cost < 1e-12 * np.sum(np.abs(stats.rx) ** 2)
    assert state.converged


def test_acdc_from_perturbed_start(rng):
    theta = np.array([-1.2, 0.3, 1.9])
    A = random_steering(rng, 6, 3)
    stats = exact_stats(avs_manifold(A, theta).matrix, 0.0)
    A0 = A + 0.05 * random_steering(rng, 6, 3)
    state = acdc_run(stats, init=(theta + 0.05, A0))
    npt.assert_allclose(state.theta, theta, atol=1e-4)


def test_acdc_history_is_monotone_and_output_normalized(rng):
    stats = _noisy_stats(rng, M=5, D=2)
    state = acdc_run(stats, n_sources=2, schedule=AcdcSchedule(max_interleaves=50))
    history = np.array(state.cost_history)
    assert np.all(np.diff(history) <= 1e-12 * history[0])
    assert state.cost == pytest.approx(history[-1])
    assert np.all(np.diff(state.theta) >= 0)
    npt.assert_allclose(state.A[0].imag, 0.0)
    assert np.all(state.A[0].real >= 0)
    assert state.iteration <= 50


def test_acdc_revives_collapsed_column(ula_truth):
    theta, A, stats = ula_truth
    A0 = A.copy()
    A0[:, 2] = 0
    state = acdc_run(stats, init=(theta, A0), schedule=AcdcSchedule(max_interleaves=5))
    assert np.linalg.norm(state.A[:, 2]) > 0


def test_acdc_requires_init_or_source_count(ula_truth):
    _, _, stats = ula_truth
    with pytest.raises(ValueError):
        acdc_run(stats)


def test_schedule_validation():
    with pytest.raises(ValueError):
        AcdcSchedule(ac_sweeps=0)


def test_ac_sweep_updates_every_column(rng):
    stats = _noisy_stats(rng)
    state = _random_state(rng, stats, 2)
    assert ac_sweep(state, stats).cost <= state.cost


@pytest.mark.parametrize("D", [2, 3])
@pytest.mark.parametrize("M", [4, 5, 6, 7, 8])
def test_noiseless_recovery_on_random_arrays(M, D):
    rng = np.random.default_rng(100 * M + D)
    theta = random_doas(rng, D)
    A = random_steering(rng, M, D)
    stats = exact_stats(avs_manifold(A, theta).matrix, 0.0)
    state = acdc_run(stats, init=ejd_init(stats, D))
    npt.assert_allclose(wrap_angle(state.theta - theta), 0.0, atol=1e-6)


def test_ac_column_update_recovers_rank_one_column(rng):
    theta = np.array([0.8])
    a = random_steering(rng, 5, 1)
    stats = exact_stats(avs_manifold(a, theta).matrix, 0.0)
    start = random_steering(rng, 5, 1)
    new = ac_column_update(CpdState(A=start, theta=theta, cost=cls_cost(theta, start, stats)), stats, 0)
    a_hat = new.A[:, 0]
    correlation = abs(np.vdot(a_hat, a[:, 0])) / (np.linalg.norm(a_hat) * np.linalg.norm(a))
    assert correlation > 1 - 1e-8
    npt.assert_allclose(np.linalg.norm(a_hat), np.linalg.norm(a), rtol=1e-8)


def test_ejd_single_source(rng):
    theta = np.array([-2.1])
    a = random_steering(rng, 4, 1)
    theta0, A0 = ejd_init(exact_stats(avs_manifold(a, theta).matrix, 0.0), 1)
    correlation = abs(np.vdot(A0[:, 0], a[:, 0])) / (np.linalg.norm(A0) * np.linalg.norm(a))
    assert correlation > 1 - 1e-8
    npt.assert_allclose(theta0, theta, atol=1e-8)


def test_ejd_ignores_source_order(ula_truth):
    theta, A, stats = ula_truth
    perm = [2, 0, 1]
    shuffled = exact_stats(avs_manifold(A[:, perm], theta[perm]).matrix, 0.0)
    theta0, A0 = ejd_init(stats, 3)
    theta1, A1 = ejd_init(shuffled, 3)
    npt.assert_allclose(theta1, theta0, atol=1e-8)
    npt.assert_allclose(A1, A0, atol=1e-8)


def _derivative_sign_changes(consts: DcConstants) -> np.ndarray:
    grid = np.arange(-np.pi, np.pi, 1e-6)
    deriv = consts.derivative(grid)
    flips = np.flatnonzero(np.signbit(deriv[:-1]) != np.signbit(deriv[1:]))
    return (grid[flips] + grid[flips + 1]) / 2


@pytest.mark.parametrize(
    "values",
    [(0.3, -1.1, 0.7, 0.2), (1.0, 0.2, -0.4, 0.9), (-0.6, 0.5, 1.8, -0.3), (0.05, 2.0, 0.1, -0.7)],
)
def test_stationary_angles_match_derivative_sign_changes(values):
    consts = DcConstants(*values)
    angles = np.array(dc_stationary_angles(consts))
    flips = _derivative_sign_changes(consts)
    assert angles.size == flips.size
    npt.assert_allclose(angles, flips, atol=1e-6)


def test_modified_dc_sweep_restores_one_perturbed_doa(ula_truth):
    theta, A, stats = ula_truth
    start = theta.copy()
    start[0] += 0.1
    state = CpdState(A=A, theta=start, cost=cls_cost(start, A, stats))
    new = modified_dc_sweep(state, stats)
    npt.assert_allclose(new.theta, theta, atol=1e-8)
    assert new.cost < 1e-20 * np.sum(np.abs(stats.rx) ** 2)
