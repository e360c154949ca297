import numpy as np
import numpy.testing as npt
import pytest

from sim import (
    ArrayScenario,
    NoiseSpec,
    SourceSpec,
    apply_faults,
    apply_perturbations,
    as_doa_vector,
    avs_manifold,
    c_vector,
    draw_perturbations,
    f_matrix,
    f_matrix_derivative,
    generate_noise,
    generate_sources,
    noise_variance_from_snr,
    synthesize,
    trial_rng,
    uca_pressure_steering,
    ula_pressure_steering,
    wrap_angle,
)


def test_ula_steering_broadside_is_all_ones():
    npt.assert_allclose(ula_pressure_steering(7, np.pi / 2), np.ones(7), atol=1e-12)


def test_ula_steering_endfire_alternates():
    npt.assert_allclose(ula_pressure_steering(4, 0.0), [1, -1, 1, -1], atol=1e-12)


def test_uca_steering_first_sensor():
    a = uca_pressure_steering(5, 0.0)
    assert a.shape == (5,)
    npt.assert_allclose(a[0], -1.0, atol=1e-12)
    npt.assert_allclose(np.abs(a), 1.0)


def test_uca_needs_three_sensors():
    with pytest.raises(ValueError):
        uca_pressure_steering(2, 0.3)


def test_c_vector():
    npt.assert_allclose(c_vector(0.0), [1.0, 1.0, 0.0])
    npt.assert_allclose(c_vector(np.pi / 2), [1.0, 0.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("theta", [-3.0, -np.pi / 2, -0.4, 0.0, 1.1, np.pi / 2, 2.9, 3.5])
def test_c_vector_angle_round_trip(theta):
    c = c_vector(theta)
    assert np.arctan2(c[2], c[1]) == pytest.approx(wrap_angle(theta), abs=1e-12)


def test_f_matrix_derivative_matches_finite_differences():
    h = 1e-6
    for theta in np.linspace(-3.0, 3.0, 13):
        fd = (f_matrix(theta + h) - f_matrix(theta - h)) / (2 * h)
        npt.assert_allclose(f_matrix_derivative(theta), fd, atol=1e-8)


def test_avs_manifold_blocks(rng):
    A = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
    theta = np.array([-0.4, 1.1])
    manifold = avs_manifold(A, theta)
    assert manifold.matrix.shape == (12, 2)
    npt.assert_allclose(manifold.block(0), A)
    npt.assert_allclose(manifold.block(1), A * np.cos(theta))
    npt.assert_allclose(manifold.block(2), A * np.sin(theta))


def test_avs_manifold_dimension_mismatch():
    with pytest.raises(ValueError):
        avs_manifold(np.ones((4, 2)), [0.1, 0.2, 0.3])


def test_apply_faults_zeroes_one_based_rows():
    A = np.ones((5, 2), dtype=complex)
    out = apply_faults(A, {2, 4})
    npt.assert_array_equal(out[[1, 3]], 0)
    npt.assert_array_equal(out[[0, 2, 4]], 1)
    with pytest.raises(ValueError):
        apply_faults(A, {6})


def test_apply_perturbations_gain_and_offset():
    scenario = ArrayScenario(
        geometry="ula", M=2, gains=[2.0, 0.5], position_offsets=[[0.0, 0.0], [0.25, 0.0]],
    )
    A = np.ones((2, 1), dtype=complex)
    out = apply_perturbations(A, scenario, np.array([0.0]))
    npt.assert_allclose(out[:, 0], [2.0, 0.5 * np.exp(1j * np.pi / 2)], atol=1e-12)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ArrayScenario(geometry="ula", M=5, faulty=frozenset({0}))
    with pytest.raises(ValueError):
        ArrayScenario(geometry="ula", M=1)
    with pytest.raises(ValueError):
        ArrayScenario(geometry="explicit", M=3)


def test_faulty_scenario_steering():
    scenario = ArrayScenario(geometry="uca", M=5, faulty=frozenset({2, 4}))
    A = scenario.steering_matrix(np.radians([24.0, 92.0]))
    npt.assert_array_equal(A[[1, 3]], 0)
    npt.assert_allclose(np.abs(A[[0, 2, 4]]), 1.0)


def test_draw_perturbations_ranges(rng):
    scenario = draw_perturbations(ArrayScenario(geometry="ula", M=7), rng)
    assert np.all((scenario.gains >= 0.7) & (scenario.gains <= 1.3))
    assert np.all(np.abs(scenario.position_offsets) <= 1.0)
    assert not scenario.is_calibrated


def test_as_doa_vector():
    npt.assert_allclose(as_doa_vector([-1.0, 0.5]), [-1.0, 0.5])
    with pytest.raises(ValueError):
        as_doa_vector([0.5, -1.0])
    with pytest.raises(ValueError):
        as_doa_vector([np.pi])


def test_wrap_angle():
    npt.assert_allclose(wrap_angle(np.pi), -np.pi)
    npt.assert_allclose(wrap_angle(2 * np.pi + 0.1), 0.1)


def test_qpsk_sources_have_unit_modulus(rng):
    S = generate_sources(SourceSpec("qpsk", 3, 1000), rng)
    npt.assert_allclose(np.abs(S), 1.0)


@pytest.mark.parametrize("kind", ["cn", "qpsk", "gmm"])
def test_sources_have_unit_power(rng, kind):
    S = generate_sources(SourceSpec(kind, 2, 100_000), rng)
    npt.assert_allclose(np.mean(np.abs(S) ** 2, axis=1), 1.0, rtol=0.02)
    npt.assert_allclose(np.mean(S, axis=1), 0.0, atol=0.02)


@pytest.mark.parametrize("kind", ["cn", "qpsk", "gmm"])
def test_sources_are_uncorrelated(rng, kind):
    T = 10_000
    S = generate_sources(SourceSpec(kind, 3, T), rng)
    cross = S @ S.conj().T / T
    off = cross[~np.eye(3, dtype=bool)]
    assert np.max(np.abs(off)) < 3.0 / np.sqrt(T)


@pytest.mark.parametrize("kind", ["cn", "laplace"])
def test_noise_variance(rng, kind):
    V = generate_noise(NoiseSpec(kind, 2.0), (3, 100_000), rng)
    npt.assert_allclose(np.mean(np.abs(V) ** 2), 2.0, rtol=0.03)


def test_spec_validation():
    with pytest.raises(ValueError):
        SourceSpec("bpsk", 1, 10)
    with pytest.raises(ValueError):
        NoiseSpec("cn", -1.0)


def test_synthesize_noiseless(rng):
    abar = rng.standard_normal((9, 2)) + 0j
    S = generate_sources(SourceSpec("cn", 2, 50), rng)
    Y = synthesize(abar, S, NoiseSpec("cn", 0.0), rng)
    npt.assert_allclose(Y, abar @ S)


def test_noise_variance_from_snr():
    assert noise_variance_from_snr(10.0) == pytest.approx(0.1)
    assert noise_variance_from_snr(0.0) == pytest.approx(1.0)


def test_trial_rng_is_reproducible_and_keyed():
    a = trial_rng(7, 0, 3).standard_normal(5)
    b = trial_rng(7, 0, 3).standard_normal(5)
    c = trial_rng(7, 0, 4).standard_normal(5)
    npt.assert_array_equal(a, b)
    assert not np.allclose(a, c)
