import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bwh.errors import ConfigError
from bwh.stochastic import (
    birkhoff_mean,
    build_perturbed_identity,
    bump_profile,
    deformed_mean_closed_form,
    ergodic_table,
    make_dynamical_system,
    validate_deformation,
)


# ---------------------------------------------------------------------------
# dynamical systems


def test_torus_shift_example():
    sys = make_dynamical_system("torus_shift", dim=1)
    assert sys.shift(np.array([0.3]), np.array([0.9]))[0] == pytest.approx(0.2)


def test_cyclic_shift_example():
    sys = make_dynamical_system("cyclic_shift", dim=1, p=4)
    assert sys.shift(np.array([3]), np.array([2]))[0] == 1


@settings(derandomize=True, max_examples=30, deadline=None)
@given(
    st.floats(min_value=0, max_value=0.999),
    st.floats(min_value=-3, max_value=3),
    st.floats(min_value=-3, max_value=3),
)
def test_torus_shift_group_law(x, k1, k2):
    sys = make_dynamical_system("torus_shift", dim=1)
    a = sys.shift(sys.shift(np.array([x]), np.array([k1])), np.array([k2]))
    b = sys.shift(np.array([x]), np.array([k1 + k2]))
    assert abs((a[0] - b[0] + 0.5) % 1.0 - 0.5) < 1e-12


@settings(derandomize=True, max_examples=30, deadline=None)
@given(st.integers(0, 4), st.integers(-9, 9), st.integers(-9, 9))
def test_cyclic_shift_group_law(x, k1, k2):
    sys = make_dynamical_system("cyclic_shift", dim=1, p=5)
    a = sys.shift(sys.shift(np.array([x]), np.array([k1])), np.array([k2]))
    b = sys.shift(np.array([x]), np.array([k1 + k2]))
    assert a[0] == b[0]


def test_cyclic_shift_is_permutation():
    sys = make_dynamical_system("cyclic_shift", dim=1, p=5)
    images = sorted(int(sys.shift(np.array([x]), np.array([2]))[0]) for x in range(5))
    assert images == [0, 1, 2, 3, 4]


def test_bernoulli_word_shift_equivariance():
    sys = make_dynamical_system("bernoulli", dim=1, states=3, probs=[0.5, 0.3, 0.2], seed=11)
    sites = np.arange(-20, 20)[:, None]
    w0 = sys.word(sites + 7, np.zeros(1, dtype=int))
    w1 = sys.word(sites, np.array([7]))
    np.testing.assert_array_equal(w0, w1)


def test_bernoulli_measure_preservation_multinomial():
    sys = make_dynamical_system("bernoulli", dim=1, states=2, probs=[0.7, 0.3], seed=3)
    n = 100_000
    sites = np.arange(n)[:, None]
    w = sys.word(sites, np.zeros(1, dtype=int))
    freq = np.bincount(w, minlength=2) / n
    for f, p in zip(freq, [0.7, 0.3]):
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(f - p) < 3 * sigma


def test_bernoulli_probs_validation():
    with pytest.raises(ConfigError):
        make_dynamical_system("bernoulli", dim=1, states=2, probs=[0.7, 0.4])


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        make_dynamical_system("elliptic", dim=1)


# ---------------------------------------------------------------------------
# bump profiles


@pytest.mark.parametrize("name", ["sine", "poly", "sine_flow"])
def test_profile_derivative_consistent(name):
    value, deriv = bump_profile(name)
    u = np.linspace(0.01, 0.99, 197)
    h = 1e-6
    fd = (value(u + h) - value(u - h)) / (2 * h)
    np.testing.assert_allclose(deriv(u), fd, atol=1e-8)


def test_bump_profiles_vanish_at_cell_edges():
    for name in ("sine", "poly"):
        value, deriv = bump_profile(name)
        assert abs(value(np.array([0.0]))[0]) < 1e-15
        assert abs(value(np.array([1.0]))[0]) < 1e-12
        assert abs(deriv(np.array([0.0]))[0]) < 1e-12
        assert abs(deriv(np.array([1.0]))[0]) < 1e-12


def test_unknown_profile_rejected():
    with pytest.raises(ConfigError):
        bump_profile("hat")


# ---------------------------------------------------------------------------
# deformation statistics


def test_sine_flow_statistics():
    spec = build_perturbed_identity(
        {"kind": "deterministic", "dim": 1, "profile": "sine_flow", "amplitude": 0.1, "eta": 0.5}
    )
    assert spec.c_phi == pytest.approx(1.0)
    assert spec.nu == pytest.approx(0.95, abs=1e-6)
    assert spec.lip == pytest.approx(1.05, abs=1e-6)
    assert spec.invertible
    # E[div Z] must be the trace of E[grad Z]
    npts = 64
    div = spec.ediv_z.on_grid(npts).real
    tr = spec.egrad_z.on_grid(npts)[0, 0].real
    np.testing.assert_allclose(div, tr, atol=1e-13)
    np.testing.assert_allclose(div, 0.1 * np.cos(2 * np.pi * np.arange(npts) / npts), atol=1e-12)


def test_cyclic_mean_gradient_is_state_average():
    spec = build_perturbed_identity(
        {
            "kind": "cyclic",
            "dim": 1,
            "period": 2,
            "profile": "sine",
            "amplitudes": [[0.3], [0.1]],
            "word": "alternating",
        }
    )
    npts = 128
    value, deriv = bump_profile("sine")
    u = np.arange(npts) / npts
    expected = 0.5 * (0.3 + 0.1) * deriv(u)
    got = spec.egrad_z.on_grid(npts)[0, 0].real
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_losing_invertibility_is_flagged_not_fatal():
    spec = build_perturbed_identity(
        {"kind": "deterministic", "dim": 1, "profile": "sine_flow", "amplitude": 1.5, "eta": 0.8}
    )
    assert not spec.invertible
    assert spec.nu < 0.0


def test_eta_outside_range_rejected():
    with pytest.raises(ConfigError):
        build_perturbed_identity({"kind": "deterministic", "dim": 1, "amplitude": 0.1, "eta": 1.0})


def test_validate_deformation_stationarity():
    spec = build_perturbed_identity(
        {
            "kind": "cyclic",
            "dim": 1,
            "period": 3,
            "profile": "sine",
            "amplitudes": [[0.2], [0.05]],
            "seed": 5,
            "eta": 0.1,
        }
    )
    report = validate_deformation(spec)
    assert report["stationarity_residual"] < 1e-10
    assert report["invertible"]


def test_validate_bernoulli_word_equivariance():
    spec = build_perturbed_identity(
        {"kind": "bernoulli", "dim": 1, "profile": "sine", "amplitude": 0.2, "eta": 0.1, "seed": 2}
    )
    report = validate_deformation(spec)
    assert report["stationarity_residual"] == 0.0


def test_bernoulli_has_no_periodic_realization():
    spec = build_perturbed_identity(
        {"kind": "bernoulli", "dim": 1, "profile": "sine", "amplitude": 0.2, "eta": 0.1}
    )
    with pytest.raises(ConfigError):
        spec.sample_realization()


# ---------------------------------------------------------------------------
# Birkhoff means


def test_birkhoff_mean_constant_exact():
    est = birkhoff_mean(lambda x: np.ones_like(x), 1, [4.0], subdivisions=16)
    assert est[0] == pytest.approx(1.0, abs=1e-14)


def test_birkhoff_mean_sin_squared():
    est = birkhoff_mean(lambda x: np.sin(2 * np.pi * x) ** 2, 1, [64.0], subdivisions=64)
    assert est[0] == pytest.approx(0.5, abs=1e-10)


def test_birkhoff_richardson_improves_rate_one_error():
    # windows sharing a fractional phase have error g/t with one constant,
    # which the rate-1 extrapolation removes
    fn = lambda x: np.sin(np.pi * x) ** 2  # period 2, windows are off multiples
    plain, rich = birkhoff_mean(fn, 1, [17.3, 33.3], subdivisions=64, richardson=True)
    exact = 0.5
    assert abs(plain[-1] - exact) > 1e-4
    assert abs(rich[-1] - exact) < 1e-8


def test_deformed_mean_closed_form_flow():
    spec = build_perturbed_identity(
        {"kind": "deterministic", "dim": 1, "profile": "sine_flow", "amplitude": 1.0, "eta": 0.3}
    )
    got = deformed_mean_closed_form(lambda y: np.cos(2 * np.pi * y), spec)
    assert got == pytest.approx(0.15, abs=1e-12)  # eta/2 for the unit flow


def test_ergodic_table_cyclic_exact_at_period_multiples():
    spec = build_perturbed_identity(
        {
            "kind": "cyclic",
            "dim": 1,
            "period": 3,
            "profile": "sine",
            "amplitudes": [[0.2], [0.05]],
            "seed": 5,
            "eta": 0.1,
        }
    )
    rows = ergodic_table(spec, lambda y: np.sin(2 * np.pi * y), [3.0, 48.0, 3072.0])
    for row in rows:
        assert row["abs_error"] < 1e-10


def test_ergodic_table_realization_independent_in_the_limit():
    spec = build_perturbed_identity(
        {
            "kind": "cyclic",
            "dim": 1,
            "period": 2,
            "profile": "sine",
            "amplitudes": [[0.25], [0.1]],
            "word": "alternating",
            "eta": 0.2,
        }
    )
    rows0 = ergodic_table(spec, lambda y: np.sin(2 * np.pi * y), [64.0], omega=[0])
    rows1 = ergodic_table(spec, lambda y: np.sin(2 * np.pi * y), [64.0], omega=[1])
    assert rows0[0]["estimate"] == pytest.approx(rows1[0]["estimate"], abs=1e-10)


def test_ergodic_table_bernoulli_window():
    spec = build_perturbed_identity(
        {"kind": "bernoulli", "dim": 1, "profile": "sine", "amplitude": 0.2, "eta": 0.1, "seed": 7}
    )
    rows = ergodic_table(spec, lambda y: np.sin(2 * np.pi * y), [256.0], subdivisions=16)
    assert rows[0]["abs_error"] < 1e-2
