import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from optomech_otto.model import (
    HBAR,
    K_B,
    CouplingKind,
    DriveSchedule,
    EngineParams,
    ParameterError,
    PhysicalScale,
    UndefinedTemperatureError,
    build_hamiltonian,
    max_stable_nbar_h,
    mean_occupation,
    photon_rates,
    stability_check,
    steady_photon_number,
    temperature_from_occupation,
)


def test_baseline_defaults():
    p = EngineParams()
    assert (p.kappa_a, p.kappa_b, p.g, p.nbar_c, p.nbar_h) == (4.0, 0.04, -0.6, 0.01, 0.45)
    assert p.kappa_h == p.kappa_a
    assert p.drive_period == pytest.approx(2 * math.pi)
    assert p.coupling is CouplingKind.QUADRATIC


@pytest.mark.parametrize("key", ["kappa_a", "kappa_b", "kappa_h", "nbar_a", "nbar_b", "nbar_h", "kappa_L", "omega_a"])
def test_negative_values_name_the_key(key):
    with pytest.raises(ParameterError) as err:
        EngineParams(**{key: -0.1})
    assert err.value.key == key
    assert key in str(err.value)


def test_bad_dims_and_frequency():
    with pytest.raises(ParameterError, match="dim_b"):
        EngineParams(dim_b=1)
    with pytest.raises(ParameterError, match="omega_b"):
        EngineParams(omega_b=0)
    with pytest.raises(ValueError):
        EngineParams(coupling="cubic")


def test_params_hash_is_stable_and_sensitive():
    assert EngineParams().params_hash() == EngineParams().params_hash()
    assert EngineParams().params_hash() != EngineParams(nbar_h=0.4).params_hash()


def test_schedule_values():
    s = DriveSchedule()
    assert s.value(0.0) == 1
    assert s.value(s.period / 2) == 0
    assert s.value(s.period) == 1
    assert DriveSchedule.constant(True).value(4.0) == 1
    assert DriveSchedule.constant(False).value(0.0) == 0
    with pytest.raises(ParameterError):
        DriveSchedule(duty=1.5)


@given(st.floats(-100, 100, allow_nan=False))
def test_schedule_periodic(t):
    s = DriveSchedule()
    phase = (t / s.period) % 0.5
    # rounding of t + period can cross a switching edge
    assume(1e-9 < phase < 0.5 - 1e-9)
    assert s.value(t) in (0, 1)
    assert s.value(t + s.period) == s.value(t)


@given(st.floats(0, 50), st.floats(0.01, 30))
def test_segments_tile_interval(t0, length):
    s = DriveSchedule()
    segs = s.segments(t0, t0 + length)
    assert segs[0][0] == t0 and segs[-1][1] == t0 + length
    for (a, b, on), (c, _, _) in zip(segs[:-1], segs[1:]):
        assert b == c
    for a, b, on in segs:
        assert s.value(0.5 * (a + b)) == int(on)


def test_duty_fraction_is_half():
    s = DriveSchedule()
    segs = s.segments(0.0, s.period)
    on_time = sum(b - a for a, b, on in segs if on)
    assert on_time == pytest.approx(s.period / 2)


@given(st.floats(0.01, 50), st.floats(0.05, 10))
def test_occupation_temperature_inverse(T, omega):
    n = mean_occupation(omega, T)
    assert temperature_from_occupation(n, omega) == pytest.approx(T, rel=1e-9)


def test_temperature_errors():
    assert mean_occupation(1.0, 0.0) == 0.0
    with pytest.raises(UndefinedTemperatureError):
        temperature_from_occupation(0.0, 1.0)
    with pytest.raises(UndefinedTemperatureError):
        mean_occupation(1.0, -1.0)


def test_photon_steady_state():
    p = EngineParams(nbar_h=0.125)
    assert steady_photon_number(p, True) == pytest.approx((0.01 + 0.125) / 2)
    assert steady_photon_number(p, False) == pytest.approx(0.01)
    A, B = photon_rates(p, True)
    assert (A, B) == pytest.approx((4 * 0.01 + 4 * 0.125, 8.0))


def test_stability_bound():
    p = EngineParams()
    # omega_b + 4 g (nbar_c + nbar_h)/2 > 0  =>  nbar_h < 1/(2*0.6) - 0.01
    assert max_stable_nbar_h(p) == pytest.approx(1 / 1.2 - 0.01)
    assert stability_check(p.replace(nbar_h=0.45))
    assert not stability_check(p.replace(nbar_h=0.9))
    assert stability_check(p.replace(nbar_h=0.9, coupling="linear"))


@pytest.mark.parametrize("coupling", ["quadratic", "linear"])
def test_hamiltonian_conserves_photon_number(coupling):
    p = EngineParams(dim_a=3, dim_b=5, coupling=coupling)
    H = build_hamiltonian(p).toarray()
    na = p.space.n_a.toarray()
    assert np.allclose(H, H.conj().T)
    assert np.allclose(H @ na - na @ H, 0)


def test_hamiltonian_matrix_elements():
    p = EngineParams(dim_a=2, dim_b=3, g=0.0, omega_a=2.0)
    assert np.allclose(np.diag(build_hamiltonian(p).toarray()).real, [0, 1, 2, 2, 3, 4])


def test_physical_unit_conversions():
    scale = PhysicalScale(period_s=2e-9)
    assert scale.omega_b == pytest.approx(math.pi * 1e9)
    assert scale.energy(1.0) == pytest.approx(HBAR * math.pi * 1e9)
    assert scale.power(1.0) == pytest.approx(scale.energy(1.0) / 2e-9)
    assert scale.temperature(1.0) == pytest.approx(HBAR * math.pi * 1e9 / K_B)
