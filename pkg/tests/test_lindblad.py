import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from optomech_otto.fock import annihilation
from optomech_otto.lindblad import (
    ConvergenceError,
    DensityMatrix,
    InvariantViolation,
    build_liouvillian,
    check_state,
    dissipator,
    dissipator_apply,
    evolve,
    limit_cycle,
    sprepost,
    state_residuals,
    trace_distance,
    unvec,
    vec,
)
from optomech_otto.model import CouplingKind, DriveSchedule, EngineParams
from optomech_otto.states import thermal_state
from optomech_otto import thermo

from conftest import random_density

matrices = st.integers(2, 5).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 2**32 - 1))
)


def _random_complex(n, seed):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, n)) + 1j * r.normal(size=(n, n))


@given(matrices)
def test_vec_identity(case):
    n, seed = case
    A, B, rho = (_random_complex(n, seed + k) for k in range(3))
    assert np.allclose(unvec(vec(rho), n), rho)
    assert np.allclose(sprepost(A, B) @ vec(rho), vec(A @ rho @ B))


@given(matrices)
def test_dissipator_superop_matches_direct(case):
    n, seed = case
    L = _random_complex(n, seed)
    rho = random_density(n, np.random.default_rng(seed))
    assert np.allclose(unvec(dissipator(L) @ vec(rho), n), dissipator_apply(L, rho))


@given(matrices)
def test_dissipator_is_traceless(case):
    n, seed = case
    L = _random_complex(n, seed)
    H = _random_complex(n, seed + 1)
    rho = H + H.conj().T
    assert abs(np.trace(dissipator_apply(L, rho))) < 1e-10


def test_dissipator_shape_mismatch():
    with pytest.raises(ValueError):
        dissipator_apply(np.eye(3), np.eye(4))


def test_decay_of_single_mode():
    # D[a] on |1><1| moves the population to |0><0|
    a = annihilation(3)
    rho = np.diag([0, 1, 0]).astype(complex)
    assert np.allclose(np.diag(dissipator_apply(a, rho)).real, [1, -1, 0])


@pytest.mark.parametrize("coupling", ["quadratic", "linear"])
def test_generator_preserves_trace_and_hermiticity(coupling, rng):
    p = EngineParams(dim_a=3, dim_b=5, coupling=coupling)
    L = build_liouvillian(p)
    D = L.dim
    ident = vec(np.eye(D))
    for on in (True, False):
        G = L.generator(on)
        # tr(L rho) = vec(I)^T L vec(rho) vanishes for every rho
        assert np.max(np.abs(G.T @ ident)) < 1e-12
        rho = random_density(D, rng)
        out = L.apply(rho, on)
        assert np.allclose(out, out.conj().T, atol=1e-12)


def test_blocks_are_invariant_and_cover(small_params):
    L = build_liouvillian(small_params)
    idx = np.concatenate(L.blocks)
    assert np.array_equal(np.sort(idx), np.arange(L.dim**2))
    for block in L.blocks:
        outside = np.setdiff1d(np.arange(L.dim**2), block)
        for on in (True, False):
            assert L.generator(on)[outside][:, block].nnz == 0


def test_quadratic_blocks_include_parity():
    quad = build_liouvillian(EngineParams(dim_a=3, dim_b=6))
    lin = build_liouvillian(EngineParams(dim_a=3, dim_b=6, coupling=CouplingKind.LINEAR))
    assert len(quad.blocks) > len(lin.blocks)


def test_backends_agree_over_one_period(small_params):
    L = build_liouvillian(small_params)
    rho0 = thermo.initial_state(small_params)
    sched = small_params.schedule()
    a = evolve(rho0, L, sched, sched.period, backend="expm").final_state.data
    b = evolve(rho0, L, sched, sched.period, backend="rk4").final_state.data
    assert trace_distance(a, b) < 1e-6


def test_finite_difference_generator(small_params, rng):
    L = build_liouvillian(small_params)
    rho = random_density(L.dim, rng)
    h = 1e-4
    sched = DriveSchedule.constant(True, period=small_params.drive_period)
    fwd = evolve(DensityMatrix(rho, 0.0), L, sched, h, backend="expm", check=False).final_state.data
    bwd = evolve(DensityMatrix(rho, 0.0), L, sched, 2 * h, backend="expm", check=False).final_state.data
    # second-order one-sided difference
    deriv = (-3 * rho + 4 * fwd - bwd) / (2 * h)
    assert np.max(np.abs(deriv - L.apply(rho, True))) < 1e-5


@pytest.mark.parametrize("dim_a, tol", [(6, 2e-3), (14, 1e-7)])
def test_photon_number_relaxation_exact(small_params, dim_a, tol):
    # [H, n_a] = 0, so <n_a> relaxes exponentially; the only error is the
    # missing pump out of the top cavity level
    p = small_params.replace(dim_a=dim_a, dim_b=3)
    L = build_liouvillian(p)
    sched = DriveSchedule.constant(True, period=p.drive_period)
    A, B = p.kappa_a * p.nbar_a + p.kappa_h * p.nbar_h, p.kappa_a + p.kappa_h
    traj = evolve(thermo.initial_state(p), L, sched, 10 / B, sample_every=0.5 / B, backend="expm", record_mode="observables_only")
    n0 = traj.observables["n_a"][0]
    exact = A / B + (n0 - A / B) * np.exp(-B * traj.times)
    assert np.max(np.abs(traj.observables["n_a"] - exact) / exact) < tol


def test_evolve_empty_when_not_advancing(small_params):
    L = build_liouvillian(small_params)
    rho = DensityMatrix(thermo.initial_state(small_params), 3.0)
    traj = evolve(rho, L, small_params.schedule(), 3.0)
    assert len(traj) == 0
    assert traj.final_state is rho


def test_evolve_samples_and_drive(small_params):
    L = build_liouvillian(small_params)
    T = small_params.drive_period
    traj = evolve(thermo.initial_state(small_params), L, small_params.schedule(), T, sample_every=T / 10)
    assert len(traj) == 11
    assert np.allclose(traj.times, np.linspace(0, T, 11))
    assert list(traj.drive) == [1] * 6 + [0] * 5
    assert len(traj.states) == 11
    assert traj.rho_b.shape == (11, 6, 6)


def test_evolve_rejects_wrong_shape(small_params):
    L = build_liouvillian(small_params)
    with pytest.raises(ValueError):
        evolve(np.eye(4) / 4, L, small_params.schedule(), 1.0)


def test_limit_cycle_is_periodic(small_params):
    L = build_liouvillian(small_params)
    state, period = limit_cycle(thermo.initial_state(small_params), L, small_params.schedule(), tol=1e-9, samples_per_period=50)
    assert period.meta["residual"] < 1e-9
    assert period.meta["cycles"] == len(period.meta["residual_history"])
    assert trace_distance(period.final_state.data, state.data) < 1e-8


def test_limit_cycle_convergence_error(small_params):
    L = build_liouvillian(small_params)
    with pytest.raises(ConvergenceError) as err:
        limit_cycle(thermo.initial_state(small_params), L, small_params.schedule(), tol=1e-12, max_cycles=2)
    assert err.value.cycles == 2 and err.value.residual > 1e-12


def test_limit_cycle_independent_of_initial_state(small_params, rng):
    L = build_liouvillian(small_params)
    a, _ = limit_cycle(thermo.initial_state(small_params), L, small_params.schedule(), tol=1e-10, samples_per_period=20)
    # a generic initial state occupies every block and must reach the same cycle
    b, _ = limit_cycle(random_density(L.dim, rng), L, small_params.schedule(), tol=1e-10, samples_per_period=20)
    assert trace_distance(a.data, b.data) < 1e-8


def test_check_state_thresholds():
    good = np.eye(3) / 3
    check_state(good)
    with pytest.warns(RuntimeWarning):
        check_state(good + np.diag([2e-7, 0, 0]))
    with pytest.raises(InvariantViolation):
        check_state(good + np.diag([1e-5, 0, 0]))
    assert state_residuals(np.diag([1.0, 0.0]))[2] == pytest.approx(0.0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_trace_distance_metric(seed):
    r = np.random.default_rng(seed)
    a, b, c = (random_density(4, r) for _ in range(3))
    assert trace_distance(a, a) < 1e-12
    assert 0 <= trace_distance(a, b) <= 1 + 1e-12
    assert trace_distance(a, b) == pytest.approx(trace_distance(b, a))
    assert trace_distance(a, c) <= trace_distance(a, b) + trace_distance(b, c) + 1e-12


def test_thermal_fixed_point_without_coupling():
    p = EngineParams(dim_a=4, dim_b=6, g=0.0)
    L = build_liouvillian(p)
    rho0 = np.kron(thermal_state(4, p.nbar_a), thermal_state(6, p.nbar_b))
    sched = DriveSchedule.constant(False, period=p.drive_period)
    out = evolve(rho0, L, sched, 3 * p.drive_period, backend="rk4").final_state.data
    assert trace_distance(out, rho0) < 1e-7
