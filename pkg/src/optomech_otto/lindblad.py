"""Piecewise-constant Lindblad dynamics of the periodically driven engine.

Superoperators act on column-stacked density matrices,
``vec(rho)[i + D*j] = rho[i, j]``, so that ``vec(A rho B) = (B^T ⊗ A) vec(rho)``.

The generator only switches at drive edges, so a period is two constant
segments. Both segments leave the same index blocks of ``vec(rho)`` invariant
(photon-number coherence order, and mechanical parity for quadratic
coupling); the blocks are discovered from the sparsity graph and each one is
propagated on its own.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy.sparse.csgraph import connected_components

from .model import build_hamiltonian
from .states import entropy_vn, partial_trace

log = logging.getLogger(__name__)

TRACE_TOL = 1e-8
HERMITIAN_TOL = 1e-10
POSITIVITY_TOL = 1e-8

# blocks above this size use Krylov expm_multiply instead of a dense propagator
DENSE_BLOCK_LIMIT = 2000
# RK4 is stable on the negative real axis up to |h*lambda| ~ 2.78
RK4_STABILITY = 2.5


class InvariantViolation(RuntimeError):
    """A sampled state left the density-matrix manifold beyond tolerance."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, cycles=None):
        super().__init__(message)
        self.residual = residual
        self.cycles = cycles


class StepSizeUnderflow(RuntimeError):
    pass


def vec(rho):
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v, dim):
    return np.asarray(v).reshape(dim, dim, order="F")


def spre(A):
    A = sp.csr_matrix(A)
    return sp.kron(sp.identity(A.shape[0], format="csr"), A, format="csr")


def spost(A):
    A = sp.csr_matrix(A)
    return sp.kron(A.T, sp.identity(A.shape[0], format="csr"), format="csr")


def sprepost(A, B):
    """Superoperator of ``rho -> A rho B``."""
    return sp.kron(sp.csr_matrix(B).T, sp.csr_matrix(A), format="csr")


def dissipator(jump):
    """Superoperator of ``D[L] rho = L rho L† - (L†L rho + rho L†L)/2``."""
    L = sp.csr_matrix(jump)
    Ld = L.conj().T.tocsr()
    LdL = Ld @ L
    return (sprepost(L, Ld) - 0.5 * spre(LdL) - 0.5 * spost(LdL)).tocsr()


def dissipator_apply(jump, rho):
    """Apply ``D[L]`` directly to a matrix."""
    L = jump.toarray() if sp.issparse(jump) else np.asarray(jump)
    rho = np.asarray(rho)
    if L.shape != rho.shape:
        raise ValueError(f"jump operator shape {L.shape} does not match state shape {rho.shape}")
    Ld = L.conj().T
    LdL = Ld @ L
    return L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)


def hamiltonian_superop(H):
    return (-1j * (spre(H) - spost(H))).tocsr()


def thermal_channel(jump, rate, nbar):
    """``rate[(nbar+1) D[L] + nbar D[L†]]``."""
    L = sp.csr_matrix(jump)
    return (rate * (nbar + 1) * dissipator(L) + rate * nbar * dissipator(L.conj().T)).tocsr()


@dataclass(frozen=True)
class DensityMatrix:
    data: np.ndarray
    time: float = 0.0

    @property
    def dim(self):
        return self.data.shape[0]

    def expect(self, op):
        if sp.issparse(op):
            return complex((op.multiply(self.data.T)).sum())
        return complex(np.einsum("ij,ji->", op, self.data))

    def residuals(self):
        return state_residuals(self.data)


def state_residuals(rho):
    """Return ``(|tr - 1|, max|rho - rho†|, min eigenvalue)``."""
    rho = np.asarray(rho)
    herm = float(np.max(np.abs(rho - rho.conj().T))) if rho.size else 0.0
    min_eig = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])
    return abs(np.trace(rho) - 1.0), herm, min_eig


def check_state(rho, time=None, warn_factor=10.0, abort_factor=100.0):
    """Warn at ``warn_factor`` and raise at ``abort_factor`` times the tolerances."""
    tr, herm, min_eig = state_residuals(rho)
    worst = max(tr / TRACE_TOL, herm / HERMITIAN_TOL, -min_eig / POSITIVITY_TOL)
    if worst > abort_factor:
        raise InvariantViolation(
            f"state at t={time} violates invariants: trace err {tr:.3e}, "
            f"hermiticity err {herm:.3e}, min eigenvalue {min_eig:.3e}"
        )
    if worst > warn_factor:
        warnings.warn(
            f"state at t={time} near invariant limits: trace err {tr:.3e}, "
            f"hermiticity err {herm:.3e}, min eigenvalue {min_eig:.3e}",
            RuntimeWarning,
            stacklevel=3,
        )
    return tr, herm, min_eig


def trace_distance(rho, sigma):
    delta = np.asarray(rho) - np.asarray(sigma)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (delta + delta.conj().T)))))


@dataclass
class Liouvillian:
    """Generators of the drive-off and drive-on segments (sparse, column stacking)."""

    segment_off: sp.csr_matrix
    segment_on: sp.csr_matrix
    dims: tuple
    hot_channel: sp.csr_matrix = None
    mechanical_channel: sp.csr_matrix = None

    @property
    def dim(self):
        return self.dims[0] * self.dims[1]

    def generator(self, drive_on):
        return self.segment_on if drive_on else self.segment_off

    def apply(self, rho, drive_on):
        rho = rho.data if isinstance(rho, DensityMatrix) else rho
        return unvec(self.generator(drive_on) @ vec(rho), self.dim)

    @cached_property
    def blocks(self):
        """Index sets of ``vec(rho)`` that both generators leave invariant."""
        pattern = (abs(self.segment_on) + abs(self.segment_off)).tocsr()
        n, labels = connected_components(pattern, directed=False)
        order = np.argsort(labels, kind="stable")
        bounds = np.flatnonzero(np.diff(labels[order])) + 1
        return [np.sort(chunk) for chunk in np.split(order, bounds)]


def build_liouvillian(params):
    """Assemble the drive-off and drive-on generators of the master equation.

    Mechanical damping is ``kappa_b + kappa_L`` so a load enters as extra
    friction at the same bath occupation.
    """
    s = params.space
    H = build_hamiltonian(params)
    off = hamiltonian_superop(H)
    off = off + thermal_channel(s.a, params.kappa_a, params.nbar_a)
    mech = thermal_channel(s.b, params.kappa_b + params.kappa_L, params.nbar_b)
    off = (off + mech).tocsr()
    hot = thermal_channel(s.a, params.kappa_h, params.nbar_h)
    on = (off + hot).tocsr()
    return Liouvillian(
        segment_off=off,
        segment_on=on,
        dims=(params.dim_a, params.dim_b),
        hot_channel=hot,
        mechanical_channel=mech,
    )


@dataclass
class Trajectory:
    """Time-ordered samples of an evolution.

    ``drive[i]`` is the drive state of the interval that ends at ``times[i]``
    (for the first sample, the interval that starts there).
    """

    times: np.ndarray
    dims: tuple
    record_mode: str = "full_state"
    states: list = None
    rho_a: np.ndarray = None
    rho_b: np.ndarray = None
    observables: dict = field(default_factory=dict)
    drive: np.ndarray = None
    final_state: DensityMatrix = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)


OBSERVABLE_COLUMNS = ("n_a", "n_b", "q", "p", "q2", "p2", "qp", "S_a")


def _record(rho, dims):
    rho_a = partial_trace(rho, dims, keep="optical")
    rho_b = partial_trace(rho, dims, keep="mechanical")
    nb = dims[1]
    b = np.diag(np.sqrt(np.arange(1, nb, dtype=float)), 1)
    q = b + b.T
    p = 1j * (b.T - b)
    obs = {
        "n_a": float(np.real(np.trace(rho_a @ np.diag(np.arange(dims[0], dtype=float))))),
        "n_b": float(np.real(np.trace(rho_b @ np.diag(np.arange(nb, dtype=float))))),
        "q": float(np.real(np.trace(rho_b @ q))),
        "p": float(np.real(np.trace(rho_b @ p))),
        "q2": float(np.real(np.trace(rho_b @ q @ q))),
        "p2": float(np.real(np.trace(rho_b @ p @ p))),
        "qp": float(np.real(np.trace(rho_b @ (q @ p + p @ q)))) / 2,
        "S_a": entropy_vn(rho_a),
    }
    return rho_a, rho_b, obs


class _Propagator:
    """Advances ``vec(rho)`` over constant-drive intervals, block by block."""

    def __init__(self, liouvillian, backend, period, dt=None, active=None):
        if backend not in ("expm", "rk4"):
            raise ValueError(f"unknown backend {backend!r}")
        self.L = liouvillian
        self.backend = backend
        self.period = period
        self.dt = dt if dt is not None else 1e-3 * period
        blocks = liouvillian.blocks
        if active is not None:
            blocks = [idx for idx in blocks if np.any(active[idx] != 0)]
        self.blocks = blocks
        self._gen = {}
        self._dense = {}
        self._rk4_dt = {}

    def generator(self, i, on):
        key = (i, on)
        if key not in self._gen:
            idx = self.blocks[i]
            self._gen[key] = self.L.generator(on)[idx][:, idx].tocsr()
        return self._gen[key]

    def _key(self, tau):
        return round(tau / self.period, 12)

    def dense(self, i, on, tau):
        key = (i, on, self._key(tau))
        if key in self._dense:
            return self._dense[key]
        # reuse a cached shorter step when tau is an integer multiple of it
        for (j, o, k), E in list(self._dense.items()):
            if j == i and o == on and k > 0:
                ratio = self._key(tau) / k
                n = round(ratio)
                if n >= 2 and abs(ratio - n) < 1e-9:
                    self._dense[key] = np.linalg.matrix_power(E, n)
                    return self._dense[key]
        G = self.generator(i, on).toarray()
        self._dense[key] = la.expm(G * tau)
        return self._dense[key]

    def rk4_step(self, i, on):
        key = (i, on)
        if key not in self._rk4_dt:
            G = self.generator(i, on)
            bound = sla.onenormest(G) if G.shape[0] > 8 else np.abs(G.toarray()).sum(axis=0).max()
            h = self.dt
            if bound * h > RK4_STABILITY:
                h = RK4_STABILITY / bound
                log.info("RK4 step refined to %.3e for block of size %d", h, G.shape[0])
            if h < 1e-9 * self.period:
                raise StepSizeUnderflow(f"RK4 step {h:.3e} below 1e-9 of the period")
            self._rk4_dt[key] = h
        return self._rk4_dt[key]

    def advance(self, v, tau, on):
        if tau <= 0:
            return v
        v = v.copy()
        for i, idx in enumerate(self.blocks):
            x = v[idx]
            if self.backend == "expm":
                if len(idx) <= DENSE_BLOCK_LIMIT:
                    x = self.dense(i, on, tau) @ x
                else:
                    x = sla.expm_multiply(self.generator(i, on) * tau, x)
            else:
                G = self.generator(i, on)
                n = max(1, math.ceil(tau / self.rk4_step(i, on) - 1e-9))
                h = tau / n
                for _ in range(n):
                    k1 = G @ x
                    k2 = G @ (x + 0.5 * h * k1)
                    k3 = G @ (x + 0.5 * h * k2)
                    k4 = G @ (x + h * k3)
                    x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            v[idx] = x
        return v

    def run(self, v, t0, t1, schedule):
        for a, b, on in schedule.segments(t0, t1):
            v = self.advance(v, b - a, on)
        return v


def resolve_backend(backend, dims):
    if backend in (None, "auto"):
        return "expm" if dims[0] * dims[1] <= 100 else "rk4"
    return backend


def _as_density(rho0):
    if isinstance(rho0, DensityMatrix):
        return rho0
    return DensityMatrix(np.asarray(rho0, dtype=complex), 0.0)


def _new_trajectory(dims, record_mode):
    if record_mode not in ("full_state", "observables_only"):
        raise ValueError(f"unknown record mode {record_mode!r}")
    return Trajectory(times=[], dims=tuple(dims), record_mode=record_mode, states=[] if record_mode == "full_state" else None)


def _append(traj, rho, t, drive, check):
    if check:
        check_state(rho, t)
    rho_a, rho_b, obs = _record(rho, traj.dims)
    traj.times.append(t)
    traj.drive.append(drive)
    traj._ra.append(rho_a)
    traj._rb.append(rho_b)
    for k, val in obs.items():
        traj.observables.setdefault(k, []).append(val)
    if traj.states is not None:
        traj.states.append(rho.copy())


def _finish(traj):
    traj.times = np.asarray(traj.times, dtype=float)
    traj.drive = np.asarray(traj.drive, dtype=int)
    d_a, d_b = traj.dims
    traj.rho_a = np.asarray(traj._ra).reshape(-1, d_a, d_a)
    traj.rho_b = np.asarray(traj._rb).reshape(-1, d_b, d_b)
    del traj._ra, traj._rb
    traj.observables = {k: np.asarray(traj.observables.get(k, []), dtype=float) for k in OBSERVABLE_COLUMNS}
    return traj


def _sample(prop, v, t0, t_final, sample_every, schedule, dims, record_mode, check):
    D = dims[0] * dims[1]
    traj = _new_trajectory(dims, record_mode)
    traj.drive, traj._ra, traj._rb = [], [], []
    n_steps = max(1, int(round((t_final - t0) / sample_every)))
    if abs(n_steps * sample_every - (t_final - t0)) > 1e-9 * max(1.0, t_final - t0):
        n_steps = int(math.floor((t_final - t0) / sample_every))
    grid = [t0 + k * sample_every for k in range(n_steps + 1)]
    if t_final - grid[-1] > 1e-9 * sample_every:
        grid.append(t_final)
    _append(traj, unvec(v, D), grid[0], schedule.value(grid[0]), check)
    for a, b in zip(grid[:-1], grid[1:]):
        v = prop.run(v, a, b, schedule)
        _append(traj, unvec(v, D), b, schedule.value(0.5 * (a + b)), check)
    traj.final_state = DensityMatrix(unvec(v, D).copy(), grid[-1])
    return _finish(traj)


def evolve(
    rho0,
    liouvillian,
    schedule,
    t_final,
    sample_every=None,
    backend="auto",
    dt=None,
    record_mode="full_state",
    check=True,
):
    """Integrate the piecewise-constant master equation from ``rho0.time`` to ``t_final``.

    Args:
        rho0: initial :class:`DensityMatrix` (or matrix, taken at t = 0).
        liouvillian: generators from :func:`build_liouvillian`.
        schedule: :class:`DriveSchedule` that switches between them.
        t_final: absolute end time. A value at or before the start time
            returns an empty trajectory.
        sample_every: sampling cadence; defaults to start and end only.
        backend: ``"expm"``, ``"rk4"`` or ``"auto"``.
        dt: RK4 step (default 1e-3 of the drive period, refined for stability).
        record_mode: ``"full_state"`` keeps every joint matrix,
            ``"observables_only"`` keeps observables and reduced states.
        check: verify density-matrix invariants on every sample.

    Returns:
        Trajectory
    """
    rho0 = _as_density(rho0)
    dims = liouvillian.dims
    t0 = float(rho0.time)
    if rho0.data.shape != (liouvillian.dim, liouvillian.dim):
        raise ValueError(f"state shape {rho0.data.shape} does not match Liouvillian dims {dims}")
    if t_final <= t0:
        traj = _new_trajectory(dims, record_mode)
        traj.drive, traj._ra, traj._rb = [], [], []
        traj.final_state = rho0
        return _finish(traj)
    if sample_every is None or sample_every <= 0:
        sample_every = t_final - t0
    backend = resolve_backend(backend, dims)
    v = vec(rho0.data).astype(complex)
    prop = _Propagator(liouvillian, backend, schedule.period, dt=dt, active=v)
    traj = _sample(prop, v, t0, t_final, sample_every, schedule, dims, record_mode, check)
    traj.meta["backend"] = backend
    return traj


def limit_cycle(
    rho0,
    liouvillian,
    schedule,
    tol=1e-7,
    max_cycles=2000,
    backend="auto",
    samples_per_period=400,
    dt=None,
    record_mode=None,
    check=True,
):
    """Iterate whole drive periods until the stroboscopic state stops changing.

    Convergence is declared when the trace distance between successive
    stroboscopic states drops below ``tol``. The converged state is returned
    together with one period sampled ``samples_per_period`` times.

    Raises:
        ConvergenceError: after ``max_cycles`` periods without convergence.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    rho0 = _as_density(rho0)
    dims = liouvillian.dims
    D = liouvillian.dim
    backend = resolve_backend(backend, dims)
    if record_mode is None:
        record_mode = "full_state" if D <= 100 else "observables_only"
    T = schedule.period
    t0 = float(rho0.time)
    v = vec(rho0.data).astype(complex)
    prop = _Propagator(liouvillian, backend, T, dt=dt, active=v)
    step = T / samples_per_period
    if backend == "expm":
        # build the sampling propagator first so whole segments reuse it by powering
        for i, idx in enumerate(prop.blocks):
            if len(idx) <= DENSE_BLOCK_LIMIT:
                for on in (True, False):
                    prop.dense(i, on, step)
    residual = math.inf
    history = []
    rho = unvec(v, D)
    for cycle in range(1, max_cycles + 1):
        v = prop.run(v, t0, t0 + T, schedule)
        rho_next = unvec(v, D)
        residual = trace_distance(rho_next, rho)
        history.append(residual)
        rho = rho_next
        if residual < tol:
            break
    else:
        raise ConvergenceError(
            f"limit cycle not reached after {max_cycles} cycles (residual {residual:.3e})",
            residual=residual,
            cycles=max_cycles,
        )
    if check:
        check_state(rho, t0)
    traj = _sample(prop, v, t0, t0 + T, step, schedule, dims, record_mode, check)
    traj.meta.update(backend=backend, cycles=cycle, residual=residual, residual_history=history)
    return DensityMatrix(rho.copy(), t0), traj
