"""Moment hierarchy for the quadratic coupling, closed by factorization.

The photon-number line ``d<n_a>/dt = A - B <n_a>`` is exact. Every other
moment couples to six-operator correlators ``<n_a^2 X>``, which are closed as
``<n_a^2 X> ≈ λ <n_a X>`` with

* ``"thermal"`` (default): ``λ = 2<n_a> + 1``, exact for a thermal cavity
  uncorrelated with X
* ``"mean_field"``: ``λ = <n_a>``, which drops photon-number fluctuations and
  badly underestimates the mechanical heating

Two right-hand sides are available. ``"derived"`` follows from the adjoint
master equation in the minimal set ``<n_a>, <n_b>, <b^2>, <n_a n_b>,
<n_a b^2>``. ``"printed"`` is a seven-line hierarchy with different coupling terms,
kept term by term so the two can be compared against the full solver.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from .model import CouplingKind, photon_rates

CLOSURES = ("mean_field", "thermal")
VARIANTS = ("derived", "printed")


class MomentInstabilityError(RuntimeError):
    pass


@dataclass
class MomentState:
    """Expectation values tracked by the hierarchy.

    ``c_*`` are cavity-weighted correlators: ``c_qp = <n_a(qp + pq)>``,
    ``c_q2 = <n_a q^2>``, ``c_p2 = <n_a p^2>``, ``c_nn = <n_a n_b>`` and
    ``c_b2 = <n_a b†^2>``. ``b2 = <b†^2>`` is the mechanical-only moment the
    derived equations need.
    """

    n_a: complex = 0.0
    n_b: complex = 0.0
    c_qp: complex = 0.0
    c_q2: complex = 0.0
    c_p2: complex = 0.0
    c_nn: complex = 0.0
    c_b2: complex = 0.0
    b2: complex = 0.0

    def as_vector(self):
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=complex)

    @classmethod
    def from_vector(cls, v):
        return cls(*(complex(x) for x in v))

    @classmethod
    def from_minimal(cls, n_a, n_b, beta, N, Beta):
        """Build from ``<n_a>, <n_b>, <b^2>, <n_a n_b>, <n_a b^2>``."""
        return cls(
            n_a=n_a,
            n_b=n_b,
            c_qp=4 * np.imag(Beta),
            c_q2=2 * np.real(Beta) + 2 * N + n_a,
            c_p2=-2 * np.real(Beta) + 2 * N + n_a,
            c_nn=N,
            c_b2=np.conj(Beta),
            b2=np.conj(beta),
        )

    @classmethod
    def thermal(cls, nbar_a, nbar_b):
        """Uncorrelated thermal modes."""
        return cls.from_minimal(nbar_a, nbar_b, 0.0, nbar_a * nbar_b, 0.0)

    @classmethod
    def from_density_matrix(cls, rho, space):
        """Exact moments of a joint density matrix."""
        ev = lambda op: complex((op.multiply(rho.T)).sum())
        b2 = space.b @ space.b
        return cls.from_minimal(
            ev(space.n_a).real,
            ev(space.n_b).real,
            ev(b2),
            ev(space.n_a @ space.n_b),
            ev(space.n_a @ b2),
        )

    @property
    def q2(self):
        """Mechanical ``<q^2>`` from ``<n_b>`` and ``<b^2>``."""
        return float(np.real(2 * np.conj(self.b2) + 2 * self.n_b + 1).real)

    @property
    def p2(self):
        return float(np.real(-2 * np.conj(self.b2) + 2 * self.n_b + 1).real)


_IDX = {f.name: i for i, f in enumerate(fields(MomentState))}


def _closure_factor(n_a, closure):
    if closure == "mean_field":
        return n_a
    if closure == "thermal":
        return 2 * n_a + 1
    raise ValueError(f"unknown closure {closure!r}; choose from {CLOSURES}")


def derived_rhs(v, params, drive_on, sixth=None, closure="thermal"):
    """Derivative vector of the derived hierarchy.

    ``sixth`` optionally supplies exact ``(<n_a^2 n_b>, <n_a^2 b^2>, <n_a^2>)``
    in place of the closure, which makes every line exact and is how the
    equations are checked against the master equation.
    """
    A, B = photon_rates(params, drive_on)
    g, wb = params.g, params.omega_b
    kb = params.kappa_b + params.kappa_L
    nb_bath = params.nbar_b
    n_a, n_b = v[0], v[1]
    N = v[5]
    Beta = np.conj(v[6])
    beta = np.conj(v[7])
    Beta_d = v[6]
    if sixth is None:
        lam = _closure_factor(n_a, closure)
        n2_nb, n2_b2, n2 = lam * N, lam * Beta, lam * n_a
        n2_bd2 = lam * Beta_d
    else:
        n2_nb, n2_b2, n2 = sixth
        n2_bd2 = np.conj(n2_b2)
    d_na = A - B * n_a
    d_nb = kb * (nb_bath - n_b) + 2j * g * (Beta - Beta_d)
    d_beta = -(2j * wb + kb) * beta - 2j * g * (2 * N + n_a) - 4j * g * Beta
    d_N = A * n_b - B * N + kb * (nb_bath * n_a - N) + 2j * g * (n2_b2 - n2_bd2)
    d_Beta = A * beta - B * Beta - (2j * wb + kb) * Beta - 2j * g * (2 * n2_nb + n2) - 4j * g * n2_b2
    return MomentState.from_minimal(d_na, d_nb, d_beta, d_N, d_Beta).as_vector()


def printed_rhs(v, params, drive_on):
    """Right-hand side of the alternative seven-line hierarchy, term by term.

    Six-operator correlators use the mean-field closure. ``b2`` is not part
    of that hierarchy and is held fixed.
    """
    A, B = photon_rates(params, drive_on)
    g, wb = params.g, params.omega_b
    kb = params.kappa_b + params.kappa_L
    nb_bath = params.nbar_b
    n_a, n_b, c_qp, c_q2, c_p2, c_nn, c_b2, _ = v
    out = np.zeros(8, dtype=complex)
    out[0] = A - B * n_a
    out[1] = kb * (nb_bath - n_b) + g * c_qp
    out[2] = A - B * c_qp - (wb - 1j * kb) * (c_q2 - c_p2) + 8j * g * n_a * c_q2 - 4j * kb * c_b2
    out[3] = A - B * c_q2 + (wb - 0.5j * kb) * c_qp + 2 * kb * (nb_bath - c_nn + c_b2)
    out[4] = A - B * c_p2 - (wb + 0.5j * kb) * c_qp + 2 * kb * (nb_bath - c_nn + c_b2) + 4 * g * n_a * c_qp
    out[5] = A - B * c_nn + kb * (nb_bath - c_nn) + 2 * g * n_a * c_qp
    out[6] = A + (2j * (wb + 2 * g) - B - kb * nb_bath) * c_b2 - 2j * g * (2 * c_nn + n_a)
    return out


def moment_rhs(state, params, drive_on, variant="derived", closure="thermal"):
    """Time derivative of a :class:`MomentState`."""
    if params.coupling is not CouplingKind.QUADRATIC:
        raise ValueError("the moment hierarchy is defined for quadratic coupling only")
    v = state.as_vector()
    if variant == "derived":
        dv = derived_rhs(v, params, drive_on, closure=closure)
    elif variant == "printed":
        dv = printed_rhs(v, params, drive_on)
    else:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return MomentState.from_vector(dv)


@dataclass
class MomentTrajectory:
    times: np.ndarray
    values: np.ndarray  # (n_samples, 8), columns in MomentState field order
    drive: np.ndarray

    def __len__(self):
        return len(self.times)

    def column(self, name):
        return self.values[:, _IDX[name]]

    def state(self, i):
        return MomentState.from_vector(self.values[i])

    def observables(self):
        """Columns shared with the Lindblad observable dump."""
        n_b = self.column("n_b").real
        bd2 = self.column("b2")
        return {
            "n_a": self.column("n_a").real,
            "n_b": n_b,
            "q2": (2 * np.real(bd2) + 2 * n_b + 1),
            "p2": (-2 * np.real(bd2) + 2 * n_b + 1),
        }


def _rk4(f, v, h, n):
    for _ in range(n):
        k1 = f(v)
        k2 = f(v + 0.5 * h * k1)
        k3 = f(v + 0.5 * h * k2)
        k4 = f(v + h * k3)
        v = v + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return v


def integrate_moments(
    initial,
    params,
    schedule,
    t_final,
    sample_every=None,
    dt=None,
    variant="derived",
    closure="thermal",
    t0=0.0,
):
    """Fixed-step RK4 integration of the hierarchy with drive switching.

    Raises:
        MomentInstabilityError: when |n_a| or |n_b| exceeds 1e6.
    """
    if params.coupling is not CouplingKind.QUADRATIC:
        raise ValueError("the moment hierarchy is defined for quadratic coupling only")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    dt = dt if dt is not None else 1e-3 * schedule.period
    if sample_every is None or sample_every <= 0:
        sample_every = t_final - t0
    rhs = {}
    for on in (True, False):
        if variant == "derived":
            rhs[on] = lambda v, on=on: derived_rhs(v, params, on, closure=closure)
        else:
            rhs[on] = lambda v, on=on: printed_rhs(v, params, on)
    v = initial.as_vector() if isinstance(initial, MomentState) else np.asarray(initial, dtype=complex)
    n_samples = int(math.floor((t_final - t0) / sample_every + 1e-9))
    grid = [t0 + k * sample_every for k in range(n_samples + 1)]
    if t_final - grid[-1] > 1e-9 * sample_every:
        grid.append(t_final)
    times, values, drive = [grid[0]], [v.copy()], [schedule.value(grid[0])]
    for a, b in zip(grid[:-1], grid[1:]):
        for s, e, on in schedule.segments(a, b):
            n = max(1, math.ceil((e - s) / dt - 1e-9))
            h = (e - s) / n
            # advance in short bursts so a blow-up is caught before it overflows
            done = 0
            while done < n:
                burst = min(n - done, 256)
                v = _rk4(rhs[on], v, h, burst)
                done += burst
                if not (abs(v[0]) < 1e6 and abs(v[1]) < 1e6) or not np.all(np.isfinite(v)):
                    t_now = s + done * h
                    raise MomentInstabilityError(
                        f"moment hierarchy diverged by t={t_now:.3f} (n_a={v[0]:.3e}, n_b={v[1]:.3e})"
                    )
        times.append(b)
        values.append(v.copy())
        drive.append(schedule.value(0.5 * (a + b)))
    return MomentTrajectory(np.asarray(times), np.asarray(values), np.asarray(drive, dtype=int))


def moment_limit_cycle(
    params,
    schedule,
    initial=None,
    tol=1e-9,
    max_cycles=2000,
    samples_per_period=400,
    dt=None,
    variant="derived",
    closure="thermal",
):
    """Integrate whole periods until the stroboscopic moments settle, then sample one period."""
    T = schedule.period
    state = initial if initial is not None else MomentState.thermal(params.nbar_a, params.nbar_b)
    v = state.as_vector()
    for cycle in range(1, max_cycles + 1):
        traj = integrate_moments(v, params, schedule, T, dt=dt, variant=variant, closure=closure)
        v_next = traj.values[-1]
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        if residual < tol:
            break
    else:
        raise MomentInstabilityError(f"moment limit cycle not reached in {max_cycles} cycles (residual {residual:.3e})")
    out = integrate_moments(
        v, params, schedule, T, sample_every=T / samples_per_period, dt=dt, variant=variant, closure=closure
    )
    return out
