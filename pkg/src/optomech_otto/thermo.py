"""Effective Otto cycle and engine figures of merit.

All quantities are in simulation units (hbar = k_B = omega_b = 1) unless a
docstring says otherwise.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lindblad import DensityMatrix, build_liouvillian, dissipator_apply, limit_cycle, trace_distance
from .model import CouplingKind, stability_check, temperature_from_occupation
from .states import (
    effective_temperature,
    ergotropy,
    gibbs_state,
    max_extractable_work,
    quadrature_stats,
    thermal_state,
)

log = logging.getLogger(__name__)

BRANCHES = ("A->B", "B->C'", "C'->C", "C->D", "D->A'", "A'->A")
MAIN_BRANCHES = ("A->B", "B->C'", "C->D", "D->A'")


class UnconvergedCycleError(ValueError):
    pass


def default_load_grid(points=25):
    """Logarithmic load grid over [1e-3, 1e2] omega_b."""
    return np.logspace(-3, 2, points)


def effective_frequency(rho, params):
    """``omega_a + g <q^2>`` (``g <q>`` for linear coupling) of a joint state.

    The cavity photon number and the mechanical moment are factorized here,
    so only the mechanical marginal enters.
    """
    rho = rho.data if isinstance(rho, DensityMatrix) else rho
    s = params.space
    op = s.q @ s.q if params.coupling is CouplingKind.QUADRATIC else s.q
    return params.omega_a + params.g * float(np.real((op.multiply(rho.T)).sum()))


def _omega_eff_series(traj, params):
    key = "q2" if params.coupling is CouplingKind.QUADRATIC else "q"
    return params.omega_a + params.g * np.asarray(traj.observables[key])


@dataclass
class CycleDiagram:
    t: np.ndarray
    omega_eff: np.ndarray
    n_a: np.ndarray
    U_a: np.ndarray
    S_a: np.ndarray
    T_eff: np.ndarray
    drive: np.ndarray
    branch: np.ndarray
    closed: bool
    closure_error: float

    def columns(self):
        return {
            "t": self.t,
            "omega_eff": self.omega_eff,
            "n_a": self.n_a,
            "U_a": self.U_a,
            "S_a": self.S_a,
            "T_eff": self.T_eff,
            "drive": self.drive,
            "branch": self.branch,
        }

    def branches_present(self):
        return [b for b in BRANCHES if np.any(self.branch == b)]

    def branch_mean(self, name, column):
        mask = self.branch == name
        if not np.any(mask):
            return math.nan
        return float(np.mean(getattr(self, column)[mask]))


def _label_branches(omega, n_a, drive, plateau_frac=0.05):
    """Assign Otto-stroke labels along one period.

    Each constant-drive run starts with an isochoric stroke that lasts until
    the photon number is within ``plateau_frac`` of its end-of-run value.
    The rest of the run is the adiabatic stroke where omega_eff moves in the
    expected direction (down while heating, up while cooling) and a
    transitional stage where it does not.
    """
    labels = np.empty(len(omega), dtype=object)
    domega = np.gradient(omega)
    runs = np.split(np.arange(len(drive)), np.flatnonzero(np.diff(drive)) + 1)
    for run in runs:
        heating = drive[run[0]] == 1
        start = n_a[run[0] - 1] if run[0] > 0 else n_a[run[0]]
        end = n_a[run[-1]]
        swing = abs(end - start)
        relaxing = np.abs(n_a[run] - end) > plateau_frac * swing
        # the isochore is the leading stretch before the photon number settles
        iso = np.zeros(len(run), dtype=bool)
        if relaxing.any():
            iso[: np.flatnonzero(relaxing)[-1] + 1] = True
        if heating:
            along = domega[run] < 0
            names = ("A->B", "B->C'", "C'->C")
        else:
            along = domega[run] > 0
            names = ("C->D", "D->A'", "A'->A")
        labels[run] = np.where(iso, names[0], np.where(along, names[1], names[2]))
    return labels


def cycle_diagram(period_traj, params, closure_tol=1e-6, plateau_frac=0.05):
    """Per-sample effective Otto quantities over one converged period.

    ``S_a`` is the Von Neumann entropy of the reduced cavity state and
    ``T_eff = omega_eff / ln(1 + 1/<n_a>)``. Closure is the trace distance
    between the first and last reduced states, the metric of the limit-cycle
    search.

    Raises:
        ValueError: fewer than 200 samples.
        UnconvergedCycleError: the first and last samples disagree by more
            than ``closure_tol``.
    """
    if len(period_traj) < 200:
        raise ValueError(f"cycle diagram needs >= 200 samples per period, got {len(period_traj)}")
    t = np.asarray(period_traj.times)
    span = t[-1] - t[0]
    if abs(span - params.drive_period) > 1e-9 * params.drive_period:
        raise ValueError(f"trajectory spans {span}, not one drive period {params.drive_period}")
    omega = _omega_eff_series(period_traj, params)
    n_a = np.asarray(period_traj.observables["n_a"])
    S_a = np.asarray(period_traj.observables["S_a"])
    T_eff = np.array([effective_temperature(n, w) for n, w in zip(n_a, omega)])
    U_a = omega * n_a
    # same metric as the limit-cycle residual, applied to each reduced state
    closure = max(
        trace_distance(period_traj.rho_a[-1], period_traj.rho_a[0]),
        trace_distance(period_traj.rho_b[-1], period_traj.rho_b[0]),
    )
    if not closure < closure_tol:
        raise UnconvergedCycleError(f"cycle does not close: endpoint mismatch {closure:.3e} >= {closure_tol:.1e}")
    drive = np.asarray(period_traj.drive)
    branch = _label_branches(omega, n_a, drive, plateau_frac)
    return CycleDiagram(t, omega, n_a, U_a, S_a, T_eff, drive, branch, True, float(closure))


def _shoelace(x, y):
    x = np.append(x, x[0])
    y = np.append(y, y[0])
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def cycle_area(diagram, plane="T_vs_S"):
    """Signed area of the closed cycle, positive for engine operation.

    ``"T_vs_S"`` gives the loop integral of ``T_eff dS_a`` (the cycle work W_a;
    engines run clockwise with S on the abscissa). ``"U_vs_omega"`` gives the
    Otto work ``∮ omega_eff d<n_a> = -∮ <n_a> d omega_eff`` read off the
    ``(omega_eff, U_a = omega_eff <n_a>)`` diagram.
    """
    if not diagram.closed:
        raise UnconvergedCycleError("cycle_area needs a closed diagram")
    if plane == "T_vs_S":
        return -_shoelace(diagram.S_a, diagram.T_eff)
    if plane == "U_vs_omega":
        return _shoelace(diagram.omega_eff, diagram.n_a)
    raise ValueError(f"unknown plane {plane!r}")


def heat_intake(diagram):
    """``∫ T_eff dS_a`` over drive-on intervals where the entropy rises."""
    T_mid = 0.5 * (diagram.T_eff[1:] + diagram.T_eff[:-1])
    dS = np.diff(diagram.S_a)
    on = diagram.drive[1:] == 1
    mask = on & (dS > 0)
    return float(np.sum(T_mid[mask] * dS[mask]))


@dataclass
class DissipatedPower:
    series: np.ndarray
    max: float
    mean: float


def dissipated_internal_power(traj, params, rate=None):
    """``omega_b * rate * (<n_b>(t) - nbar_b)`` along a trajectory.

    ``rate`` defaults to the intrinsic damping ``kappa_b``; pass ``kappa_L``
    for the power delivered to a load. The mean excludes the duplicated
    endpoint of a closed period.
    """
    rate = params.kappa_b if rate is None else rate
    series = params.omega_b * rate * (np.asarray(traj.observables["n_b"]) - params.nbar_b)
    body = series[:-1] if len(series) > 1 else series
    return DissipatedPower(series, float(series.max()) if len(series) else math.nan, float(body.mean()) if len(body) else math.nan)


def dissipated_power_from_channel(rho, params, rate=None):
    """Energy flux into the mechanical bath from the dissipator itself.

    ``-Tr[omega_b n_b rate((nbar+1) D[b] rho + nbar D[b†] rho)]``; agrees with
    :func:`dissipated_internal_power` for any state.
    """
    rate = params.kappa_b if rate is None else rate
    s = params.space
    rho = rho.data if isinstance(rho, DensityMatrix) else rho
    b = s.b.toarray()
    drho = (params.nbar_b + 1) * dissipator_apply(b, rho) + params.nbar_b * dissipator_apply(b.conj().T, rho)
    nb = s.n_b
    return -params.omega_b * rate * float(np.real((nb.multiply(drho.T)).sum()))


def mechanical_hamiltonian(params):
    return params.omega_b * np.diag(np.arange(params.dim_b, dtype=float)).astype(complex)


@dataclass
class FigureOfMerit:
    kind: str
    value: float
    params_hash: str
    label: str = ""

    def __post_init__(self):
        if not self.params_hash:
            raise ValueError("figure of merit needs a provenance hash")


@dataclass
class EngineSolution:
    """Converged limit cycle of one configuration and its derived quantities."""

    params: object
    state: DensityMatrix
    period: object
    solver: dict = field(default_factory=dict)

    def cycle(self, closure_tol=1e-6):
        return cycle_diagram(self.period, self.params, closure_tol=closure_tol)

    def dip(self):
        return dissipated_internal_power(self.period, self.params)

    def load_power(self):
        return dissipated_internal_power(self.period, self.params, rate=self.params.kappa_L)

    @property
    def bath_temperature(self):
        return temperature_from_occupation(self.params.nbar_b, self.params.omega_b)

    def delta_F_series(self):
        H = mechanical_hamiltonian(self.params)
        T = self.bath_temperature
        return np.array([max_extractable_work(r, H, T) for r in self.period.rho_b])

    def delta_F(self):
        """Largest free-energy work capacity of the mechanical mode over the period."""
        return float(self.delta_F_series().max())

    def ergotropy_series(self):
        H = mechanical_hamiltonian(self.params)
        return np.array([ergotropy(r, H) for r in self.period.rho_b])

    def ergotropy(self):
        return float(self.ergotropy_series().max())

    def rho_b(self, index=0):
        return self.period.rho_b[index]

    def squeezing(self, index=0):
        return quadrature_stats(self.rho_b(index))

    def foms(self):
        """Figures of merit keyed by kind."""
        h = self.params.params_hash()
        dip = self.dip()
        out = {
            "dip_max": FigureOfMerit("dip_max", dip.max, h, "max over cycle"),
            "dip_mean": FigureOfMerit("dip_mean", dip.mean, h, "cycle average"),
            "delta_F": FigureOfMerit("delta_F", self.delta_F(), h, "max over cycle"),
            "ergotropy": FigureOfMerit("ergotropy", self.ergotropy(), h, "max over cycle"),
        }
        if self.params.kappa_L > 0:
            lp = self.load_power()
            out["load_power"] = FigureOfMerit("load_power", lp.max, h, "max over cycle")
            out["load_power_mean"] = FigureOfMerit("load_power_mean", lp.mean, h, "cycle average")
        try:
            diagram = self.cycle()
        except UnconvergedCycleError as exc:
            log.warning("cycle diagram skipped: %s", exc)
        else:
            W = cycle_area(diagram, "T_vs_S")
            Q = heat_intake(diagram)
            out["cycle_work"] = FigureOfMerit("cycle_work", W, h, "T-S loop area")
            out["heat_in"] = FigureOfMerit("heat_in", Q, h, "heating-branch T dS")
            out["efficiency"] = FigureOfMerit("efficiency", W / Q if Q else math.nan, h, "W_a/Q_in")
        return out


def initial_state(params):
    """Thermal cavity and mechanics at their bath occupations."""
    return np.kron(thermal_state(params.dim_a, params.nbar_a), thermal_state(params.dim_b, params.nbar_b))


def solve_engine(params, tol=1e-7, max_cycles=2000, backend="auto", samples_per_period=400, dt=None, rho0=None):
    """Find the limit cycle of ``params`` starting from the thermal state."""
    L = build_liouvillian(params)
    rho0 = initial_state(params) if rho0 is None else rho0
    state, period = limit_cycle(
        rho0,
        L,
        params.schedule(),
        tol=tol,
        max_cycles=max_cycles,
        backend=backend,
        samples_per_period=samples_per_period,
        dt=dt,
    )
    return EngineSolution(params, state, period, dict(period.meta))


def power_under_load(params, kappa_L, **solver):
    """Peak power delivered to a load of strength ``kappa_L``.

    The limit cycle is re-solved with mechanical damping ``kappa_b + kappa_L``
    and ``omega_b kappa_L (<n_b> - nbar_b)`` is taken at its cycle maximum.
    """
    if kappa_L < 0:
        raise ValueError("kappa_L must be >= 0")
    sol = solve_engine(params.replace(kappa_L=kappa_L), **solver)
    return sol.load_power().max


@dataclass
class SweepRow:
    axis: str
    value: float
    coupling: str
    stable: bool
    foms: dict = field(default_factory=dict)
    error: str = None

    def get(self, kind):
        f = self.foms.get(kind)
        return f.value if f is not None else math.nan


def _sweep_point(args):
    params, axis, value, solver, force = args
    p = params.replace(**{axis: value})
    stable = stability_check(p)
    row = SweepRow(axis, float(value), p.coupling.value, stable)
    if not stable and not force:
        row.error = "unstable"
        return row
    try:
        row.foms = solve_engine(p, **solver).foms()
    except Exception as exc:  # one failed point must not sink the table
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def sweep(params, axis, values, couplings=None, workers=1, force=False, **solver):
    """Independent limit-cycle solves along ``axis``.

    Args:
        axis: ``"nbar_h"`` or ``"kappa_L"``.
        values: axis values, processed and returned in input order.
        couplings: coupling kinds to run (default: only ``params.coupling``).
        workers: process count; 1 runs serially.
        force: also solve points that fail the stability check.

    Returns:
        list of :class:`SweepRow`, coupling-major.
    """
    if axis not in ("nbar_h", "kappa_L"):
        raise ValueError(f"unsupported sweep axis {axis!r}")
    couplings = [params.coupling] if couplings is None else [CouplingKind(c) for c in couplings]
    jobs = [(params.replace(coupling=c), axis, v, solver, force) for c in couplings for v in values]
    if not jobs:
        return []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(j) for j in jobs]


def load_curve(params, kappa_L_values=None, **solver):
    """Peak load power for each load strength; returns ``(kappa_L, P_L)`` arrays."""
    grid = default_load_grid() if kappa_L_values is None else np.asarray(kappa_L_values, dtype=float)
    P = np.array([power_under_load(params, k, **solver) if k > 0 else 0.0 for k in grid])
    return grid, P


def is_single_interior_peak(values):
    """True when the sequence rises to one maximum away from both ends and then falls."""
    v = np.asarray(values, dtype=float)
    k = int(np.argmax(v))
    if k == 0 or k == len(v) - 1:
        return False
    return bool(np.all(np.diff(v[: k + 1]) > 0) and np.all(np.diff(v[k:]) < 0))


def compare_couplings(params, kappa_L_values=None, **solver):
    """Quadratic versus linear coupling at identical parameters."""
    rows = []
    for kind in (CouplingKind.QUADRATIC, CouplingKind.LINEAR):
        p = params.replace(coupling=kind, kappa_L=0.0)
        sol = solve_engine(p, **solver)
        grid, P = load_curve(p, kappa_L_values, **solver)
        k = int(np.argmax(P))
        sq = sol.squeezing()
        rows.append(
            {
                "coupling": kind.value,
                "dip_max": sol.dip().max,
                "dip_mean": sol.dip().mean,
                "load_power_max": float(P[k]),
                "kappa_L_opt": float(grid[k]),
                "delta_F": sol.delta_F(),
                "ergotropy": sol.ergotropy(),
                "min_variance": sq.min_variance,
                "max_variance": sq.max_variance,
                "mean_q": sq.q,
            }
        )
    return rows


__all__ = [
    "CycleDiagram",
    "DissipatedPower",
    "EngineSolution",
    "FigureOfMerit",
    "SweepRow",
    "compare_couplings",
    "cycle_area",
    "cycle_diagram",
    "default_load_grid",
    "dissipated_internal_power",
    "dissipated_power_from_channel",
    "effective_frequency",
    "heat_intake",
    "is_single_interior_peak",
    "load_curve",
    "power_under_load",
    "solve_engine",
    "sweep",
    "gibbs_state",
]
