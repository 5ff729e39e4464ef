"""Physical parameterization of the optomechanical engine.

Units: hbar = k_B = 1 and the mechanical frequency omega_b sets the scale, so
frequencies and rates are multiples of omega_b and times are in 1/omega_b.
"""

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .fock import JointSpace

HBAR = 1.054571817e-34  # J s
K_B = 1.380649e-23  # J / K


class ParameterError(ValueError):
    """Invalid engine parameter; ``key`` names the offending field."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class UndefinedTemperatureError(ValueError):
    pass


class CouplingKind(str, enum.Enum):
    QUADRATIC = "quadratic"
    LINEAR = "linear"


@dataclass(frozen=True)
class DriveSchedule:
    """Square-wave switching of the hot-drive coupling.

    The drive is on for the first ``duty * period`` of every period, measured
    from ``phase``. ``duty=1`` and ``duty=0`` give a permanently on or off drive.
    """

    period: float = 2 * math.pi
    duty: float = 0.5
    phase: float = 0.0

    def __post_init__(self):
        if not self.period > 0:
            raise ParameterError("period", f"must be positive, got {self.period}")
        if not 0.0 <= self.duty <= 1.0:
            raise ParameterError("duty", f"must lie in [0, 1], got {self.duty}")

    @classmethod
    def constant(cls, on, period=2 * math.pi):
        return cls(period=period, duty=1.0 if on else 0.0)

    def value(self, t):
        return drive_value(self, t)

    def segments(self, t0, t1):
        """Split ``[t0, t1]`` into ``(start, stop, drive_on)`` pieces of constant drive."""
        if t1 <= t0:
            return []
        breaks = {t0, t1}
        if 0.0 < self.duty < 1.0:
            k0 = math.floor((t0 - self.phase) / self.period) - 1
            k1 = math.ceil((t1 - self.phase) / self.period) + 1
            for k in range(k0, k1 + 1):
                for edge in (self.phase + k * self.period, self.phase + (k + self.duty) * self.period):
                    if t0 < edge < t1:
                        breaks.add(edge)
        tiny = 1e-12 * self.period
        pts = [t0]
        for p in sorted(breaks):
            if p - pts[-1] > tiny:
                pts.append(p)
        pts[-1] = t1
        return [(a, b, drive_value(self, 0.5 * (a + b)) == 1) for a, b in zip(pts[:-1], pts[1:])]


def drive_value(schedule, t):
    """Drive indicator ``s(t)``: 1 while heating, 0 while cooling."""
    if schedule.duty >= 1.0:
        return 1
    if schedule.duty <= 0.0:
        return 0
    frac = ((t - schedule.phase) / schedule.period) % 1.0
    # snap rounding noise at the period boundary back to the start
    if 1.0 - frac < 1e-12:
        frac = 0.0
    return 1 if frac < schedule.duty - 1e-12 else 0


@dataclass(frozen=True)
class EngineParams:
    """All physical constants of one engine configuration.

    Defaults are the baseline configuration (kappa_a = 4,
    kappa_b = 0.04, g = -0.6, nbar_c = 0.01, nbar_h = 0.45). ``kappa_h`` falls
    back to ``kappa_a``, which makes the heating-stage photon number equal to
    ``(nbar_a + nbar_h) / 2``. ``kappa_L`` is an extra mechanical damping
    channel (the load) at the same bath occupation ``nbar_b``.
    """

    omega_a: float = 2.0
    omega_b: float = 1.0
    g: float = -0.6
    kappa_a: float = 4.0
    kappa_b: float = 0.04
    kappa_h: float = None
    nbar_a: float = 0.01
    nbar_b: float = 0.01
    nbar_h: float = 0.45
    coupling: CouplingKind = CouplingKind.QUADRATIC
    dim_a: int = 6
    dim_b: int = 14
    kappa_L: float = 0.0

    def __post_init__(self):
        if self.kappa_h is None:
            object.__setattr__(self, "kappa_h", self.kappa_a)
        object.__setattr__(self, "coupling", CouplingKind(self.coupling))
        if not self.omega_b > 0:
            raise ParameterError("omega_b", f"must be positive, got {self.omega_b}")
        for key in ("omega_a", "kappa_a", "kappa_b", "kappa_h", "nbar_a", "nbar_b", "nbar_h", "kappa_L"):
            value = getattr(self, key)
            if not (np.isfinite(value) and value >= 0):
                raise ParameterError(key, f"must be finite and >= 0, got {value}")
        if not np.isfinite(self.g):
            raise ParameterError("g", f"must be finite, got {self.g}")
        for key in ("dim_a", "dim_b"):
            value = getattr(self, key)
            if int(value) != value or value < 2:
                raise ParameterError(key, f"must be an integer >= 2, got {value}")
            object.__setattr__(self, key, int(value))

    @property
    def drive_period(self):
        return 2 * math.pi / self.omega_b

    @property
    def nbar_c(self):
        """Cold occupation; equals nbar_b in the symmetric-bath setting."""
        return self.nbar_b

    @property
    def space(self):
        return JointSpace(self.dim_a, self.dim_b)

    def schedule(self, duty=0.5, phase=0.0):
        return DriveSchedule(period=self.drive_period, duty=duty, phase=phase)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["coupling"] = self.coupling.value
        return d

    def params_hash(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def mean_occupation(omega, T):
    """Bose-Einstein occupation ``1 / (exp(omega/T) - 1)``; 0 at T = 0."""
    if T < 0:
        raise UndefinedTemperatureError(f"negative temperature {T}")
    if T == 0:
        return 0.0
    return 1.0 / math.expm1(omega / T)


def temperature_from_occupation(nbar, omega):
    """Inverse of :func:`mean_occupation`: ``omega / ln(1 + 1/nbar)``."""
    if not nbar > 0:
        raise UndefinedTemperatureError(f"temperature undefined for occupation {nbar}")
    return omega / math.log1p(1.0 / nbar)


def build_hamiltonian(params):
    """Joint-space Hamiltonian ``w_a n_a + w_b n_b + g n_a q^k`` (sparse).

    ``k = 2`` for quadratic and ``k = 1`` for linear coupling.
    """
    s = params.space
    coupling = s.q @ s.q if params.coupling is CouplingKind.QUADRATIC else s.q
    H = params.omega_a * s.n_a + params.omega_b * s.n_b + params.g * (s.n_a @ coupling)
    return H.tocsr()


def steady_photon_number(params, drive_on=True):
    """Fixed point ``A/B`` of ``d<n_a>/dt = A - B <n_a>``."""
    A, B = photon_rates(params, drive_on)
    return A / B


def photon_rates(params, drive_on=True):
    """Return ``(A, B)`` with ``A = k_a nbar_a + k_h nbar_h`` and ``B = k_a + k_h``."""
    kh = params.kappa_h if drive_on else 0.0
    return params.kappa_a * params.nbar_a + kh * params.nbar_h, params.kappa_a + kh


def stability_check(params, nbar_cavity=None):
    """Mean-field stability ``omega_b + 4 nbar g > 0`` of the quadratic coupling.

    ``nbar_cavity`` defaults to the heating-stage photon number. Linear
    coupling has no such bound and always passes.
    """
    if params.coupling is CouplingKind.LINEAR:
        return True
    if nbar_cavity is None:
        nbar_cavity = steady_photon_number(params, drive_on=True)
    return params.omega_b + 4.0 * nbar_cavity * params.g > 0


def max_stable_nbar_h(params):
    """Largest hot occupation that passes :func:`stability_check` (inf if g >= 0)."""
    if params.g >= 0:
        return math.inf
    nbar_max = -params.omega_b / (4.0 * params.g)
    return (nbar_max * (params.kappa_a + params.kappa_h) - params.kappa_a * params.nbar_a) / params.kappa_h


@dataclass(frozen=True)
class PhysicalScale:
    """Conversion of simulation units to SI for reporting.

    ``period_s`` is the duration of one drive period 2π/omega_b in seconds.
    """

    period_s: float = 2e-9

    @property
    def omega_b(self):
        return 2 * math.pi / self.period_s

    def energy(self, value):
        """Energy in joules of ``value`` in units of hbar*omega_b."""
        return value * HBAR * self.omega_b

    def power(self, energy_per_cycle):
        return self.energy(energy_per_cycle) / self.period_s

    def temperature(self, value):
        """Temperature in kelvin of ``value`` in units of hbar*omega_b/k_B."""
        return value * HBAR * self.omega_b / K_B
