"""Command-line interface: ``optomech-otto {simulate,wigner,cycle,sweep,compare}``.

Configuration is an INI file with optional sections::

    [engine]    omega_a, omega_b, g, kappa_a, kappa_b, kappa_h, nbar_a,
                nbar_b, nbar_h, coupling, dim_a, dim_b, kappa_L
    [schedule]  duty, phase
    [solver]    backend, dt, tol, max_cycles, samples_per_period
    [outputs]   directory, formats, t_final, sample_every
    [wigner]    times, points
    [sweep]     axis, values, couplings

Missing keys take the baseline defaults. Every output file starts with a
provenance record (config hash, backend, truncation, package version), and
identical inputs give byte-identical CSV and JSON.

Exit codes: 0 success, 2 configuration error, 3 convergence failure,
4 unstable parameters without ``--force``.
"""

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .lindblad import ConvergenceError, build_liouvillian, evolve, resolve_backend
from .model import CouplingKind, EngineParams, ParameterError, max_stable_nbar_h, stability_check
from .moments import MomentInstabilityError, MomentState, integrate_moments
from .states import default_axis, effective_temperature, quadrature_stats, thermal_entropy, wigner
from . import thermo

log = logging.getLogger("optomech_otto")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_UNSTABLE = 0, 2, 3, 4
THREADS_ENV = "OPTOMECH_OTTO_THREADS"
OBSERVABLE_HEADER = ("t", "n_a", "n_b", "q2", "p2", "S_a", "omega_eff", "U_a", "T_eff", "drive")
DEFAULT_WIGNER_TIMES = (0.0, 30.0, 300.0, 3000.0)
FORMATS = ("csv", "json", "svg")

_ENGINE_KEYS = {f.name: f.type for f in dataclasses.fields(EngineParams)}
_SOLVER_DEFAULTS = {"backend": "auto", "dt": None, "tol": 1e-7, "max_cycles": 2000, "samples_per_period": 400}
_SECTIONS = {
    "engine": set(_ENGINE_KEYS),
    "schedule": {"duty", "phase"},
    "solver": set(_SOLVER_DEFAULTS),
    "outputs": {"directory", "formats", "t_final", "sample_every"},
    "wigner": {"times", "points"},
    "sweep": {"axis", "values", "couplings"},
}


class ConfigError(ValueError):
    pass


class StabilityViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    engine: EngineParams = field(default_factory=EngineParams)
    duty: float = 0.5
    phase: float = 0.0
    solver: dict = field(default_factory=lambda: dict(_SOLVER_DEFAULTS))
    directory: str = "out"
    formats: tuple = FORMATS
    t_final: float = 20 * math.pi
    sample_every: float = math.pi / 50
    wigner_times: tuple = DEFAULT_WIGNER_TIMES
    wigner_points: int = 121
    sweep_axis: str = "nbar_h"
    sweep_values: tuple = (0.1, 0.2, 0.3, 0.45)
    sweep_couplings: tuple = ("quadratic", "linear")

    @property
    def schedule(self):
        return self.engine.schedule(duty=self.duty, phase=self.phase)

    def as_dict(self):
        return {
            "engine": self.engine.as_dict(),
            "schedule": {"duty": self.duty, "phase": self.phase, "period": self.engine.drive_period},
            "solver": dict(sorted(self.solver.items())),
            "outputs": {"formats": list(self.formats), "t_final": self.t_final, "sample_every": self.sample_every},
            "wigner": {"times": list(self.wigner_times), "points": self.wigner_points},
            "sweep": {"axis": self.sweep_axis, "values": list(self.sweep_values), "couplings": list(self.sweep_couplings)},
        }

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def backend(self):
        return resolve_backend(self.solver["backend"], (self.engine.dim_a, self.engine.dim_b))

    def solver_kwargs(self):
        s = self.solver
        return {
            "tol": s["tol"],
            "max_cycles": s["max_cycles"],
            "backend": s["backend"],
            "samples_per_period": s["samples_per_period"],
            "dt": s["dt"],
        }


def _line_numbers(text):
    """Map ``(section, key)`` to the line where the key is set."""
    where, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = s.split("=", 1)[0] if "=" in s else s.split(":", 1)[0]
            where[(section, key.strip().lower())] = i
    return where


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _convert(section, key, raw):
    if section == "engine":
        if key == "coupling":
            return CouplingKind(raw.strip().lower())
        if key in ("dim_a", "dim_b"):
            return int(raw)
        if key == "kappa_h" and raw.strip().lower() in ("", "none"):
            return None
        return float(raw)
    if section == "solver":
        if key == "backend":
            value = raw.strip().lower()
            if value not in ("auto", "rk4", "expm"):
                raise ValueError(f"unknown backend {raw!r}")
            return value
        if key == "dt":
            return None if raw.strip().lower() in ("", "none") else float(raw)
        if key in ("max_cycles", "samples_per_period"):
            return int(raw)
        return float(raw)
    if section == "outputs":
        if key == "directory":
            return raw.strip()
        if key == "formats":
            formats = tuple(x.strip().lower() for x in raw.replace(",", " ").split())
            bad = [f for f in formats if f not in FORMATS]
            if bad:
                raise ValueError(f"unknown formats {bad}")
            return formats
        return float(raw)
    if section == "wigner":
        return int(raw) if key == "points" else _floats(raw)
    if section == "sweep":
        if key == "axis":
            return raw.strip()
        if key == "couplings":
            return tuple(CouplingKind(x.strip().lower()).value for x in raw.replace(",", " ").split())
        return _floats(raw)
    return float(raw)


def parse_config(text, source="<config>"):
    """Build a :class:`RunConfig` from INI text.

    Raises:
        ConfigError: malformed text (with line number), unknown sections or
            keys, or a value that fails validation (naming the key).
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
        raise ConfigError(f"{source}:{lineno}: parse error: {exc.message.splitlines()[0]}") from exc
    where = _line_numbers(text)
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            loc = f"{source}:{where.get((section, key), '?')}"
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{loc}: unknown key {section}.{key}")
            try:
                values[(section, key)] = _convert(section, key, raw)
            except ValueError as exc:
                raise ConfigError(f"{loc}: invalid value for {section}.{key}: {exc}") from exc
    engine = {k: v for (s, k), v in values.items() if s == "engine"}
    try:
        params = EngineParams(**engine)
        cfg = RunConfig(engine=params)
        cfg.duty = values.get(("schedule", "duty"), cfg.duty)
        cfg.phase = values.get(("schedule", "phase"), cfg.phase)
        cfg.schedule  # validates duty
    except ParameterError as exc:
        section = "schedule" if exc.key in ("duty", "phase", "period") else "engine"
        raise ConfigError(f"{source}:{where.get((section, exc.key), '?')}: invalid {section}.{exc}") from exc
    for key in _SOLVER_DEFAULTS:
        if ("solver", key) in values:
            cfg.solver[key] = values[("solver", key)]
    for (section, key), attr in {
        ("outputs", "directory"): "directory",
        ("outputs", "formats"): "formats",
        ("outputs", "t_final"): "t_final",
        ("outputs", "sample_every"): "sample_every",
        ("wigner", "times"): "wigner_times",
        ("wigner", "points"): "wigner_points",
        ("sweep", "axis"): "sweep_axis",
        ("sweep", "values"): "sweep_values",
        ("sweep", "couplings"): "sweep_couplings",
    }.items():
        if (section, key) in values:
            setattr(cfg, attr, values[(section, key)])
    checks = [
        ("solver", "tol", cfg.solver["tol"] > 0),
        ("solver", "max_cycles", cfg.solver["max_cycles"] >= 1),
        ("solver", "samples_per_period", cfg.solver["samples_per_period"] >= 1),
        ("solver", "dt", cfg.solver["dt"] is None or cfg.solver["dt"] > 0),
        ("outputs", "t_final", cfg.t_final >= 0),
        ("outputs", "sample_every", cfg.sample_every > 0),
        ("wigner", "points", cfg.wigner_points >= 2),
        ("wigner", "times", all(t >= 0 for t in cfg.wigner_times)),
        ("sweep", "axis", cfg.sweep_axis in ("nbar_h", "kappa_L")),
    ]
    for section, key, ok in checks:
        if not ok:
            raise ConfigError(f"{source}:{where.get((section, key), '?')}: invalid value for {section}.{key}")
    return cfg


def load_config(path=None):
    """Read and validate a config file; ``None`` gives the baseline defaults.

    A stability warning is logged when the hot occupation exceeds the
    mean-field bound of the quadratic coupling.
    """
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, source=str(path))
    if not stability_check(cfg.engine):
        log.warning(
            "nbar_h = %g exceeds the stability bound %.3f for g = %g; results are unphysical",
            cfg.engine.nbar_h,
            max_stable_nbar_h(cfg.engine),
            cfg.engine.g,
        )
    return cfg


# ---------------------------------------------------------------- output helpers


def _fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.10e}"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, enum_types()):
        return obj.value
    return obj


def enum_types():
    return (CouplingKind,)


class Outputs:
    """Writes provenance-stamped files into one directory."""

    def __init__(self, cfg, directory=None):
        self.cfg = cfg
        self.dir = Path(directory or cfg.directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written = []

    def provenance(self, backend=None):
        e = self.cfg.engine
        return {
            "config_hash": self.cfg.config_hash(),
            "backend": backend or self.cfg.backend,
            "dims": [e.dim_a, e.dim_b],
            "version": __version__,
        }

    def wants(self, fmt):
        return fmt in self.cfg.formats

    def csv(self, name, header, rows, backend=None):
        if not self.wants("csv"):
            return None
        path = self.dir / name
        prov = self.provenance(backend)
        with open(path, "w", newline="") as fh:
            fh.write(
                f"# optomech_otto {prov['version']} config_hash={prov['config_hash']} "
                f"backend={prov['backend']} dims={prov['dims'][0]}x{prov['dims'][1]}\n"
            )
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.written.append(path)
        return path

    def json(self, name, payload, backend=None):
        if not self.wants("json"):
            return None
        path = self.dir / name
        body = {"provenance": self.provenance(backend), **payload}
        path.write_text(json.dumps(_json_safe(body), sort_keys=True, indent=2) + "\n")
        self.written.append(path)
        return path

    def svg(self, name, fig, backend=None):
        import matplotlib.pyplot as plt

        if not self.wants("svg"):
            plt.close(fig)
            return None
        path = self.dir / name
        prov = self.provenance(backend)
        desc = " ".join(f"{k}={v}" for k, v in prov.items())
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": desc})
        plt.close(fig)
        self.written.append(path)
        return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "optomech-otto"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _fom_dict(foms):
    return {k: {"value": f.value, "label": f.label, "params_hash": f.params_hash} for k, f in sorted(foms.items())}


def _omega_eff(params, q, q2):
    coupled = np.asarray(q2 if params.coupling is CouplingKind.QUADRATIC else q, dtype=float)
    return params.omega_a + params.g * coupled


def observable_rows(t, n_a, n_b, q, q2, p2, S_a, drive, params):
    """Rows of the observables CSV; shared by the Lindblad and moment solvers."""
    omega = _omega_eff(params, q, q2)
    rows = []
    for i in range(len(t)):
        rows.append(
            (
                t[i],
                n_a[i],
                n_b[i],
                q2[i],
                p2[i],
                S_a[i],
                omega[i],
                omega[i] * n_a[i],
                effective_temperature(n_a[i], omega[i]),
                int(drive[i]),
            )
        )
    return rows


def _convergence_payload(meta, status="converged"):
    out = {"status": status}
    for key in ("backend", "cycles", "residual"):
        if key in meta:
            out[key] = meta[key]
    return out


# ---------------------------------------------------------------- commands


def command_simulate(cfg, out, moments=False):
    """Transient evolution from the thermal state up to ``t_final``."""
    p = cfg.engine
    if moments:
        if p.coupling is not CouplingKind.QUADRATIC:
            raise ConfigError("the moment solver supports quadratic coupling only")
        if cfg.t_final > 0:
            traj = integrate_moments(
                MomentState.thermal(p.nbar_a, p.nbar_b), p, cfg.schedule, cfg.t_final, sample_every=cfg.sample_every
            )
            obs = traj.observables()
            n_a = obs["n_a"]
            rows = observable_rows(
                traj.times, n_a, obs["n_b"], np.zeros_like(n_a), obs["q2"], obs["p2"],
                [thermal_entropy(n) for n in n_a], traj.drive, p,
            )
        else:
            rows = []
        backend = "moments"
    else:
        L = build_liouvillian(p)
        traj = evolve(
            thermo.initial_state(p),
            L,
            cfg.schedule,
            cfg.t_final,
            sample_every=cfg.sample_every,
            backend=cfg.solver["backend"],
            dt=cfg.solver["dt"],
            record_mode="observables_only",
        )
        o = traj.observables
        rows = observable_rows(traj.times, o["n_a"], o["n_b"], o["q"], o["q2"], o["p2"], o["S_a"], traj.drive, p)
        backend = traj.meta.get("backend", cfg.backend)
    out.csv("observables.csv", OBSERVABLE_HEADER, rows, backend)
    foms = {}
    if rows:
        h = p.params_hash()
        series = np.array([r[2] for r in rows])
        dip = p.omega_b * p.kappa_b * (series - p.nbar_b)
        foms = {
            "dip_max": {"value": float(dip.max()), "label": "max over run", "params_hash": h},
            "n_a_final": {"value": rows[-1][1], "label": "end of run", "params_hash": h},
            "n_b_final": {"value": rows[-1][2], "label": "end of run", "params_hash": h},
        }
    out.json(
        "summary.json",
        {
            "params": cfg.as_dict(),
            "convergence": {"status": "transient", "samples": len(rows), "t_final": cfg.t_final},
            "foms": foms,
        },
        backend,
    )
    return EXIT_OK


def command_wigner(cfg, out, times=None):
    """Mechanical Wigner grids at the requested times (in 1/omega_b)."""
    plt = _pyplot()
    p = cfg.engine
    times = sorted(set(cfg.wigner_times if times is None else times))
    L = build_liouvillian(p)
    rho = thermo.initial_state(p)
    from .lindblad import DensityMatrix

    state = DensityMatrix(rho, 0.0)
    summary = {}
    backend = cfg.backend
    for t in times:
        if t > state.time:
            traj = evolve(state, L, cfg.schedule, t, backend=cfg.solver["backend"], dt=cfg.solver["dt"], record_mode="observables_only")
            state = traj.final_state
            backend = traj.meta.get("backend", backend)
        from .states import partial_trace

        rho_b = partial_trace(state.data, (p.dim_a, p.dim_b))
        axis = default_axis(rho_b, points=cfg.wigner_points)
        grid = wigner(rho_b, axis, axis, check_normalization=False)
        tag = f"{t:g}"
        Q, P = np.meshgrid(grid.q_axis, grid.p_axis)
        out.csv(f"wigner_t{tag}.csv", ("q", "p", "W"), zip(Q.ravel(), P.ravel(), grid.values.ravel()), backend)
        fig, ax = plt.subplots(figsize=(4, 3.6))
        mesh = ax.pcolormesh(grid.q_axis, grid.p_axis, grid.values, shading="auto", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="W(q, p)")
        ax.set_xlabel("q")
        ax.set_ylabel("p")
        ax.set_title(f"omega_b t = {tag}")
        fig.tight_layout()
        out.svg(f"wigner_t{tag}.svg", fig, backend)
        st = quadrature_stats(rho_b)
        summary[tag] = {
            "normalization": grid.normalization(),
            "min_value": float(grid.values.min()),
            "n_b": float(np.real(np.trace(rho_b @ np.diag(np.arange(p.dim_b))))),
            "min_variance": st.min_variance,
            "max_variance": st.max_variance,
        }
    out.json("wigner.json", {"params": cfg.as_dict(), "convergence": {"status": "transient"}, "foms": summary}, backend)
    return EXIT_OK


def _solve(cfg, params=None):
    return thermo.solve_engine(params or cfg.engine, **cfg.solver_kwargs())


def command_cycle(cfg, out):
    """Limit cycle, its Otto diagram in both planes, and W_a, Q_in, efficiency."""
    plt = _pyplot()
    p = cfg.engine
    sol = _solve(cfg)
    backend = sol.solver.get("backend")
    diagram = sol.cycle(closure_tol=max(10 * cfg.solver["tol"], 1e-6))
    cols = diagram.columns()
    header = ("t", "omega_eff", "n_a", "U_a", "S_a", "T_eff", "drive", "branch")
    out.csv("cycle.csv", header, zip(*(cols[h] for h in header)), backend)
    for name, (x, y, xl, yl) in {
        "cycle_U_omega.svg": (diagram.omega_eff, diagram.U_a, "omega_eff", "U_a"),
        "cycle_T_S.svg": (diagram.S_a, diagram.T_eff, "S_a", "T_eff"),
    }.items():
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for b in diagram.branches_present():
            m = diagram.branch == b
            ax.plot(x[m], y[m], ".", ms=2, label=b)
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.legend(fontsize=7, markerscale=4)
        fig.tight_layout()
        out.svg(name, fig, backend)
    W = thermo.cycle_area(diagram, "T_vs_S")
    Q = thermo.heat_intake(diagram)
    h = p.params_hash()
    foms = sol.foms()
    foms.update(
        cycle_work=thermo.FigureOfMerit("cycle_work", W, h, "T-S loop area"),
        cycle_work_U_omega=thermo.FigureOfMerit("cycle_work_U_omega", thermo.cycle_area(diagram, "U_vs_omega"), h, "omega-n loop area"),
        heat_in=thermo.FigureOfMerit("heat_in", Q, h, "heating-branch T dS"),
        efficiency=thermo.FigureOfMerit("efficiency", W / Q if Q else math.nan, h, "W_a/Q_in"),
    )
    conv = _convergence_payload(sol.solver)
    conv["closure_error"] = diagram.closure_error
    conv["branches"] = diagram.branches_present()
    out.json("cycle.json", {"params": cfg.as_dict(), "convergence": conv, "foms": _fom_dict(foms)}, backend)
    return EXIT_OK


SWEEP_FOMS = ("dip_max", "dip_mean", "delta_F", "ergotropy", "cycle_work", "heat_in", "efficiency", "load_power", "load_power_mean")


def command_sweep(cfg, out, axis=None, values=None, couplings=None, workers=1, force=False):
    """Figure-of-merit table along ``nbar_h`` or ``kappa_L``."""
    plt = _pyplot()
    axis = axis or cfg.sweep_axis
    values = cfg.sweep_values if values is None else values
    couplings = couplings or cfg.sweep_couplings
    rows = thermo.sweep(cfg.engine, axis, values, couplings=couplings, workers=workers, force=force, **cfg.solver_kwargs())
    header = (axis, "coupling", "stable", "status") + SWEEP_FOMS
    table = [(r.value, r.coupling, int(r.stable), r.error or "ok") + tuple(r.get(k) for k in SWEEP_FOMS) for r in rows]
    out.csv("sweep.csv", header, table)
    for kind in ("dip_max", "delta_F", "load_power"):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for c in couplings:
            pts = [(r.value, r.get(kind)) for r in rows if r.coupling == c and not r.error]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, "o-", label=c)
        ax.set_xlabel(axis)
        ax.set_ylabel(kind)
        if axis == "kappa_L":
            ax.set_xscale("log")
        ax.legend()
        fig.tight_layout()
        out.svg(f"sweep_{kind}.svg", fig)
    payload = {
        "params": cfg.as_dict(),
        "convergence": {"status": "failed" if any(r.error for r in rows) else "converged", "points": len(rows)},
        "foms": [
            {"axis": axis, "value": r.value, "coupling": r.coupling, "stable": r.stable, "error": r.error, **{k: r.get(k) for k in SWEEP_FOMS}}
            for r in rows
        ],
    }
    out.json("sweep.json", payload)
    failed = [r for r in rows if r.error and r.error != "unstable"]
    return EXIT_CONVERGENCE if failed else EXIT_OK


def command_compare(cfg, out, kappa_L_values=None):
    """Quadratic and linear coupling side by side, including the load curve."""
    plt = _pyplot()
    grid = thermo.default_load_grid() if kappa_L_values is None else np.asarray(kappa_L_values, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    records = []
    for kind in (CouplingKind.QUADRATIC, CouplingKind.LINEAR):
        p = cfg.engine.replace(coupling=kind, kappa_L=0.0)
        sol = _solve(cfg, p)
        _, P = thermo.load_curve(p, grid, **cfg.solver_kwargs())
        k = int(np.argmax(P))
        sq = sol.squeezing()
        dip = sol.dip()
        records.append(
            {
                "coupling": kind.value,
                "dip_max": dip.max,
                "dip_mean": dip.mean,
                "load_power_max": float(P[k]),
                "kappa_L_opt": float(grid[k]),
                "delta_F": sol.delta_F(),
                "ergotropy": sol.ergotropy(),
                "min_variance": sq.min_variance,
                "max_variance": sq.max_variance,
                "cycles": sol.solver.get("cycles"),
            }
        )
        ax.plot(grid, P, "o-", ms=3, label=kind.value)
    ax.set_xscale("log")
    ax.set_xlabel("kappa_L")
    ax.set_ylabel("P_L")
    ax.legend()
    fig.tight_layout()
    out.svg("compare_load.svg", fig)
    header = tuple(records[0])
    out.csv("compare.csv", header, [tuple(r[h] for h in header) for r in records])
    out.json("compare.json", {"params": cfg.as_dict(), "convergence": {"status": "converged"}, "foms": records})
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _dims(text):
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NA,NB, got {text!r}")
    return a, b


def _threads_default():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [outputs] directory)")
    common.add_argument("--backend", choices=("rk4", "expm"), help="propagation backend")
    common.add_argument("--dims", type=_dims, metavar="NA,NB", help="Fock truncations")
    common.add_argument("--coupling", choices=("quadratic", "linear"))
    common.add_argument("--force", action="store_true", help="run even when the stability check fails")
    common.add_argument(
        "--threads", type=int, default=_threads_default(), metavar="N", help=f"sweep worker processes (default ${THREADS_ENV} or 1)"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="optomech-otto", description="Optomechanical Otto engine simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="transient evolution from the thermal state")
    sim.add_argument("--t-final", type=float, help="end time in 1/omega_b")
    sim.add_argument("--moments", action="store_true", help="use the moment hierarchy instead of the master equation")
    wig = sub.add_parser("wigner", parents=[common], help="mechanical Wigner grids")
    wig.add_argument("--times", type=_floats, help="comma-separated omega_b t values")
    sub.add_parser("cycle", parents=[common], help="limit cycle and Otto diagram")
    sw = sub.add_parser("sweep", parents=[common], help="figure-of-merit sweep")
    sw.add_argument("--axis", choices=("nbar_h", "kappa_L"))
    sw.add_argument("--values", type=_floats, help="comma-separated axis values")
    cmp_ = sub.add_parser("compare", parents=[common], help="quadratic versus linear coupling")
    cmp_.add_argument("--load-grid", type=_floats, help="comma-separated kappa_L values")
    return parser


def _apply_overrides(cfg, args):
    changes = {}
    if args.dims:
        changes.update(dim_a=args.dims[0], dim_b=args.dims[1])
    if args.coupling:
        changes["coupling"] = CouplingKind(args.coupling)
    if changes:
        try:
            cfg.engine = cfg.engine.replace(**changes)
        except ParameterError as exc:
            raise ConfigError(f"--dims/--coupling: {exc}") from exc
    if args.backend:
        cfg.solver["backend"] = args.backend
    if args.out:
        cfg.directory = args.out
    if getattr(args, "t_final", None) is not None:
        if args.t_final < 0:
            raise ConfigError("--t-final must be >= 0")
        cfg.t_final = args.t_final
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    needs_stable = args.command != "sweep"
    if needs_stable and not args.force and not stability_check(cfg.engine):
        print(
            f"stability violation: nbar_h = {cfg.engine.nbar_h} exceeds {max_stable_nbar_h(cfg.engine):.4f}; pass --force to run anyway",
            file=sys.stderr,
        )
        return EXIT_UNSTABLE
    out = Outputs(cfg)
    try:
        if args.command == "simulate":
            code = command_simulate(cfg, out, moments=args.moments)
        elif args.command == "wigner":
            code = command_wigner(cfg, out, times=args.times)
        elif args.command == "cycle":
            code = command_cycle(cfg, out)
        elif args.command == "sweep":
            code = command_sweep(cfg, out, axis=args.axis, values=args.values, workers=args.threads, force=args.force)
        else:
            code = command_compare(cfg, out, kappa_L_values=args.load_grid)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, MomentInstabilityError, thermo.UnconvergedCycleError) as exc:
        detail = {"status": "failed", "error": str(exc)}
        for key in ("residual", "cycles"):
            if hasattr(exc, key):
                detail[key] = getattr(exc, key)
        out.json(f"{args.command}_failed.json", {"params": cfg.as_dict(), "convergence": detail, "foms": {}})
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    for path in out.written:
        print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
