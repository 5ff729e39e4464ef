import csv
import json
import logging

import pytest

from optomech_otto import cli
from optomech_otto.model import EngineParams

SMALL = ["--dims", "3,6"]


def run(args, tmp_path, name="out"):
    out = tmp_path / name
    code = cli.main(list(args) + ["--out", str(out)])
    return code, out


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# optomech_otto ")
    return lines[0], list(csv.reader(lines[1:]))


def test_empty_config_gives_baseline(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    cfg = cli.load_config(path)
    assert cfg.engine == EngineParams()
    assert (cfg.engine.kappa_a, cfg.engine.kappa_b, cfg.engine.g, cfg.engine.nbar_c, cfg.engine.nbar_h) == (4, 0.04, -0.6, 0.01, 0.45)
    assert cfg.wigner_times == (0.0, 30.0, 300.0, 3000.0)


def test_config_values_and_sections(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[engine]\nnbar_h = 0.2\ncoupling = linear\n[solver]\nbackend = rk4\ntol = 1e-8\n[schedule]\nduty = 0.4\n")
    cfg = cli.load_config(path)
    assert cfg.engine.nbar_h == 0.2 and cfg.engine.coupling.value == "linear"
    assert cfg.solver["backend"] == "rk4" and cfg.solver["tol"] == 1e-8
    assert cfg.schedule.duty == 0.4


def test_unstable_config_warns(tmp_path, caplog):
    path = tmp_path / "hot.ini"
    path.write_text("[engine]\nnbar_h = 0.9\n")
    with caplog.at_level(logging.WARNING, logger="optomech_otto"):
        cfg = cli.load_config(path)
    assert cfg.engine.nbar_h == 0.9
    assert "stability bound" in caplog.text


@pytest.mark.parametrize(
    "text, needle",
    [
        ("[engine]\nkappa_b = -0.1\n", "2: invalid engine.kappa_b"),
        ("[engine]\nnbar_h = 0.1\nnot a pair\n", ":3: parse error"),
        ("nbar_h = 0.1\n", ":1: parse error"),
        ("[engine]\nfoo = 1\n", "unknown key engine.foo"),
        ("[engine]\n\ng = abc\n", "3: invalid value for engine.g"),
        ("[solver]\nbackend = magic\n", "solver.backend"),
        ("[physics]\n", "unknown section"),
        ("[schedule]\nduty = 2\n", "schedule.duty"),
    ],
)
def test_config_errors(tmp_path, text, needle, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(cli.ConfigError, match=needle.replace(".", r"\.")):
        cli.load_config(path)
    assert cli.main(["cycle", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.ini")]) == cli.EXIT_CONFIG


def test_stability_violation_exit(tmp_path):
    path = tmp_path / "hot.ini"
    path.write_text("[engine]\nnbar_h = 0.9\n")
    code, _ = run(["cycle", "--config", str(path)], tmp_path)
    assert code == cli.EXIT_UNSTABLE
    code, out = run(["simulate", "--config", str(path), "--force", "--t-final", "1"] + SMALL, tmp_path, "forced")
    assert code == cli.EXIT_OK and (out / "observables.csv").exists()


def test_simulate_outputs_and_determinism(tmp_path):
    args = ["simulate", "--t-final", "6.283185307179586"] + SMALL
    code, out = run(args, tmp_path, "a")
    assert code == 0
    header_line, rows = read_csv(out / "observables.csv")
    assert "backend=expm" in header_line and "dims=3x6" in header_line
    assert tuple(rows[0]) == cli.OBSERVABLE_HEADER
    assert len(rows) == 1 + 101
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"provenance", "params", "convergence", "foms"}
    assert summary["provenance"]["dims"] == [3, 6]
    _, out2 = run(args, tmp_path, "b")
    for name in ("observables.csv", "summary.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_simulate_zero_time_is_empty(tmp_path):
    code, out = run(["simulate", "--t-final", "0"] + SMALL, tmp_path)
    assert code == 0
    _, rows = read_csv(out / "observables.csv")
    assert rows == [list(cli.OBSERVABLE_HEADER)]


def test_simulate_moments_shares_schema(tmp_path):
    code, out = run(["simulate", "--moments", "--t-final", "3"], tmp_path)
    assert code == 0
    header_line, rows = read_csv(out / "observables.csv")
    assert "backend=moments" in header_line
    assert tuple(rows[0]) == cli.OBSERVABLE_HEADER


def test_backend_flag_recorded(tmp_path):
    code, out = run(["simulate", "--t-final", "1", "--backend", "rk4"] + SMALL, tmp_path)
    assert code == 0
    assert "backend=rk4" in (out / "observables.csv").read_text().splitlines()[0]


def test_cycle_command(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[engine]\nnbar_h = 0.125\n")
    code, out = run(["cycle", "--config", str(path)], tmp_path)
    assert code == 0
    result = json.loads((out / "cycle.json").read_text())
    for kind in ("cycle_work", "heat_in", "efficiency"):
        assert result["foms"][kind]["value"] is not None
    assert result["convergence"]["status"] == "converged"
    assert result["convergence"]["closure_error"] < 1e-6
    for name in ("cycle_U_omega.svg", "cycle_T_S.svg"):
        text = (out / name).read_text()
        assert text.startswith("<?xml") and "<svg" in text
        assert "dc:date" not in text
    _, rows = read_csv(out / "cycle.csv")
    assert rows[0][-1] == "branch" and len(rows) == 402
    _, out2 = run(["cycle", "--config", str(path)], tmp_path, "again")
    for name in ("cycle.csv", "cycle.json", "cycle_U_omega.svg", "cycle_T_S.svg"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_convergence_failure_exit(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[solver]\nmax_cycles = 2\ntol = 1e-12\n")
    code, out = run(["cycle", "--config", str(path)] + SMALL, tmp_path)
    assert code == cli.EXIT_CONVERGENCE
    failed = json.loads((out / "cycle_failed.json").read_text())
    assert failed["convergence"]["status"] == "failed"
    assert failed["convergence"]["cycles"] == 2 and failed["convergence"]["residual"] > 1e-12


def test_wigner_default_times(tmp_path):
    code, out = run(["wigner"] + SMALL, tmp_path)
    assert code == 0
    summary = json.loads((out / "wigner.json").read_text())
    assert list(summary["foms"]) == ["0", "30", "300", "3000"]
    for tag in ("0", "30", "300", "3000"):
        _, rows = read_csv(out / f"wigner_t{tag}.csv")
        assert rows[0] == ["q", "p", "W"] and len(rows) == 1 + 121 * 121
        assert (out / f"wigner_t{tag}.svg").exists()
    assert summary["foms"]["0"]["normalization"] == pytest.approx(1.0, abs=1e-3)


def test_sweep_marks_unstable_rows(tmp_path):
    code, out = run(["sweep", "--values", "0.2,0.9"] + SMALL, tmp_path)
    assert code == 0
    _, rows = read_csv(out / "sweep.csv")
    assert rows[0][:4] == ["nbar_h", "coupling", "stable", "status"]
    status = {(r[0], r[1]): r[3] for r in rows[1:]}
    assert status[("9.0000000000e-01", "quadratic")] == "unstable"
    assert status[("9.0000000000e-01", "linear")] == "ok"
    assert (out / "sweep_dip_max.svg").exists()


def test_compare_command(tmp_path):
    code, out = run(["compare", "--load-grid", "0.01,0.1,1"] + SMALL, tmp_path)
    assert code == 0
    data = json.loads((out / "compare.json").read_text())
    assert [r["coupling"] for r in data["foms"]] == ["quadratic", "linear"]
    _, rows = read_csv(out / "compare.csv")
    assert rows[0][0] == "coupling" and len(rows) == 3


def test_threads_env_default(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    args = cli.build_parser().parse_args(["sweep"])
    assert args.threads == 3


def test_dims_flag_validation(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["simulate", "--dims", "3x6"])
    assert cli.main(["simulate", "--dims", "1,6", "--t-final", "0"]) == cli.EXIT_CONFIG
