import json

import numpy as np
import pytest

from gmc_es import acceptance, cli, safe_flow, sim
from gmc_es.problem import ConfigError

THETA_STAR = np.array([-0.58975, 0.65219])
EXACT = {
    "mode": "exact",
    "problem": {"name": "paper2d"},
    "flow": {"alpha": 1.0, "dt": 0.01, "horizon": 20.0, "method": "rk4"},
    "initial_conditions": [[0.0, 0.0], [-0.5, 0.3], [1.0, 0.5], [-1.0, 1.0], [0.0, 2.0]],
    "epsilon": "auto",
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_exact_run_writes_one_file_pair_per_start(tmp_path):
    cfg = write_config(tmp_path, EXACT)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    csvs = sorted((tmp_path / "out").glob("*.csv"))
    assert [p.name for p in csvs] == [f"paper2d_exact_{k:02d}.csv" for k in range(5)]
    for p in csvs:
        cols = sim.read_csv(p.read_text())
        final = np.array([cols["theta_1"][-1], cols["theta_2"][-1]])
        assert np.linalg.norm(final - THETA_STAR) <= 1e-3
        assert p.with_suffix(".json").exists()


def test_sidecar_round_trips_config(tmp_path):
    cfg = write_config(tmp_path, {**EXACT, "initial_conditions": [[0.0, 0.0]], "record_stride": 5})
    cli.main(["run", "--config", cfg, "--out", str(tmp_path)])
    meta = json.loads((tmp_path / "paper2d_exact_00.json").read_text())
    original = cli.load_config(cfg)
    assert cli.RunConfig.from_dict(meta["config"]) == original
    assert meta["epsilon_resolved"] == pytest.approx(0.5 / meta["multiplier_bound"])
    cols = sim.read_csv((tmp_path / "paper2d_exact_00.csv").read_text())
    assert meta["records"] == len(cols["t"])
    np.testing.assert_allclose(np.diff(cols["t"])[:-1], 0.05, atol=1e-12)


def test_missing_problem_names_field(tmp_path, capsys):
    doc = {k: v for k, v in EXACT.items() if k != "problem"}
    assert cli.main(["run", "--config", write_config(tmp_path, doc)]) == 1
    assert "problem" in capsys.readouterr().err


@pytest.mark.parametrize("doc, field", [
    ({**EXACT, "es": {"gain": 1.0}}, "gain"),
    ({**EXACT, "colour": "red"}, "colour"),
    ({**EXACT, "initial_conditions": [[0.0]]}, "initial_conditions[0]"),
    ({**EXACT, "epsilon": -1.0}, "epsilon"),
    ({**EXACT, "record_stride": 0}, "record_stride"),
    ({**EXACT, "mode": "fast"}, "mode"),
    ({**EXACT, "flow": {"method": "midpoint"}}, "flow"),
])
def test_bad_configs_exit_one(tmp_path, capsys, doc, field):
    assert cli.main(["run", "--config", write_config(tmp_path, doc)]) == 1
    assert field in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    (tmp_path / "bad.json").write_text("{")
    assert cli.main(["run", "--config", str(tmp_path / "bad.json")]) == 1


def test_es_frequency_count_checked():
    doc = {**EXACT, "mode": "es", "es": {"omegas": [10.0]}}
    with pytest.raises(ConfigError) as exc:
        cli.RunConfig.from_dict(doc)
    assert exc.value.path == "es.omegas"


def test_default_es_omegas():
    cfg = cli.RunConfig.from_dict({**EXACT, "mode": "es", "epsilon": 0.1})
    assert cfg.es_params(cfg.validate()).omegas == (10.0, 13.0)


def test_list_problems(capsys):
    assert cli.main(["list-problems"]) == 0
    names = capsys.readouterr().out.split()
    assert {"paper2d", "eq3d", "unconstrained_quad"} <= set(names)


def test_plot_subcommand(tmp_path):
    cfg = write_config(tmp_path, {**EXACT, "initial_conditions": [[0.0, 0.0], [-1.0, 1.0]],
                                  "epsilon": 0.1, "plot": {"grid": 41}})
    cli.main(["run", "--config", cfg, "--out", str(tmp_path)])
    trajs = [str(p) for p in sorted(tmp_path.glob("*.csv"))]
    out_a, out_b = tmp_path / "a.svg", tmp_path / "b.svg"
    assert cli.main(["plot", "--config", cfg, "--traj", *trajs, "--out", str(out_a)]) == 0
    assert cli.main(["plot", "--config", cfg, "--traj", *trajs, "--out", str(out_b)]) == 0
    text = out_a.read_text()
    assert text == out_b.read_text()
    assert text.count("<polyline") == 2 and 'class="optimum"' in text


def test_plot_rejects_other_dimensions(tmp_path, capsys):
    doc = {"mode": "plot", "problem": {"quadratic": {"Q": np.eye(3).tolist()}}}
    cfg = write_config(tmp_path, doc)
    assert cli.main(["plot", "--config", cfg, "--out", str(tmp_path / "x.svg")]) == 1
    assert "n=3" in capsys.readouterr().err


def test_plot_missing_trajectory(tmp_path):
    cfg = write_config(tmp_path, {"mode": "plot", "problem": {"name": "paper2d"}, "plot": {"grid": 11}})
    assert cli.main(["plot", "--config", cfg, "--traj", str(tmp_path / "none.csv"), "--out", str(tmp_path / "x.svg")]) == 1


@pytest.mark.parametrize("raw, jobs, expected", [(None, 1, 1), ("3", 10, 3), ("8", 2, 2)])
def test_thread_count(monkeypatch, raw, jobs, expected):
    if raw is None:
        monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    else:
        monkeypatch.setenv(cli.THREADS_ENV, raw)
    assert cli.thread_count(jobs) == expected


@pytest.mark.parametrize("raw", ["0", "-2", "many"])
def test_thread_count_rejects_bad_values(monkeypatch, raw):
    monkeypatch.setenv(cli.THREADS_ENV, raw)
    with pytest.raises(ConfigError):
        cli.thread_count(4)


def test_threaded_and_serial_runs_agree(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, {**EXACT, "epsilon": 0.1, "flow": {"horizon": 2.0}})
    outputs = []
    for threads in ("1", "4"):
        monkeypatch.setenv(cli.THREADS_ENV, threads)
        out = tmp_path / threads
        cli.main(["run", "--config", cfg, "--out", str(out)])
        outputs.append([p.read_text() for p in sorted(out.glob("*.csv"))])
    assert outputs[0] == outputs[1]


def test_verify_subset_prints_json(tmp_path, capsys):
    cfg = write_config(tmp_path, {"mode": "verify", "problem": {"name": "paper2d"}})
    assert cli.main(["verify", "--config", cfg, "--only", "2,9"]) == 0
    captured = capsys.readouterr()
    rep = json.loads(captured.out)
    assert rep["passed"] is True
    assert [c["id"] for c in rep["criteria"]] == ["2", "9"]
    assert "[PASS] 2" in captured.err


def test_corrupted_alpha_sign_is_caught(monkeypatch):
    original = safe_flow.flow_qp

    def flipped(problem, theta, alpha, source="analytic"):
        return original(problem, theta, -alpha, source)

    monkeypatch.setattr(safe_flow, "flow_qp", flipped)
    (res,) = acceptance.check_invariance(acceptance.Context())
    assert not res.passed


@pytest.mark.slow
def test_default_es_config_converges(tmp_path):
    doc = {"mode": "es", "problem": {"name": "paper2d"}, "initial_conditions": [[0.0, 0.0]],
           "record_stride": 50}
    assert cli.main(["run", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)]) == 0
    cols = sim.read_csv((tmp_path / "paper2d_es_00.csv").read_text())
    final = np.array([cols["theta_hat_1"][-1], cols["theta_hat_2"][-1]])
    assert np.linalg.norm(final - THETA_STAR) <= 0.1
