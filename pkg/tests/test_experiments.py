import csv
import json

import numpy as np
import pytest

from markov_sa.cli import main
from markov_sa.environments import builtin_environment, save_bundle
from markov_sa.experiments import (
    ConfigError,
    ExperimentConfig,
    diagnose_run,
    emit_plot_data,
    load_trajectory,
    rerun,
    run_experiment,
    split_seed,
)
from markov_sa.learners import OVERFLOW_GUARD, Schedule


def _config(tmp_path, **kw):
    doc = dict(environment="random_offpolicy", algorithm="gtd", lam=0.5, schedule=Schedule(30, 1000),
               n_steps=60_000, seeds=(1, 2, 3), record_stride=100, output_dir=str(tmp_path / "out"))
    doc.update(kw)
    return ExperimentConfig(**doc)


def _read_plot(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def gtd_artifacts(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("gtd")
    cfg = _config(tmp, n_steps=400_000)
    return cfg, run_experiment(cfg)


class TestConfig:
    def test_empty_seeds(self, tmp_path):
        with pytest.raises(ConfigError, match="nonempty"):
            _config(tmp_path, seeds=())

    def test_duplicate_seeds(self, tmp_path):
        with pytest.raises(ConfigError, match="distinct"):
            _config(tmp_path, seeds=(4, 5, 4))

    def test_interest_needs_etd(self, tmp_path):
        with pytest.raises(ConfigError, match="etd"):
            _config(tmp_path, interest=1.0)

    def test_unknown_environment(self, tmp_path):
        with pytest.raises(ConfigError, match="neither"):
            _config(tmp_path, environment=str(tmp_path / "missing.json"))

    def test_from_dict_validates(self):
        base = {"environment": "tabular_chain", "algorithm": "td", "lambda": 0.0, "schedule": [1, 10],
                "n_steps": 100, "seeds": [0]}
        assert ExperimentConfig.from_dict(base).lam == 0.0
        with pytest.raises(ConfigError, match="unknown config fields"):
            ExperimentConfig.from_dict({**base, "colour": "red"})
        with pytest.raises(ConfigError, match="schedule"):
            ExperimentConfig.from_dict({**base, "schedule": [1, 10, 0.3]})
        with pytest.raises(ConfigError, match="missing"):
            ExperimentConfig.from_dict({k: v for k, v in base.items() if k != "seeds"})
        with pytest.raises(ConfigError, match="n_steps"):
            ExperimentConfig.from_dict({**base, "n_steps": 0})

    def test_dict_round_trip_and_hash(self, tmp_path):
        cfg = _config(tmp_path, interest=None)
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg
        moved = ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": "elsewhere"})
        assert moved.config_hash() == cfg.config_hash()
        assert _config(tmp_path, lam=0.9).config_hash() != cfg.config_hash()


class TestSeeds:
    def test_split_is_deterministic_and_distinct(self):
        assert split_seed(3) == split_seed(3)
        env, traj = split_seed(3)
        assert env != traj
        assert split_seed(4) != split_seed(3)

    def test_env_seed_override(self):
        assert split_seed(3, env_seed=17)[0] == 17
        assert split_seed(3, env_seed=17)[1] == split_seed(3)[1]


class TestRunExperiment:
    def test_layout_and_summary(self, gtd_artifacts):
        cfg, out = gtd_artifacts
        summary = json.loads((out / "summary.json").read_text())
        assert [r["seed"] for r in summary["runs"]] == [1, 2, 3]
        for r in summary["runs"]:
            d = out / r["directory"]
            for name in ("trajectory.csv", "metadata.json", "spectral.json", "diagnostics.json", "environment.json"):
                assert (d / name).exists()
            assert r["diverged"] is False
            assert r["terminal_relative_error"] < 0.2
        meta = json.loads((out / "seed_1" / "metadata.json").read_text())
        assert meta["config_hash"] == cfg.config_hash()
        assert meta["generator"] == "numpy.random.PCG64"
        assert {"numpy", "scipy", "numba", "python"} <= set(meta["versions"])
        assert (meta["env_seed"], meta["trajectory_seed"]) == split_seed(1)

    def test_byte_identical_rerun(self, gtd_artifacts, tmp_path):
        cfg, out = gtd_artifacts
        again = run_experiment(ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": str(tmp_path / "b")}))
        for s in cfg.seeds:
            assert (out / f"seed_{s}" / "trajectory.csv").read_bytes() == \
                (again / f"seed_{s}" / "trajectory.csv").read_bytes()

    def test_rerun_from_metadata(self, gtd_artifacts, tmp_path):
        _, out = gtd_artifacts
        again = rerun(out / "seed_2", tmp_path / "r")
        assert (again / "seed_2" / "trajectory.csv").read_bytes() == (out / "seed_2" / "trajectory.csv").read_bytes()

    def test_diagnose_from_disk_matches(self, gtd_artifacts):
        _, out = gtd_artifacts
        stored = json.loads((out / "seed_3" / "diagnostics.json").read_text())
        recomputed = diagnose_run(out / "seed_3")
        assert json.loads(json.dumps(recomputed)) == stored

    def test_env_file_and_shared_environment(self, tmp_path):
        path = tmp_path / "env.json"
        save_bundle(builtin_environment("tabular_chain"), path)
        cfg = _config(tmp_path, environment=str(path), algorithm="td", lam=0.0, schedule=Schedule(1, 10),
                      n_steps=20_000, seeds=(5, 6))
        out = run_experiment(cfg)
        assert (out / "seed_5" / "environment.json").read_text() == (out / "seed_6" / "environment.json").read_text()

    def test_divergence_recorded(self, tmp_path):
        cfg = _config(tmp_path, environment="divergence_star", algorithm="offpolicy_td", lam=0.0,
                      schedule=Schedule(20, 1000), n_steps=400_000, seeds=(1, 2))
        out = run_experiment(cfg)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["all_diverged"]
        for r in summary["runs"]:
            traj = load_trajectory(out / r["directory"] / "trajectory.csv")
            assert traj.diverged and traj.norm_x[-1] > OVERFLOW_GUARD
        rows = _read_plot(emit_plot_data(out))
        last = [float(r["value"]) for r in rows if r["series"] == "norm_x" and r["seed"] == "1"][-1]
        assert last > OVERFLOW_GUARD


class TestPlotData:
    def test_series(self, gtd_artifacts):
        _, out = gtd_artifacts
        rows = _read_plot(emit_plot_data(out))
        assert {r["series"] for r in rows} == {"theta_error", "norm_x", "norm_e", "rate_of_change", "f_sup"}
        err = np.array([float(r["value"]) for r in rows if r["series"] == "theta_error" and r["seed"] == "1"])
        # the transient is over within the first few percent of a run this long
        early, late = np.median(err[:len(err) // 50]), np.median(err[-len(err) // 5:])
        assert err[0] > 0.5 and late < 0.1 * early

    def test_empty_seed_list(self, gtd_artifacts, tmp_path):
        _, out = gtd_artifacts
        path = emit_plot_data(out, seeds=[], out_path=tmp_path / "p.csv")
        assert path.read_text() == "seed,step,series,value\n"

    def test_missing_artifacts(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            emit_plot_data(tmp_path)


class TestCli:
    def test_analyze(self, capsys):
        assert main(["analyze", "random_offpolicy", "--env-seed", "3", "--lambda", "0", "--lambda", "0.9"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert [e["lambda"] for e in doc["lambdas"]] == [0.0, 0.9]
        assert doc["lambdas"][0]["gtd"]["A_block"]["is_hurwitz"] is True

    def test_analyze_strict(self, capsys):
        assert main(["analyze", "divergence_star", "--strict"]) == 1
        assert main(["analyze", "divergence_star"]) == 0

    def test_unknown_environment(self, capsys):
        assert main(["analyze", "no_such_env"]) == 1
        assert "neither" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        assert main_exit(["frobnicate"]) == 1

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"environment": "tabular_chain", "algorithm": "td", "lambda": 0.0,
                                    "schedule": [1, 10], "n_steps": 100, "seeds": []}))
        assert main(["run", str(path)]) == 1
        path.write_text("{not json")
        assert main(["run", str(path)]) == 1

    def test_runtime_failure(self, tmp_path, capsys):
        p = np.zeros((3, 1, 3))
        p[0, 0, 0] = p[1, 0, 1] = 1.0
        p[2, 0] = [0.5, 0.5, 0.0]
        doc = {"n_states": 3, "n_actions": 1, "transition": p.tolist(), "reward": [[0.0]] * 3, "gamma": 0.9,
               "initial_dist": [1 / 3] * 3, "policies": {"mu": [[1.0]] * 3}, "features": np.eye(3).tolist()}
        path = tmp_path / "reducible.json"
        path.write_text(json.dumps(doc))
        assert main(["analyze", str(path)]) == 2
        assert "runtime failure" in capsys.readouterr().err

    def test_run_diagnose_plotdata(self, tmp_path, capsys):
        cfg = {"environment": "tabular_chain", "algorithm": "etd", "lambda": 0.5, "schedule": [20, 200],
               "n_steps": 30_000, "seeds": [0, 1], "output_dir": str(tmp_path / "o")}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main(["run", str(path)]) == 0
        assert main(["diagnose", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert '"seed_0"' in out and "bounded-consistent" in out
        assert main(["plotdata", str(tmp_path / "o"), "--seeds", "1"]) == 0
        rows = _read_plot(tmp_path / "o" / "plot_data.csv")
        assert {r["seed"] for r in rows} == {"1"}
        assert main(["diagnose", str(tmp_path / "nothing")]) == 1


def main_exit(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code
