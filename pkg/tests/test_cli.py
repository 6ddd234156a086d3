import json
import subprocess
import sys
from pathlib import Path

import pytest

from sentinel.baselines import DetectorContext, score_log
from sentinel.cli import _bundled_config, main
from sentinel.evaluation import detector_source, verdict_from_series
from sentinel.calibration import CalibrationResult
from sentinel.rollout import read_log

FIXTURES = Path(__file__).parent / "fixtures"

FAST_SCENARIO = {
    "episode_limit": 16,
    "batch_size": 8,
    "gain": 0.2,
}


def run_cli(argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    return code


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(FAST_SCENARIO))
    return path


@pytest.fixture(scope="module")
def synth_nominal(tmp_path_factory):
    """Six nominal logs under the fast scenario, shared across tests."""
    root = tmp_path_factory.mktemp("synth")
    config = root / "scenario.json"
    config.write_text(json.dumps(FAST_SCENARIO))
    out = root / "logs"
    code = main(["synth", "--scenario", "nominal", "--n", "6", "--seed", "3",
                 "--out", str(out), "--config", str(config)])
    assert code == 0
    return out, config


class TestSynth:
    def test_manifest_and_files(self, capsys, tmp_path, fast_config):
        out = tmp_path / "logs"
        code = run_cli(["synth", "--scenario", "nominal", "--n", "3",
                        "--seed", "1", "--out", out, "--config", fast_config])
        captured = capsys.readouterr()
        assert code == 0
        manifest = json.loads(captured.out)
        assert manifest["n"] == 3
        assert manifest["behavior"] == "consistent"
        assert len(manifest["files"]) == 3
        assert manifest["seeds"] == [1_000_000, 1_000_001, 1_000_002]
        for name in manifest["files"]:
            assert (out / name).is_file()
        assert manifest["labels"]["success"] + manifest["labels"]["failure"] == 3

    def test_same_seed_same_bytes(self, capsys, tmp_path, fast_config):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, jobs in ((a, "1"), (b, "4")):
            code = run_cli(["synth", "--scenario", "erratic", "--n", "3",
                            "--seed", "7", "--out", out, "--config", fast_config,
                            "--jobs", jobs])
            assert code == 0
        capsys.readouterr()
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_stall_scenario_fails_task(self, capsys, tmp_path, fast_config):
        out = tmp_path / "logs"
        code = run_cli(["synth", "--scenario", "stall", "--n", "2", "--out", out,
                        "--config", fast_config])
        captured = capsys.readouterr()
        assert code == 0
        manifest = json.loads(captured.out)
        assert manifest["labels"] == {"success": 0, "failure": 2}

    def test_unknown_scenario_is_usage_error(self, capsys, tmp_path):
        code = run_cli(["synth", "--scenario", "tornado", "--n", "1",
                        "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 2
        error = json.loads(captured.err)
        assert error["error"]["type"] == "usage"

    def test_nonpositive_n_rejected(self, capsys, tmp_path):
        code = run_cli(["synth", "--scenario", "nominal", "--n", "0",
                        "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 2
        assert json.loads(captured.err)["error"]["type"] == "usage"


class TestCalibrate:
    def test_writes_envelope(self, capsys, tmp_path, synth_nominal):
        logs_dir, config = synth_nominal
        out = tmp_path / "cal.json"
        code = run_cli(["calibrate", "--detector", "stac-mmd",
                        "--logs", f"{logs_dir}/*.jsonl", "--delta", "0.4",
                        "--out", out, "--config", config])
        captured = capsys.readouterr()
        assert code == 0
        envelope = json.loads(out.read_text())
        assert envelope["detector"] == "stac-mmd"
        result = CalibrationResult.from_json_obj(envelope["result"])
        assert result.m == 6
        assert not result.is_infinite
        summary = json.loads(captured.out)
        assert summary["gamma"] == pytest.approx(result.gamma)

    def test_small_set_warns_infinite(self, capsys, tmp_path, synth_nominal):
        logs_dir, config = synth_nominal
        out = tmp_path / "cal.json"
        code = run_cli(["calibrate", "--detector", "stac-mmd",
                        "--logs", f"{logs_dir}/*.jsonl", "--delta", "0.05",
                        "--out", out, "--config", config])
        captured = capsys.readouterr()
        assert code == 0
        warning = json.loads(captured.err)
        assert "never flag" in warning["warning"]
        assert json.loads(out.read_text())["result"]["gamma"] == "inf"

    def test_refuses_failure_labeled_logs(self, capsys, tmp_path, fast_config):
        out = tmp_path / "stall_logs"
        run_cli(["synth", "--scenario", "stall", "--n", "2", "--out", out,
                 "--config", fast_config])
        capsys.readouterr()
        code = run_cli(["calibrate", "--detector", "stac-mmd",
                        "--logs", f"{out}/*.jsonl", "--out", tmp_path / "cal.json"])
        captured = capsys.readouterr()
        assert code == 1
        assert json.loads(captured.err)["error"]["type"] == "label"

    def test_empty_glob_errors(self, capsys, tmp_path):
        code = run_cli(["calibrate", "--detector", "stac-mmd",
                        "--logs", f"{tmp_path}/none/*.jsonl",
                        "--out", tmp_path / "cal.json"])
        captured = capsys.readouterr()
        assert code == 1
        assert json.loads(captured.err)["error"]["type"] == "io"

    def test_mahalanobis_persists_embedding_stats(self, capsys, tmp_path, synth_nominal):
        logs_dir, config = synth_nominal
        out = tmp_path / "cal.json"
        code = run_cli(["calibrate", "--detector", "mahalanobis",
                        "--logs", f"{logs_dir}/*.jsonl", "--delta", "0.4",
                        "--out", out, "--config", config])
        capsys.readouterr()
        assert code == 0
        envelope = json.loads(out.read_text())
        stats = envelope["embedding_stats"]
        assert len(stats["mean"]) == 2
        assert len(stats["covariance"]) == 2


class TestDetect:
    @pytest.fixture()
    def calibrated(self, capsys, tmp_path, synth_nominal):
        logs_dir, config = synth_nominal
        cal = tmp_path / "cal.json"
        run_cli(["calibrate", "--detector", "stac-mmd",
                 "--logs", f"{logs_dir}/*.jsonl", "--delta", "0.4",
                 "--out", cal, "--config", config])
        capsys.readouterr()
        return logs_dir, config, cal

    def test_matches_library_composition(self, capsys, tmp_path, fast_config, calibrated):
        logs_dir, config, cal = calibrated
        erratic = tmp_path / "erratic"
        run_cli(["synth", "--scenario", "erratic", "--n", "1", "--seed", "2",
                 "--out", erratic, "--config", fast_config])
        capsys.readouterr()
        log_path = next(erratic.glob("*.jsonl"))
        code = run_cli(["detect", "--detector", "stac-mmd", "--calibration", cal,
                        "--log", log_path, "--config", config])
        captured = capsys.readouterr()
        assert code == 0
        reported = json.loads(captured.out)

        log = read_log(log_path)
        series = score_log("stac-mmd", log, DetectorContext(seed=0))
        gamma = CalibrationResult.from_json_obj(
            json.loads(cal.read_text())["result"]).gamma
        expected = verdict_from_series(series, gamma, detector_source("stac-mmd"),
                                       log.header.step_duration)
        assert reported["decision"] == expected.decision
        if expected.decision == "failure":
            assert reported["detection_timestep"] == expected.detection_timestep
        assert reported["detector"] == "stac-mmd"
        assert reported["gamma"] == pytest.approx(gamma)

    def test_emit_series_round_trips_floats(self, capsys, tmp_path, calibrated):
        logs_dir, config, cal = calibrated
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        series_csv = tmp_path / "series.csv"
        code = run_cli(["detect", "--detector", "stac-mmd", "--calibration", cal,
                        "--log", log_path, "--config", config,
                        "--emit-series", series_csv])
        capsys.readouterr()
        assert code == 0
        lines = series_csv.read_text().splitlines()
        assert lines[0] == "timestep,step_score,cumulative"
        log = read_log(log_path)
        series = score_log("stac-mmd", log, DetectorContext(seed=0))
        assert len(lines) == 1 + len(series.timesteps)
        for line, t, s, c in zip(lines[1:], series.timesteps,
                                 series.step_scores, series.cumulative):
            ts, ss, cs = line.split(",")
            assert int(ts) == t
            assert float(ss) == s  # repr round-trip is exact
            assert float(cs) == c

    def test_detector_mismatch_rejected(self, capsys, calibrated):
        logs_dir, config, cal = calibrated
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["detect", "--detector", "min-l2", "--calibration", cal,
                        "--log", log_path, "--config", config])
        captured = capsys.readouterr()
        assert code == 1
        assert json.loads(captured.err)["error"]["type"] == "config"

    def test_missing_log_errors(self, capsys, calibrated):
        logs_dir, config, cal = calibrated
        code = run_cli(["detect", "--detector", "stac-mmd", "--calibration", cal,
                        "--log", logs_dir / "missing.jsonl", "--config", config])
        captured = capsys.readouterr()
        assert code == 1
        assert json.loads(captured.err)["error"]["type"] == "io"


class TestEval:
    def _benchmark_config(self, tmp_path):
        obj = {
            "scenario": FAST_SCENARIO,
            "detectors": ["stac-mmd", "min-l2"],
            "n_calibration": 6,
            "test_counts": {"consistent": 3, "mode_resample": 3},
            "delta": 0.4,
            "master_seed": 5,
            "sentinel_detector": "stac-mmd",
            "monitor": {"true_positive_rate": 1.0, "false_positive_rate": 0.0},
        }
        path = tmp_path / "bench.json"
        path.write_text(json.dumps(obj))
        return path

    def test_runs_battery_and_writes_artifacts(self, capsys, tmp_path):
        config = self._benchmark_config(tmp_path)
        out = tmp_path / "results"
        code = run_cli(["eval", "--config", config, "--out", out, "--jobs", "2"])
        captured = capsys.readouterr()
        assert code == 0
        report = json.loads(captured.out)
        assert set(report["metrics"]) >= {"stac-mmd", "min-l2", "vlm", "sentinel"}
        assert (out / "report.json").is_file()
        assert (out / "verdicts.csv").is_file()
        assert (out / "scores.svg").is_file()

    def test_pretty_prints_table(self, capsys, tmp_path):
        config = self._benchmark_config(tmp_path)
        code = run_cli(["eval", "--config", config, "--out", tmp_path / "r",
                        "--jobs", "2", "--pretty"])
        captured = capsys.readouterr()
        assert code == 0
        assert "detector" in captured.out
        assert "sentinel" in captured.out
        assert "tpr" in captured.out

    def test_bundled_names_resolve(self):
        for name in ("erratic", "stall", "drift", "erratic.json"):
            assert _bundled_config(name) is not None
        assert _bundled_config("imaginary") is None

    def test_unknown_config_errors(self, capsys, tmp_path):
        code = run_cli(["eval", "--config", "imaginary", "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 1
        assert json.loads(captured.err)["error"]["type"] == "config"


class TestVlm:
    def test_mock_failure_fixture_flags(self, capsys, synth_nominal):
        logs_dir, config = synth_nominal
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["vlm", "--log", log_path, "--transport", "mock",
                        "--fixtures", FIXTURES / "mock_vlm_failure"])
        captured = capsys.readouterr()
        assert code == 0
        verdict = json.loads(captured.out)
        assert verdict["decision"] == "failure"
        assert "detection_timestep" in verdict
        assert len(verdict["checkpoints"]) >= 1
        assert verdict["mean_latency_seconds"] >= 0.0

    def test_mock_ok_fixture_passes(self, capsys, synth_nominal):
        logs_dir, config = synth_nominal
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["vlm", "--log", log_path, "--transport", "mock",
                        "--fixtures", FIXTURES / "mock_vlm_ok"])
        captured = capsys.readouterr()
        assert code == 0
        verdict = json.loads(captured.out)
        assert verdict["decision"] == "ok"
        assert "detection_timestep" not in verdict
        assert all(c["votes"] == ["ok"] for c in verdict["checkpoints"])

    def test_ensemble_requires_aux_frames(self, capsys, synth_nominal):
        logs_dir, config = synth_nominal
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["vlm", "--log", log_path, "--transport", "mock",
                        "--fixtures", FIXTURES / "mock_vlm_ok", "--ensemble"])
        captured = capsys.readouterr()
        assert code == 2
        assert json.loads(captured.err)["error"]["type"] == "usage"

    def test_ensemble_with_aux_votes_all_templates(self, capsys, synth_nominal):
        logs_dir, config = synth_nominal
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["vlm", "--log", log_path, "--transport", "mock",
                        "--fixtures", FIXTURES / "mock_vlm_failure", "--ensemble",
                        "--aux-frames", "ref0.png", "ref1.png"])
        captured = capsys.readouterr()
        assert code == 0
        verdict = json.loads(captured.out)
        assert all(len(c["votes"]) == 3 for c in verdict["checkpoints"])
        assert verdict["decision"] == "failure"

    def test_mock_requires_fixture_dir(self, capsys, synth_nominal):
        logs_dir, config = synth_nominal
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["vlm", "--log", log_path, "--transport", "mock"])
        captured = capsys.readouterr()
        assert code == 2
        assert json.loads(captured.err)["error"]["type"] == "usage"

    def test_http_requires_url_and_model(self, capsys, synth_nominal):
        logs_dir, config = synth_nominal
        log_path = sorted(logs_dir.glob("*.jsonl"))[0]
        code = run_cli(["vlm", "--log", log_path, "--transport", "http"])
        captured = capsys.readouterr()
        assert code == 2
        assert json.loads(captured.err)["error"]["type"] == "usage"


class TestErrorContract:
    def test_unknown_flag(self, capsys):
        code = run_cli(["detect", "--bogus"])
        captured = capsys.readouterr()
        assert code == 2
        error = json.loads(captured.err)
        assert error["error"]["type"] == "usage"

    def test_unknown_command(self, capsys):
        code = run_cli(["transmogrify"])
        captured = capsys.readouterr()
        assert code == 2
        assert json.loads(captured.err)["error"]["type"] == "usage"

    def test_console_script_installed(self):
        proc = subprocess.run([sys.executable, "-m", "sentinel.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout
        assert "calibrate" in proc.stdout
