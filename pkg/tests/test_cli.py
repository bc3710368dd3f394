import json
import shutil

import pytest

from canguard.cli import main

OWNER = "female-all-ages-5"
THIEF = "male-under30-1"


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, raw_log_path):
    d = tmp_path_factory.mktemp("cli")
    shutil.copy(raw_log_path, d / "fixture.log")
    assert run("gen", "--profile", "calm", "--duration", "40", "--seed", "1",
               "--driver", OWNER, "--out", str(d / "owner.log")) == 0
    assert run("gen", "--profile", "aggressive", "--duration", "40", "--seed", "2",
               "--driver", THIEF, "--out", str(d / "thief.log")) == 0
    assert run("features", str(d / "owner.log"), str(d / "thief.log"),
               "--window", "5", "--stride", "1", "--min-frames", "50",
               "--out", str(d / "features.csv")) == 0
    return d


class TestExitCodes:
    def test_usage_error_is_1(self):
        assert run("no-such-command") == 1
        assert run() == 1

    def test_help_is_0(self, capsys):
        assert run("--help") == 0
        out = capsys.readouterr().out
        for cmd in ("ingest", "stats", "features", "train", "eval", "gen",
                    "replay", "guard", "demo"):
            assert cmd in out

    def test_data_error_is_2(self, tmp_path):
        assert run("stats", str(tmp_path / "missing.log")) == 2

    def test_model_error_is_3(self, workdir, tmp_path):
        bad = tmp_path / "bad-model.json"
        bad.write_text(json.dumps({"format": "other"}))
        assert run("eval", str(bad), str(workdir / "features.csv")) == 3


class TestStats:
    def test_prints_26_unique_ids(self, workdir, capsys):
        assert run("stats", str(workdir / "fixture.log")) == 0
        out = capsys.readouterr().out
        assert "unique ids: 26" in out
        assert "inside the 1000-2500 Hz band" in out

    def test_machine_readable_record(self, workdir, tmp_path, capsys):
        out = tmp_path / "stats.ndjson"
        assert run("stats", str(workdir / "fixture.log"), "--out", str(out)) == 0
        rec = json.loads(out.read_text().splitlines()[0])
        assert rec["unique_ids"] == 26
        assert rec["frame_count"] == 30

    def test_env_root_honored(self, workdir, capsys, monkeypatch):
        monkeypatch.setenv("CANGUARD_DATA_ROOT", str(workdir))
        assert run("stats", "fixture.log") == 0
        assert "unique ids: 26" in capsys.readouterr().out


class TestIngest:
    def test_dataset_tree(self, tmp_path, raw_log_path, capsys):
        root = tmp_path / "ds"
        leaf = root / "traverse" / OWNER
        leaf.mkdir(parents=True)
        shutil.copy(raw_log_path, leaf / "trip1.log")
        out = tmp_path / "ingest.ndjson"
        assert run("ingest", str(root), "--out", str(out)) == 0
        rec = json.loads(out.read_text().splitlines()[0])
        assert rec["driver"] == OWNER and rec["vehicle"] == "traverse"


class TestReplay:
    def test_instant_empty_trace(self, tmp_path, capsys):
        empty = tmp_path / "empty.log"
        empty.write_text("")
        assert run("replay", str(empty), "--instant") == 0
        assert "delivered 0 frames" in capsys.readouterr().out

    def test_instant_fixture_with_capture(self, workdir, tmp_path, capsys):
        cap = tmp_path / "captured.log"
        assert run("replay", str(workdir / "fixture.log"), "--instant",
                   "--capture", str(cap)) == 0
        assert "delivered 30 frames" in capsys.readouterr().out
        assert cap.read_bytes() == (workdir / "fixture.log").read_bytes()


class TestPipeline:
    def test_train_eval_kmeans(self, workdir, tmp_path, capsys):
        model = tmp_path / "m.json"
        assert run("train", str(workdir / "features.csv"), "--model", "kmeans",
                   "--authorized", OWNER, "--seed", "3", "--out", str(model)) == 0
        out = capsys.readouterr().out
        assert "# seed: 3" in out
        metrics = tmp_path / "metrics.json"
        assert run("eval", str(model), str(workdir / "features.csv"),
                   "--out", str(metrics)) == 0
        rec = json.loads(metrics.read_text())
        assert rec["accuracy"] > 0.8

    def test_train_knn_with_pca(self, workdir, tmp_path):
        model = tmp_path / "knn.json"
        assert run("train", str(workdir / "features.csv"), "--model", "knn",
                   "--authorized", OWNER, "--pca", "10", "--out", str(model)) == 0
        assert run("eval", str(model), str(workdir / "features.csv")) == 0

    def test_features_with_lags_and_pca(self, workdir, tmp_path):
        out = tmp_path / "f2.csv"
        assert run("features", str(workdir / "owner.log"), "--window", "5",
                   "--stride", "1", "--min-frames", "50", "--lags", "1,2",
                   "--pca", "8", "--out", str(out)) == 0
        header = out.read_text().splitlines()[0]
        assert header.startswith("window_start,label,pc0")

    def test_guard_on_trace(self, workdir, tmp_path, capsys):
        model = tmp_path / "m.json"
        run("train", str(workdir / "features.csv"), "--model", "kmeans",
            "--authorized", OWNER, "--out", str(model))
        log = tmp_path / "events.ndjson"
        assert run("guard", str(model), "--source", "trace",
                   "--trace", str(workdir / "thief.log"),
                   "--grace", "5", "--initial-window", "5",
                   "--window", "5", "--stride", "1", "--min-frames", "50",
                   "--instant", "--log", str(log)) == 0
        out = capsys.readouterr().out
        assert "disabled" in out
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert any(r["kind"] == "injection_started" for r in records)


class TestDemo:
    def test_demo_phase_sequence(self, tmp_path, capsys):
        out = tmp_path / "demo"
        assert run("demo", "--seed", "0", "--out", str(out)) == 0
        printed = capsys.readouterr().out
        assert "pending -> authenticated -> warning -> disabled" in printed
        records = [json.loads(line) for line in (out / "events.ndjson").read_text().splitlines()]
        phases = [r["detail"]["to"] for r in records if r["kind"] == "phase_change"]
        assert phases == ["authenticated", "warning", "disabled"]
        warn = next(r for r in records if r["kind"] == "warning_issued")
        assert warn["detail"]["grace_period"] == 10.0
