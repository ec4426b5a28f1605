import json
import subprocess
import sys
from pathlib import Path

import pytest

from tweetgeo.cli import EXIT_DATA, EXIT_IO, EXIT_OK, EXIT_USAGE, file_digest, main
from tweetgeo.config import TrainConfig

SMALL = ["--set", "layers=1", "--set", "dim=16", "--set", "heads=2", "--set", "ff_dim=32",
         "--set", "fusion_heads=2", "--set", "max_len=24", "--set", "max_epochs=3",
         "--set", "eval_interval=8", "--set", "negatives=3"]


def only_run(out: Path) -> Path:
    runs = [p for p in out.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--locations", "4", "--posts", "400", "--seed", "3", "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    # default architecture: it fits the training shots before the small dev set saturates
    code = main(["train", "--data", str(corpus), "--shots", "4", "--out", str(out), "--set", "negatives=3"])
    assert code == EXIT_OK
    return only_run(out)


class TestGenData:
    def test_writes_corpus_and_manifest(self, tmp_path):
        assert main(["gen-data", "--locations", "8", "--posts", "500", "--seed", "1", "--out", str(tmp_path)]) == 0
        assert {"posts.jsonl", "locations.jsonl", "manifest.json"} <= {p.name for p in tmp_path.iterdir()}
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seeds"] == {"seed": 1}
        assert manifest["inputs"]["posts"]["sha256"] == file_digest(tmp_path / "posts.jsonl")
        assert len((tmp_path / "locations.jsonl").read_text().splitlines()) == 8

    def test_identical_digests(self, tmp_path):
        for name in ("a", "b"):
            main(["gen-data", "--locations", "5", "--posts", "300", "--seed", "7", "--out", str(tmp_path / name)])
        for f in ("posts.jsonl", "locations.jsonl"):
            assert file_digest(tmp_path / "a" / f) == file_digest(tmp_path / "b" / f)

    def test_one_location_rejected(self, tmp_path, capsys):
        assert main(["gen-data", "--locations", "1", "--posts", "10", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "at least 2" in capsys.readouterr().err

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen-data", "--locations", "3", "--posts", "50", "--out", str(blocker / "sub")]) == EXIT_IO


class TestTrain:
    def test_report_has_three_iterations(self, trained):
        report = json.loads((trained / "report.json").read_text())
        assert len(report["reports"]) == 3
        assert report["tlm_enabled"] is True
        assert sorted(p.name for p in trained.glob("iter*.npz")) == ["iter0.npz", "iter1.npz", "iter2.npz"]
        rows = (trained / "metrics.tsv").read_text().splitlines()
        assert rows[0].startswith("iteration") and rows[-1].startswith("mean")

    def test_manifest_contents(self, trained, corpus):
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train"
        config = TrainConfig.from_dict(manifest["config"])
        assert config.shots == 4 and config.negatives == 3
        assert trained.name.endswith(config.digest()[:8])
        assert manifest["inputs"]["posts"]["sha256"] == file_digest(corpus / "posts.jsonl")
        assert manifest["seeds"]["iteration_seeds"] == [0, 1, 2]
        finished = json.loads((trained / "finished.json").read_text())
        assert finished["ended"] >= manifest["started"]

    def test_reproducible_from_manifest(self, trained, corpus, tmp_path):
        code = main(["train", "--data", str(corpus), "--config", str(trained / "manifest.json"),
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        again = only_run(tmp_path)
        assert again.name.split("-")[-1] == trained.name.split("-")[-1]
        assert (again / "metrics.tsv").read_bytes() == (trained / "metrics.tsv").read_bytes()
        assert (again / "iter2.npz").read_bytes() == (trained / "iter2.npz").read_bytes()

    def test_no_tlm_flagged(self, corpus, tmp_path, capsys):
        code = main(["train", "--data", str(corpus), "--shots", "1", "--variant", "no-tlm", "--iterations", "1",
                     "--out", str(tmp_path), *SMALL])
        assert code == EXIT_OK
        assert "TLM disabled" in capsys.readouterr().out
        report = json.loads((only_run(tmp_path) / "report.json").read_text())
        assert report["tlm_enabled"] is False

    def test_unknown_flag(self, corpus):
        assert main(["train", "--data", str(corpus), "--bogus"]) == EXIT_USAGE

    def test_bad_config_value(self, corpus, tmp_path, capsys):
        assert main(["train", "--data", str(corpus), "--set", "lr=abc", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "lr" in capsys.readouterr().err

    def test_malformed_set(self, corpus, tmp_path):
        assert main(["train", "--data", str(corpus), "--set", "lr", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_DATA

    def test_flag_beats_file_and_set_beats_flag(self, corpus, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("shots = 8\niterations = 2\n")
        out = tmp_path / "o"
        code = main(["train", "--data", str(corpus), "--config", str(cfg), "--shots", "2",
                     "--out", str(out), *SMALL, "--set", "iterations=1"])
        assert code == EXIT_OK
        manifest = json.loads((only_run(out) / "manifest.json").read_text())
        assert manifest["config"]["shots"] == 2 and manifest["config"]["iterations"] == 1

    def test_global_flags_before_subcommand(self, corpus, tmp_path):
        code = main(["--seed", "5", "--out", str(tmp_path), "train", "--data", str(corpus), "--shots", "1",
                     "--iterations", "1", *SMALL])
        assert code == EXIT_OK
        assert json.loads((only_run(tmp_path) / "manifest.json").read_text())["config"]["seed"] == 5


class TestEval:
    def test_overfit_train_split(self, trained, corpus, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(trained / "iter0.npz"), "--data", str(corpus),
                     "--split", "train", "--out", str(tmp_path)])
        assert code == EXIT_OK
        metrics = json.loads((only_run(tmp_path) / "metrics.json").read_text())
        assert metrics["split"] == "train" and metrics["count"] == 16
        assert metrics["accuracy"] >= 0.95
        assert "accuracy" in capsys.readouterr().out

    def test_twice_identical(self, trained, corpus, tmp_path):
        outs = []
        for name in ("a", "b"):
            main(["eval", "--checkpoint", str(trained / "iter1.npz"), "--data", str(corpus),
                  "--split", "test", "--out", str(tmp_path / name)])
            outs.append((only_run(tmp_path / name) / "metrics.json").read_bytes())
        assert outs[0] == outs[1]

    def test_test_split_matches_training_report(self, trained, corpus, tmp_path):
        main(["eval", "--checkpoint", str(trained / "iter2.npz"), "--data", str(corpus), "--out", str(tmp_path)])
        metrics = json.loads((only_run(tmp_path) / "metrics.json").read_text())
        report = json.loads((trained / "report.json").read_text())
        assert metrics["accuracy"] == report["reports"][2]["test_metrics"]["accuracy"]

    def test_missing_checkpoint(self, corpus, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--data", str(corpus)]) == EXIT_DATA

    def test_corrupt_checkpoint(self, corpus, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a zip")
        assert main(["eval", "--checkpoint", str(bad), "--data", str(corpus)]) == EXIT_DATA


class TestAblate:
    def run(self, corpus, out, axis, *extra):
        code = main(["ablate", "--axis", axis, "--data", str(corpus), "--iterations", "1", "--shots", "1",
                     "--out", str(out), *SMALL, "--set", "max_epochs=1", *extra])
        assert code == EXIT_OK
        run = only_run(out)
        return run, json.loads((run / "rows.json").read_text())["rows"]

    def test_temperature_rows(self, corpus, tmp_path):
        run, rows = self.run(corpus, tmp_path, "temperature")
        assert [r["key"]["temperature"] for r in rows] == ["0.01", "0.03", "0.05", "0.07", "0.1", "0.3"]
        table = (run / "table.tsv").read_text().splitlines()
        assert len(table) == 7
        accs = [float(line.split("\t")[1]) for line in table[1:]]
        assert accs == sorted(accs, reverse=True)

    def test_shots_rows(self, corpus, tmp_path):
        _, rows = self.run(corpus, tmp_path, "shots")
        assert len(rows) == 9 and all(r["status"] == "ok" for r in rows)

    def test_unknown_axis(self, corpus, tmp_path):
        assert main(["ablate", "--axis", "colour", "--data", str(corpus), "--out", str(tmp_path)]) == EXIT_USAGE


class TestEntryPoint:
    def test_module_version(self):
        out = subprocess.run([sys.executable, "-m", "tweetgeo", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.startswith("tweetgeo ")

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_no_command(self):
        assert main([]) == EXIT_USAGE
