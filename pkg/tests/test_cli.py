import csv
import io

import numpy as np
import pytest

from spcascade.cli import build_parser, format_metrics, grid_bench, main
from spcascade.data import load_cascade, load_model, read_sequence_dataset
from spcascade.training import MetricsRow

FAST = ["--set", "epochs=1", "--set", "dimension=4096", "--set", "final_order=2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for name, seed, n in (("train", 1, 40), ("dev", 2, 20)):
        assert main(["synth", "--order", "2", "--K", "3", "--n", str(n), "--min-length", "4", "--max-length", "7",
                     "--seed", str(seed), "--out", str(d / f"{name}.txt")]) == 0
    assert main(["train", "--data", str(d / "train.txt"), "--dev", str(d / "dev.txt"), "--out", str(d / "run")]
                + FAST) == 0
    return d


class TestSynth:
    def test_splits_share_the_task(self, workdir):
        train = read_sequence_dataset(workdir / "train.txt")
        dev = read_sequence_dataset(workdir / "dev.txt")
        assert train.metadata["task_seed"] == dev.metadata["task_seed"] == "0"
        assert len(train) == 40 and train.K == 3

    def test_grid_kinds(self, tmp_path):
        assert main(["synth", "--kind", "grid", "--rows", "2", "--cols", "2", "--K", "2",
                     "--out", str(tmp_path / "g.json")]) == 0
        assert main(["synth", "--kind", "grid-task", "--n", "3", "--out", str(tmp_path / "t.json")]) == 0


class TestTrainEval:
    def test_outputs(self, workdir):
        run = workdir / "run"
        cascade = load_cascade(run / "cascade.ckpt")
        assert len(cascade.stages) == 3
        assert load_model(run / "level3.model").order == 2
        lines = (run / "metrics.tsv").read_text().splitlines()
        assert lines[0].split("\t") == list(MetricsRow.FIELDS)
        assert len(lines) == 4

    def test_eval_matches_training_metrics(self, workdir, capsys):
        assert main(["eval", "--model", str(workdir / "run" / "cascade.ckpt"), "--data", str(workdir / "dev.txt"),
                     "--trace", str(workdir / "trace.tsv")]) == 0
        out = capsys.readouterr().out
        assert out == (workdir / "run" / "metrics.tsv").read_text()
        trace = (workdir / "trace.tsv").read_text().splitlines()
        assert trace[0] == "example\tstage\tsurvivors" and len(trace) == 1 + 20 * 3
        # the first stage sees every state
        assert set(trace[1].split("\t")[2].split(",")) == {"3"}

    def test_filter_stats(self, workdir, capsys):
        assert main(["filter-stats", "--model", str(workdir / "run" / "cascade.ckpt"),
                     "--data", str(workdir / "dev.txt")]) == 0
        rows = capsys.readouterr().out.splitlines()
        assert rows[1].split("\t")[:3] == ["1", "20", "20"]
        assert float(rows[1].split("\t")[4]) == 1.0

    def test_ensemble_round_trip(self, tmp_path, capsys):
        for name, seed in (("tr", 0), ("dv", 1)):
            main(["synth", "--kind", "grid-task", "--rows", "2", "--cols", "3", "--K", "2", "--n", "6",
                  "--seed", str(seed), "--out", str(tmp_path / f"{name}.json")])
        assert main(["train", "--ensemble", "--data", str(tmp_path / "tr.json"), "--dev", str(tmp_path / "dv.json"),
                     "--out", str(tmp_path / "run"), "--set", "epochs=1", "--set", "dimension=256"]) == 0
        assert main(["eval", "--ensemble", "--model", str(tmp_path / "run" / "cascade.ckpt"),
                     "--data", str(tmp_path / "dv.json")]) == 0
        assert capsys.readouterr().out.startswith("level\talpha")


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert main([]) == 2
        assert main(["synth", "--n", "-1", "--out", "x"]) == 2
        assert main(["--help"]) == 0

    def test_config_error(self, workdir, capsys):
        code = main(["train", "--data", str(workdir / "train.txt"), "--dev", str(workdir / "dev.txt"),
                     "--out", str(workdir / "bad"), "--set", "colour=red"])
        assert code == 2 and "config error" in capsys.readouterr().err

    def test_runtime_error(self, tmp_path, capsys):
        assert main(["eval", "--model", str(tmp_path / "missing"), "--data", str(tmp_path / "x")]) == 1
        (tmp_path / "junk").write_bytes(b"garbage")
        (tmp_path / "d.txt").write_text("#K=2\n0:a\n")
        assert main(["eval", "--model", str(tmp_path / "junk"), "--data", str(tmp_path / "d.txt")]) == 1
        assert "FormatError" in capsys.readouterr().err


class TestGridBench:
    def test_csv(self):
        rows = list(csv.DictReader(io.StringIO(grid_bench(2, 3, 3, 4, 0))))
        assert [int(r["top_k"]) for r in rows] == [1, 2, 3]
        assert all(float(r["exact_miss"]) == 0.0 for r in rows)
        assert all(int(r["nodes"]) == 24 for r in rows)
        ens = [float(r["ensemble_miss"]) for r in rows]
        assert ens == sorted(ens, reverse=True) and ens[-1] == 0.0
        for r in rows:
            assert float(r["submodel_min_miss"]) <= float(r["submodel_mean_miss"]) <= float(r["submodel_max_miss"])

    def test_deterministic(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["grid-bench", "--rows", "2", "--cols", "2", "--K", "2", "--N", "3", "--out", str(out)]) == 0
        assert out.read_text() == grid_bench(2, 2, 2, 3, 0)

    def test_no_instances(self):
        assert grid_bench(2, 2, 2, 0, 0).count("\n") == 1


class TestFormatting:
    def test_metrics_blank_alpha(self):
        text = format_metrics([MetricsRow(1, None, None, 0.5, 1.0, 0.25, 0.0)])
        fields = text.splitlines()[1].split("\t")
        assert fields[:3] == ["1", "", ""] and fields[3] == "0.500000"

    def test_help_documents_columns(self):
        sub = build_parser()._subparsers._group_actions[0].choices
        assert "filter_loss" in sub["train"].epilog and "ensemble_miss" in sub["grid-bench"].epilog
