import csv
import dataclasses
import json
import math
import subprocess
import sys

import pytest

from protoncd import trainer
from protoncd.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ExperimentConfig, main, parse_candidates
from protoncd.data import dataset_digest, load_dataset
from protoncd.errors import ConfigError

SMALL = dict(d_model=8, d_h=4, layers=1, heads=2, ffn_hidden=8, batch_size=16, epochs=2, k_new=2)


def listing(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*"))


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "vmf", "--classes", "4", "--dim", "8", "--kappa", "20", "--per-class", "10",
                 "--k-base", "2", "--ood-classes", "1", "--include-normal", "--seed", "3",
                 "--out-dir", "data", "--name", "mix"]) == EXIT_OK
    return tmp_path


def write_config(root, name="exp.json", **overrides):
    cfg = {"dataset": "data/mix.jsonl", "output_dir": "run", "train": dict(SMALL)}
    cfg.update(overrides)
    (root / name).write_text(json.dumps(cfg))
    return name


class TestSynth:
    def test_vmf_count_and_digest(self, workdir, capsys):
        ds = load_dataset(workdir / "data" / "mix.jsonl")
        assert len(ds.samples) == 5 * 10 + 10
        digest = (workdir / "data" / "mix.sha256").read_text().strip()
        assert digest == dataset_digest(ds)
        assert main(["synth", "vmf", "--classes", "4", "--dim", "8", "--kappa", "20", "--per-class", "10",
                     "--k-base", "2", "--ood-classes", "1", "--include-normal", "--seed", "3",
                     "--out-dir", "again", "--name", "mix"]) == EXIT_OK
        assert (workdir / "again" / "mix.jsonl").read_bytes() == (workdir / "data" / "mix.jsonl").read_bytes()
        assert digest in capsys.readouterr().out

    def test_toy_normal_maps(self, tmp_path):
        assert main(["synth", "toy", "--types", "2", "--grid", "16", "--seed", "1", "--out-dir", str(tmp_path),
                     "--name", "toy"]) == EXIT_OK
        ds = load_dataset(tmp_path / "toy.jsonl")
        normal = [s for s in ds.samples if s.gt_label == ds.normal_label]
        assert normal and all(s.anomaly_map.max() == 0.0 for s in normal)
        assert all(s.anomaly_map.max() > 0 for s in ds.samples if s.gt_label != ds.normal_label)

    def test_invalid_parameters_exit_2(self, tmp_path):
        assert main(["synth", "vmf", "--classes", "1", "--dim", "8", "--kappa", "20", "--per-class", "10",
                     "--out-dir", str(tmp_path)]) == EXIT_USAGE


class TestTrainEval:
    def test_dry_run_writes_nothing(self, workdir):
        before = listing(workdir)
        assert main(["train", write_config(workdir), "--dry-run"]) == EXIT_OK
        assert listing(workdir) == sorted(before + ["exp.json"])

    def test_train_then_eval_and_ood(self, workdir):
        assert main(["train", write_config(workdir)]) == EXIT_OK
        run = workdir / "run"
        assert sorted(p.name for p in run.iterdir()) == ["checkpoint.json", "report.json", "train_log.csv"]
        report = json.loads((run / "report.json").read_text())
        assert report["format"] == "protoncd-report" and report["command"] == "train"
        assert report["dataset_digest"] == (workdir / "data" / "mix.sha256").read_text().strip()
        with open(run / "train_log.csv") as fh:
            assert len(list(csv.DictReader(fh))) == report["steps"]

        assert main(["eval", "run/checkpoint.json", "data/mix.jsonl", "--out-dir", "ev"]) == EXIT_OK
        ev = json.loads((workdir / "ev" / "eval_report.json").read_text())
        assert ev["metrics"] == report["metrics"]

        assert main(["ood", "run/checkpoint.json", "data/mix.jsonl", "--out-dir", "od", "--method", "energy",
                     "--energy-temperature", "2.0"]) == EXIT_OK
        od = json.loads((workdir / "od" / "ood_report.json").read_text())
        assert [r["method"] for r in od["ood"]] == ["energy"]
        assert 0.0 <= od["ood"][0]["auroc"] <= 1.0
        assert listing(workdir) == sorted(
            ["data", "data/mix.jsonl", "data/mix.sha256", "exp.json", "ev", "ev/eval_report.json", "od",
             "od/ood_report.json", "run", "run/checkpoint.json", "run/report.json", "run/train_log.csv"]
        )

    def test_estimate_then_train(self, workdir, capsys):
        train_cfg = {**SMALL, "k_new": "estimate", "budget_steps": 3}
        name = write_config(workdir, train=train_cfg, candidates="1..2")
        assert main(["train", name]) == EXIT_OK
        report = json.loads((workdir / "run" / "report.json").read_text())
        assert report["k_new"] in (1, 2) and len(report["candidates"]) == 2
        assert (workdir / "run" / "candidates.csv").is_file()

    def test_estimate_k_command(self, workdir, capsys):
        name = write_config(workdir, train={**SMALL, "budget_steps": 3})
        assert main(["estimate-k", name, "--candidates", "1,3"]) == EXIT_OK
        assert "chosen k_new =" in capsys.readouterr().out
        with open(workdir / "run" / "candidates.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["k_new_candidate"]) for r in rows] == [1, 3]
        rep = json.loads((workdir / "run" / "estimate_report.json").read_text())
        assert rep["chosen_k_new"] in (1, 3)

    def test_numerical_abort_exit_3(self, workdir, monkeypatch):
        real = trainer.batch_objective

        def poisoned(*args, **kwargs):
            loss, g, dmu = real(*args, **kwargs)
            return dataclasses.replace(loss, value=math.nan), g, dmu

        monkeypatch.setattr(trainer, "batch_objective", poisoned)
        assert main(["train", write_config(workdir)]) == EXIT_NUMERIC
        assert (workdir / "run" / "checkpoint_last_good.json").is_file()


class TestUsageErrors:
    def test_missing_dataset(self, workdir, capsys):
        name = write_config(workdir, dataset="data/absent.jsonl")
        assert main(["train", name]) == EXIT_USAGE
        assert "absent.jsonl" in capsys.readouterr().err

    def test_unknown_config_key(self, workdir, capsys):
        assert main(["train", write_config(workdir, learning_rate=0.1)]) == EXIT_USAGE
        assert "learning_rate" in capsys.readouterr().err

    def test_unknown_nested_key(self, workdir):
        assert main(["train", write_config(workdir, train={"temps": {"tau_x": 1.0}})]) == EXIT_USAGE

    def test_empty_candidates(self, workdir):
        assert main(["estimate-k", write_config(workdir), "--candidates", "5..3"]) == EXIT_USAGE

    def test_unknown_method(self, workdir, capsys):
        with pytest.raises(SystemExit) as info:
            main(["ood", "x.json", "data/mix.jsonl", "--method", "maha"])
        assert info.value.code == EXIT_USAGE
        err = capsys.readouterr().err
        assert all(m in err for m in ("msp", "mls", "energy"))

    def test_missing_checkpoint(self, workdir):
        assert main(["eval", "nope.json", "data/mix.jsonl"]) == EXIT_USAGE

    def test_incompatible_dataset(self, workdir):
        assert main(["train", write_config(workdir)]) == EXIT_OK
        main(["synth", "vmf", "--classes", "4", "--dim", "9", "--kappa", "20", "--per-class", "5",
              "--k-base", "2", "--out-dir", "data", "--name", "wide"])
        assert main(["eval", "run/checkpoint.json", "data/wide.jsonl", "--out-dir", "ev"]) == EXIT_USAGE


class TestConfigParsing:
    @pytest.mark.parametrize("spec,expect", [("1..4", [1, 2, 3, 4]), ("2,5", [2, 5]), ([3], [3])])
    def test_parse_candidates(self, spec, expect):
        assert parse_candidates(spec) == expect

    @pytest.mark.parametrize("spec", ["", "4..1", "a..b", [-1], 7])
    def test_bad_candidates(self, spec):
        with pytest.raises(ConfigError):
            parse_candidates(spec)

    def test_default_range(self):
        exp = ExperimentConfig.from_dict({"dataset": "d", "output_dir": "o", "train": {"k_new": 2}})
        assert exp.candidate_range() == [1, 2, 3, 4]
        exp = ExperimentConfig.from_dict({"dataset": "d", "output_dir": "o", "train": {"k_new": "estimate"}})
        assert exp.candidate_range() == [1, 2, 3, 4, 5, 6]

    def test_roundtrip(self):
        exp = ExperimentConfig.from_dict({"dataset": "d", "output_dir": "o", "candidates": "1..3", "jobs": 2})
        assert ExperimentConfig.from_dict(exp.to_dict()) == exp


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "protoncd.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "protoncd" in res.stdout
