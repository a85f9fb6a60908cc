import json
from pathlib import Path

import pytest

from subfed.cli import main
from subfed.config import parse_config
from subfed.experiment import compare_runs, run_experiment

TINY = [
    "--dataset", "synthetic", "--clients", "4", "--rounds", "2",
    "--sampling-rate", "1.0", "--epochs", "2", "--synth-classes", "4",
    "--synth-per-class", "70", "--synth-test-per-class", "20",
    "--shard-size", "25", "--seed", "11", "--parallelism", "1", "--quiet",
]


def run_dirs(out: Path):
    return sorted(d for d in out.glob("run-*") if d.is_dir())


class TestRunVerb:
    def test_standalone_completes_with_zero_cost(self, tmp_path, capsys):
        code = main(["run", *TINY, "--algorithm", "standalone", "--out", str(tmp_path)])
        assert code == 0
        (run_dir,) = run_dirs(tmp_path)
        ledger = json.loads((run_dir / "cost_ledger.json").read_text())
        assert ledger["total_uplink_bits"] == 0
        assert ledger["total_downlink_bits"] == 0
        assert ledger["total_bytes"] == 0
        assert "run complete" in capsys.readouterr().out

    def test_artifacts_present(self, tmp_path):
        main(["run", *TINY, "--algorithm", "fedavg", "--out", str(tmp_path)])
        (run_dir,) = run_dirs(tmp_path)
        for name in (
            "summary.csv", "rounds.ndjson", "cost_ledger.json", "config.ini",
            "client_accuracy.csv", "plot_accuracy_vs_round.csv",
            "plot_accuracy_vs_sparsity.csv",
        ):
            assert (run_dir / name).exists(), name

    def test_config_error_exit_code(self, tmp_path, capsys):
        code = main(["run", "--dataset", "synthetic", "--p-us", "120",
                     "--out", str(tmp_path)])
        assert code == 1
        assert "config error" in capsys.readouterr().err

    def test_reruns_get_fresh_directories(self, tmp_path):
        for _ in range(2):
            assert main(["run", *TINY, "--algorithm", "standalone",
                         "--out", str(tmp_path)]) == 0
        assert [d.name for d in run_dirs(tmp_path)] == ["run-0001", "run-0002"]

    def test_identical_config_reruns_byte_identical(self, tmp_path):
        for _ in range(2):
            main(["run", *TINY, "--algorithm", "sub-fedavg-un", "--p-us", "40",
                  "--r-us", "20", "--acc-th", "0", "--out", str(tmp_path)])
        a, b = run_dirs(tmp_path)
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
        assert (a / "client_accuracy.csv").read_bytes() == (
            b / "client_accuracy.csv"
        ).read_bytes()

    def test_ndjson_embeds_config_and_rounds(self, tmp_path):
        main(["run", *TINY, "--algorithm", "fedavg", "--out", str(tmp_path)])
        (run_dir,) = run_dirs(tmp_path)
        lines = (run_dir / "rounds.ndjson").read_text().splitlines()
        head = json.loads(lines[0])
        assert head["config"]["dataset"] == "synthetic"
        assert "parallelism" not in head["config"]  # execution detail, not provenance
        assert [json.loads(l)["round"] for l in lines[1:]] == [0, 1]

    def test_failed_run_leaves_no_artifacts(self, tmp_path):
        from subfed.federation import TrainingDivergedError

        cfg = parse_config(overrides=dict(
            dataset="synthetic", clients=4, rounds=2, algorithm="standalone",
            sampling_rate=1.0, synth_classes=4, synth_per_class=70,
            synth_test_per_class=20, shard_size=25, seed=11,
            output_dir=str(tmp_path), parallelism=1,
            learning_rate=1e30,  # guaranteed divergence
        ))
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingDivergedError):
                run_experiment(cfg)
        assert list(tmp_path.iterdir()) == []  # fully written or absent


class TestCompareVerb:
    def make_run(self, tmp_path, algorithm):
        main(["run", *TINY, "--algorithm", algorithm, "--out", str(tmp_path)])
        return run_dirs(tmp_path)[-1]

    def test_self_comparison_zero_deltas(self, tmp_path, capsys):
        run = self.make_run(tmp_path, "standalone")
        assert main(["compare", str(run), str(run)]) == 0
        out = capsys.readouterr().out
        entries, _ = compare_runs([run, run])
        assert entries[1]["delta_local_acc"] == 0.0
        assert entries[1]["delta_total_mb"] == 0.0
        assert "delta_local_acc" in out

    def test_two_algorithms_table(self, tmp_path):
        a = self.make_run(tmp_path, "standalone")
        b = self.make_run(tmp_path, "fedavg")
        entries, table = compare_runs([a, b])
        assert entries[0]["algorithm"] == "standalone"
        assert entries[1]["algorithm"] == "fedavg"
        assert entries[1]["total_mb"] > 0.0
        assert str(a) in table

    def test_missing_file_is_clear_error(self, tmp_path, capsys):
        run = self.make_run(tmp_path, "standalone")
        code = main(["compare", str(run), str(tmp_path / "absent")])
        assert code == 2
        assert "no summary" in capsys.readouterr().err

    def test_needs_two_runs(self, tmp_path):
        run = self.make_run(tmp_path, "standalone")
        assert main(["compare", str(run)]) == 2


class TestSmallVerbs:
    def test_cost_calculator(self, capsys):
        assert main(["cost", "--rounds", "1000", "--bits", "32",
                     "--params", "65520"]) == 0
        out = capsys.readouterr().out
        assert "MB: 524.16" in out

    def test_flops_lenet_half(self, capsys):
        assert main(["flops", "--model", "lenet5-cifar", "--channel-prune", "50"]) == 0
        out = capsys.readouterr().out
        assert "reduction 2.5076x" in out

    def test_flops_dense(self, capsys):
        assert main(["flops", "--model", "cnn5-mnist"]) == 0
        assert "reduction 1.0000x" in capsys.readouterr().out

    def test_partition_dump(self, tmp_path, capsys):
        out_file = tmp_path / "part.json"
        assert main([
            "partition-dump", *TINY, "--out", str(tmp_path),
            "--dump-out", str(out_file),
        ]) == 0
        payload = json.loads(out_file.read_text())
        assert payload["shard_size"] == 25
        assert len(payload["assignment"]) == 4
        assert all(len(v) == 50 for v in payload["assignment"].values())


class TestReductionEquivalence:
    def test_pruning_disabled_matches_fedavg_summary(self, tmp_path):
        shared = ["--p-us", "0", "--p-s", "0"]
        main(["run", *TINY, *shared, "--algorithm", "sub-fedavg-un",
              "--out", str(tmp_path / "a")])
        main(["run", *TINY, *shared, "--algorithm", "fedavg",
              "--out", str(tmp_path / "b")])

        def normalized(root):
            (run_dir,) = run_dirs(root)
            rows = []
            for line in (run_dir / "summary.csv").read_text().splitlines():
                if line.startswith("#"):
                    continue
                cells = line.split(",")
                del cells[1]  # algorithm label necessarily differs
                rows.append(",".join(cells))
            return "\n".join(rows)

        assert normalized(tmp_path / "a") == normalized(tmp_path / "b")
