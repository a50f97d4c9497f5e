import numpy as np
import pytest

from mtlbench.cli import main
from mtlbench.data import generic_schema, load_csv

TINY_TOML = """
[data]
synthetic = true
feature_dim = 6
task_names = ["reg_a", "reg_b", "cls_c"]
task_kinds = ["regression", "regression", "classification"]
task_counts = [200, 60, 60]
relatedness = 0.5
seed = 1

[train]
max_epochs = 2
early_stop_patience = 2
seeds = [1, 2]

[model]
hidden = 8
head_hidden = 6
embed_dim = 8
gcn_hidden = 8
edge_hidden = 5
fusion_hidden = 4

[experiment]
split_seed = 3
sweep_counts = [60, 120]
sweep_majority_task = "reg_a"
transfer_source = "reg_a"
transfer_target = "reg_b"
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TINY_TOML)
    return str(path)


def run_dirs(base):
    return sorted(p for p in base.iterdir() if p.is_dir())


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert main(["compare"]) == 1

    def test_bad_config_key_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text(TINY_TOML + "\n[train2]\nx = 1\n")
        assert main(["compare", "--config", str(bad)]) == 1
        assert "train2" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        assert main(["compare", "--config", "/nonexistent/run.toml"]) == 1

    def test_missing_csv_is_runtime_error(self, tmp_path, capsys):
        cfg = tmp_path / "csv.toml"
        cfg.write_text('[data]\ncsv = "/nonexistent/data.csv"\n')
        assert main(["compare", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_bad_seed_list(self, config_path, capsys):
        assert main(["compare", "--config", config_path, "--seeds", "4x"]) == 1


class TestCompare:
    def test_smoke_and_outputs(self, config_path, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["compare", "--config", config_path, "--out", str(out)]) == 0
        (run_dir,) = run_dirs(out)
        assert (run_dir / "report.json").exists()
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "ttests.csv").exists()

    def test_seed_override_single_seed(self, config_path, tmp_path):
        out = tmp_path / "runs"
        with pytest.warns(UserWarning, match="single record"):
            assert main(["compare", "--config", config_path, "--seeds", "1",
                         "--out", str(out), "--format", "csv"]) == 0
        (run_dir,) = run_dirs(out)
        body = (run_dir / "metrics.csv").read_text().splitlines()[1:]
        assert all(line.endswith(",1") for line in body)  # n_seeds column

    def test_deterministic_metric_csvs(self, config_path, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["compare", "--config", config_path, "--out", str(out1)]) == 0
        assert main(["compare", "--config", config_path, "--out", str(out2)]) == 0
        (d1,), (d2,) = run_dirs(out1), run_dirs(out2)
        assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
        assert (d1 / "ttests.csv").read_bytes() == (d2 / "ttests.csv").read_bytes()

    def test_env_var_out_dir(self, config_path, tmp_path, monkeypatch):
        env_dir = tmp_path / "envruns"
        monkeypatch.setenv("MTLBENCH_OUT", str(env_dir))
        assert main(["compare", "--config", config_path, "--format", "csv"]) == 0
        assert run_dirs(env_dir)


class TestOtherSubcommands:
    def test_sweep_uses_config_counts(self, config_path, tmp_path):
        out = tmp_path / "runs"
        assert main(["sweep", "--config", config_path, "--out", str(out)]) == 0
        (run_dir,) = run_dirs(out)
        lines = (run_dir / "sweep_curve.csv").read_text().splitlines()
        assert len(lines) == 3  # header + 2 counts

    def test_sweep_flag_overrides_counts(self, config_path, tmp_path):
        out = tmp_path / "runs"
        assert main(["sweep", "--config", config_path, "--counts", "80",
                     "--out", str(out)]) == 0
        (run_dir,) = run_dirs(out)
        lines = (run_dir / "sweep_curve.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_sweep_count_too_large_is_usage_error(self, config_path, tmp_path):
        assert main(["sweep", "--config", config_path, "--counts", "99999",
                     "--out", str(tmp_path)]) == 1

    def test_conflict(self, config_path, tmp_path):
        out = tmp_path / "runs"
        assert main(["conflict", "--config", config_path, "--out", str(out),
                     "--seeds", "1,2"]) == 0
        (run_dir,) = run_dirs(out)
        assert (run_dir / "cosine_matrix.csv").exists()
        assert (run_dir / "conflict.csv").exists()

    def test_transfer(self, config_path, tmp_path):
        out = tmp_path / "runs"
        assert main(["transfer", "--config", config_path, "--out", str(out)]) == 0
        (run_dir,) = run_dirs(out)
        assert (run_dir / "transfer_bars.csv").exists()

    def test_relations(self, config_path, tmp_path):
        out = tmp_path / "runs"
        assert main(["relations", "--config", config_path, "--out", str(out)]) == 0
        (run_dir,) = run_dirs(out)
        lines = (run_dir / "relations.csv").read_text().splitlines()
        assert lines[0] == "source,target,mean,std,n_seeds"
        assert len(lines) == 10  # 3x3 ordered pairs

    def test_synth_round_trip(self, config_path, tmp_path):
        out_csv = tmp_path / "synth.csv"
        assert main(["synth", "--config", config_path, "--out", str(out_csv)]) == 0
        schema = generic_schema(6, ["reg_a", "reg_b", "cls_c"],
                                ["regression", "regression", "classification"])
        ds = load_csv(out_csv, schema)
        assert len(ds) == 320
        assert ds.labeled_counts() == {"reg_a": 200, "reg_b": 60, "cls_c": 60}

    def test_synth_rejects_csv_source(self, tmp_path):
        cfg = tmp_path / "csv.toml"
        cfg.write_text('[data]\ncsv = "whatever.csv"\n')
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 1
