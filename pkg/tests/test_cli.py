"""CLI behavior: commands, config files, and exit codes."""

import json

import pytest

from pialab import cli, data, records


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestDescribe:
    def test_prints_table(self, capsys):
        code, out, err = run(["describe"], capsys)
        assert code == 0
        for aid in ("A1", "A5", "A9"):
            assert aid in out
        assert "5857" in out  # A9 at the default 64x64

    def test_custom_image_size(self, capsys):
        code, out, _ = run(["describe", "--image-size", "32"], capsys)
        assert code == 0
        assert "1633" in out  # A9 at 32x32


class TestGenData:
    def test_writes_loadable_directory(self, tmp_path, capsys):
        out_dir = str(tmp_path / "pool")
        code, out, _ = run(["gen-data", "--out", out_dir, "--n", "40",
                            "--seed", "3"], capsys)
        assert code == 0
        ds = data.load_dataset_dir(out_dir)
        assert len(ds) == 40
        assert ds.image_shape == (3, 32, 32)

    def test_matches_library_call(self, tmp_path, capsys):
        import numpy as np
        out_dir = str(tmp_path / "pool")
        run(["gen-data", "--out", out_dir, "--n", "25", "--seed", "9"], capsys)
        direct = data.generate_synthetic(data.SyntheticConfig(n=25, seed=9))
        ds = data.load_dataset_dir(out_dir)
        np.testing.assert_array_equal(ds.images, direct.images)


class TestFarmAndAttack:
    def test_small_farm_then_attack(self, tmp_path, capsys):
        rec_path = str(tmp_path / "r.pia")
        code, out, err = run(
            ["farm", "--arch", "A9", "--out", rec_path, "--k", "18",
             "--n", "60", "--pool-size", "1200", "--epochs", "1",
             "--gate", "0.05", "--seed", "1"], capsys)
        assert code == 0, err
        rf = records.load_records(rec_path)
        assert len(rf.records) == 18

        res_path = str(tmp_path / "out.jsonl")
        code, out, err = run(
            ["attack", "--records", rec_path, "--out", res_path,
             "--mode", "full", "--reps", "2", "--epochs", "1"], capsys)
        assert code == 0, err
        lines = [json.loads(l) for l in open(res_path)]
        assert len(lines) == 2
        assert all(l["mode"] == "full" for l in lines)

    def test_tuned_conflicts_with_explicit(self, tmp_path, capsys):
        code, _, err = run(
            ["attack", "--records", "x.pia", "--out", "y", "--tuned",
             "--lr", "0.1"], capsys)
        assert code == 1
        assert "conflicts" in err


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        code, _, err = run(["farm"], capsys)
        assert code == 1
        assert "error" in err

    def test_unknown_command_is_1(self, capsys):
        code, _, _ = run(["frobnicate"], capsys)
        assert code == 1

    def test_data_error_is_2(self, tmp_path, capsys):
        code, _, err = run(
            ["attack", "--records", str(tmp_path / "missing.pia"),
             "--out", str(tmp_path / "o")], capsys)
        assert code == 2
        assert "not found" in err

    def test_corrupt_records_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.pia"
        bad.write_bytes(b"NOPE" + b"\x00" * 40)
        code, _, err = run(
            ["attack", "--records", str(bad), "--out", str(tmp_path / "o")],
            capsys)
        assert code == 2
        assert "magic" in err

    def test_training_error_is_3(self, tmp_path, capsys):
        code, _, err = run(
            ["farm", "--arch", "A9", "--out", str(tmp_path / "r.pia"),
             "--k", "2", "--n", "50", "--pool-size", "1100", "--epochs", "1",
             "--gate", "0.999", "--seed", "0"], capsys)
        assert code == 3
        assert "gate" in err


class TestConfigFile:
    def test_config_supplies_defaults(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"n": 33, "seed": 5}))
        out_dir = str(tmp_path / "pool")
        code, _, _ = run(["--config", str(cfg_path), "gen-data",
                          "--out", out_dir], capsys)
        assert code == 0
        assert len(data.load_dataset_dir(out_dir)) == 33

    def test_explicit_flag_wins(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"n": 33}))
        out_dir = str(tmp_path / "pool")
        run(["--config", str(cfg_path), "gen-data", "--out", out_dir,
             "--n", "12"], capsys)
        assert len(data.load_dataset_dir(out_dir)) == 12

    def test_missing_config_is_2(self, tmp_path, capsys):
        code, _, err = run(
            ["--config", str(tmp_path / "nope.json"), "describe"], capsys)
        assert code == 2
        assert "not found" in err

    def test_bad_json_is_2(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text("{broken")
        code, _, err = run(["--config", str(cfg_path), "describe"], capsys)
        assert code == 2


class TestRunAll:
    def test_tiny_run_all(self, tmp_path, capsys):
        out_dir = str(tmp_path / "run")
        code, out, err = run(
            ["run-all", "--preset", "desk", "--arch", "A9", "--k", "18",
             "--n", "60", "--epochs", "1", "--gate", "0.05",
             "--pool-size", "1200", "--reps", "2", "--seed", "4",
             "--out", out_dir], capsys)
        assert code == 0, err
        assert "full-mode median accuracy" in out
        rep = json.load(open(f"{out_dir}/report.json"))
        assert rep["config"]["k"] == 18
        assert set(rep["architectures"]) == {"A9"}

    def test_paper_preset_needs_data_dir(self, capsys):
        code, _, err = run(["run-all", "--preset", "paper", "--out", "/tmp/x"],
                           capsys)
        assert code == 1
        assert "data-dir" in err
