"""Tests for aggregation, correlation, and report emission."""

import csv
import json

import numpy as np
import pytest

from pialab import attack, report
from pialab.errors import ConfigurationError, UsageError


def _result(acc, arch_id="A9", mode="full", rep=0, permuted=False):
    return attack.AttackResult(accuracy=acc, precision=acc, recall=acc,
                               arch_id=arch_id, mode=mode, repetition=rep,
                               permuted_labels=permuted)


class TestConfig:
    def test_desk_preset_values(self):
        cfg = report.DESK_PRESET
        assert cfg.arch_ids == ("A5", "A9")
        assert cfg.k == 240
        assert cfg.shadow_n == 500
        assert cfg.shadow_epochs == 10
        assert cfg.accuracy_gate == 0.80
        assert cfg.repetitions == 30

    def test_paper_preset_values(self):
        cfg = report.PAPER_PRESET
        assert cfg.k == 1800
        assert cfg.shadow_n == 2000
        assert cfg.shadow_epochs == 50
        assert cfg.accuracy_gate == 0.85
        assert len(cfg.arch_ids) == 9

    def test_config_round_trip(self):
        cfg = report.DESK_PRESET
        again = report.ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_split_counts(self):
        assert report.split_counts(report.DESK_PRESET) == (200, 13, 27)
        assert report.split_counts(report.PAPER_PRESET) == (1500, 100, 200)

    def test_paper_preset_rejects_other_k(self):
        from dataclasses import replace
        bad = replace(report.PAPER_PRESET, k=100)
        with pytest.raises(ConfigurationError):
            report.split_counts(bad)


class TestAggregate:
    def test_median_and_population_std(self):
        accs = [0.5, 0.6, 0.7, 0.9]
        agg = report.aggregate([_result(a, rep=i) for i, a in enumerate(accs)])
        block = agg["A9"]["full"]["accuracy"]
        assert block["median"] == pytest.approx(0.65)  # even-count average
        assert block["std"] == pytest.approx(np.std(accs))

    def test_groups_by_arch_and_mode(self):
        results = [_result(0.6, "A5", "full"), _result(0.7, "A5", "conv_only"),
                   _result(0.8, "A9", "full")]
        agg = report.aggregate(results)
        assert set(agg) == {"A5", "A9"}
        assert agg["A5"]["conv_only"]["accuracy"]["median"] == 0.7

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            report.aggregate([])


class TestCorrelation:
    def test_perfect_monotone_has_spearman_one(self):
        points = [(100, 0.6), (200, 0.7), (400, 0.75), (1000, 0.9)]
        out = report.complexity_correlation(points, permutations=500, seed=0)
        assert out["spearman"] == pytest.approx(1.0)
        assert out["pearson"] > 0.8
        assert not out["degenerate"]

    def test_anticorrelated(self):
        points = [(100, 0.9), (200, 0.8), (400, 0.7)]
        out = report.complexity_correlation(points, permutations=200, seed=0)
        assert out["spearman"] == pytest.approx(-1.0)

    def test_constant_accuracy_is_degenerate(self):
        points = [(100, 0.7), (200, 0.7), (400, 0.7)]
        out = report.complexity_correlation(points, permutations=100, seed=0)
        assert out["degenerate"]
        assert abs(out["pearson"]) < 1e-8

    def test_permutation_p_in_unit_interval(self):
        points = [(100, 0.61), (200, 0.72), (400, 0.68), (800, 0.80)]
        out = report.complexity_correlation(points, permutations=300, seed=1)
        for key in ("pearson_permutation_p", "spearman_permutation_p"):
            assert 0.0 < out[key] <= 1.0

    def test_needs_three_points(self):
        with pytest.raises(UsageError):
            report.complexity_correlation([(1, 0.5), (2, 0.6)])


class TestEmit:
    def _report(self):
        results = []
        for arch_id in ("A5", "A9"):
            for mode in report.MODES:
                for rep in range(4):
                    results.append(_result(0.5 + 0.02 * rep, arch_id, mode, rep))
        agg = report.aggregate(results)
        archs = {}
        for arch_id in ("A5", "A9"):
            archs[arch_id] = {"parameter_count": 1000, "modes": agg[arch_id]}
        return {"schema_version": report.SCHEMA_VERSION, "master_seed": 0,
                "architectures": archs, "correlation": None}

    def test_emit_writes_all_files(self, tmp_path):
        written = report.emit(self._report(), str(tmp_path))
        names = sorted(p.split("/")[-1] for p in written)
        assert names == ["fig2a_metrics.csv", "fig2b_modes.csv",
                         "fig4_complexity.csv", "report.json"]

    def test_json_round_trip(self, tmp_path):
        rep = self._report()
        report.emit(rep, str(tmp_path))
        again = report.load_report(str(tmp_path / "report.json"))
        assert again == json.loads(json.dumps(rep))

    def test_json_has_no_timestamps(self, tmp_path):
        report.emit(self._report(), str(tmp_path))
        text = (tmp_path / "report.json").read_text()
        assert "time" not in text and "date" not in text

    def test_modes_csv_rows(self, tmp_path):
        report.emit(self._report(), str(tmp_path))
        with open(tmp_path / "fig2b_modes.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6  # 2 archs x 3 modes
        assert {r["mode"] for r in rows} == set(report.MODES)
        assert float(rows[0]["accuracy_median"]) == pytest.approx(0.53)

    def test_complexity_csv(self, tmp_path):
        report.emit(self._report(), str(tmp_path))
        with open(tmp_path / "fig4_complexity.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["arch_id"] for r in rows] == ["A5", "A9"]
        assert rows[0]["parameter_count"] == "1000"


class TestResultsJsonl:
    def test_round_trip(self, tmp_path):
        results = [_result(0.6, rep=i, permuted=(i % 2 == 1)) for i in range(4)]
        path = tmp_path / "r.jsonl"
        with open(path, "w") as fh:
            for r in results:
                fh.write(json.dumps({"schema_version": 1, **r.to_dict()}) + "\n")
        again = report.load_results_jsonl(str(path))
        assert again == results


class TestSmallExperiment:
    """A miniature end-to-end run exercising run_experiment itself."""

    def test_tiny_run_structure(self, tmp_path):
        cfg = report.ExperimentConfig(
            arch_ids=("A9",), k=18, shadow_n=80, shadow_epochs=2,
            accuracy_gate=0.05, pool_size=1500, repetitions=2)
        rep = report.run_experiment(cfg, master_seed=3, workers=2,
                                    outdir=str(tmp_path))
        assert rep["split_counts"] == [15, 1, 2]
        blk = rep["architectures"]["A9"]
        assert blk["parameter_count"] == 1633  # A9 at 3x32x32 inputs
        assert set(blk["modes"]) == set(report.MODES)
        assert "control" in blk
        assert rep["correlation"] is None
        assert (tmp_path / "records_A9.pia").exists()
        assert (tmp_path / "attack_results.jsonl").exists()
        # re-aggregating the persisted results reproduces the report block
        results = report.load_results_jsonl(str(tmp_path / "attack_results.jsonl"))
        scored = report.aggregate([r for r in results if not r.permuted_labels])
        assert scored["A9"] == blk["modes"]

    def test_tiny_run_deterministic(self, tmp_path):
        cfg = report.ExperimentConfig(
            arch_ids=("A9",), k=6, shadow_n=60, shadow_epochs=1,
            accuracy_gate=0.05, pool_size=1200, repetitions=1,
            include_control=False)
        a = report.run_experiment(cfg, 5, 1, str(tmp_path / "a"))
        b = report.run_experiment(cfg, 5, 4, str(tmp_path / "b"))
        assert a == b
        assert ((tmp_path / "a" / "report.json").read_bytes()
                == (tmp_path / "b" / "report.json").read_bytes())
