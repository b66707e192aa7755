import dataclasses
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from app.config import settings
from app.db import ledger_file
from app.main import main
from app.schemas import ErrorPayload, LooReport, PsisOut, RunManifest, TheoryOut, WeightReport
from app.services import hier
from app.services.core import LpdMatrix
from app.services.io import write_loglik, write_lpd
from app.services.runs import recent_runs


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, json.loads(capsys.readouterr().out)


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


@pytest.fixture
def cells_dir(tmp_path, capsys):
    out = tmp_path / "cells"
    code, _ = run_cli(capsys, "--seed", 3, "simulate", "--kind", "cells", "--n", 60, "--n-cells", 3, "--out", out)
    assert code == 0
    return out


class TestSimulate:
    def test_writes_data_truth_and_manifest(self, cells_dir):
        lpd = pd.read_csv(cells_dir / "lpd.csv")
        features = pd.read_csv(cells_dir / "features.csv")
        assert list(lpd.columns) == ["obs_id", "M1", "M2"]
        assert len(lpd) == 180
        assert sorted(features["cell"].unique()) == ["c1", "c2", "c3"]
        assert len(read_json(cells_dir / "truth.json")["weights"]) == 3
        manifest = RunManifest.model_validate(read_json(cells_dir / "manifest.json"))
        assert manifest.command == "simulate"
        assert manifest.exit_code == 0
        assert manifest.seed == 3

    def test_same_arguments_same_files_and_hash(self, tmp_path, capsys):
        hashes, frames = [], []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli(capsys, "--seed", 9, "simulate", "--kind", "spike-slab", "--n", 50, "--out", out)[0] == 0
            hashes.append(read_json(out / "manifest.json")["config_hash"])
            frames.append((out / "lpd.csv").read_bytes())
        assert hashes[0] == hashes[1]
        assert frames[0] == frames[1]

    def test_regression_data_has_no_lpd(self, tmp_path, capsys):
        code, payload = run_cli(capsys, "simulate", "--kind", "neal", "--n", 40, "--out", tmp_path)
        assert code == 0
        assert payload["n"] == 40
        assert (tmp_path / "observations.csv").is_file()
        assert not (tmp_path / "lpd.csv").exists()


class TestFit:
    def test_complete_pooling(self, cells_dir, tmp_path, capsys):
        out = tmp_path / "fit"
        code, payload = run_cli(capsys, "fit", "--method", "complete", "--lpd", cells_dir / "lpd.csv", "--out", out)
        assert code == 0
        report = WeightReport.model_validate(read_json(out / "weights.json"))
        assert report.method == "complete"
        assert sum(report.weights) == pytest.approx(1.0)
        assert payload["weights"] == report.weights
        assert (out / "fit_config.json").is_file()

    def test_no_pooling_gives_one_row_per_cell(self, cells_dir, capsys):
        code, payload = run_cli(
            capsys, "fit", "--method", "nopool", "--lpd", cells_dir / "lpd.csv", "--features", cells_dir / "features.csv"
        )
        assert code == 0
        weights = np.array(payload["weights"])
        assert weights.shape == (3, 2)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)

    def test_map_with_fixed_scale(self, cells_dir, tmp_path, capsys):
        out = tmp_path / "map"
        code, payload = run_cli(
            capsys,
            "fit",
            "--method",
            "map",
            "--lpd",
            cells_dir / "lpd.csv",
            "--features",
            cells_dir / "features.csv",
            "--fixed-sigma",
            1.0,
            "--explore",
            "--out",
            out,
        )
        assert code == 0
        assert payload["meta"]["cell_labels"] == ["c1", "c2", "c3"]
        assert len(pd.read_csv(out / "cell_differences.csv")) == 3
        assert len(pd.read_csv(out / "pointwise_differences.csv")) == 180

    def test_nopool_needs_features(self, cells_dir, capsys):
        code, payload = run_cli(capsys, "fit", "--method", "nopool", "--lpd", cells_dir / "lpd.csv")
        assert code == 2
        assert payload["error"] == "input_validation"

    def test_missing_file_writes_error_json(self, tmp_path, capsys):
        out = tmp_path / "err"
        code, payload = run_cli(capsys, "fit", "--lpd", tmp_path / "nope.csv", "--out", out)
        assert code == 2
        error = ErrorPayload.model_validate(read_json(out / "error.json"))
        assert error.exit_code == 2
        assert "nope.csv" in error.message
        assert read_json(out / "manifest.json")["exit_code"] == 2
        assert payload["error"] == "input_validation"

    def test_invalid_config_values(self, cells_dir, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"sampler": {"target_accept": 1.5}}), encoding="utf-8")
        code, payload = run_cli(capsys, "fit", "--lpd", cells_dir / "lpd.csv", "--config", config)
        assert code == 2
        assert payload["details"]["path"] == str(config)

    def test_bad_seed(self, cells_dir, capsys):
        code, _ = run_cli(capsys, "--seed", -1, "fit", "--lpd", cells_dir / "lpd.csv")
        assert code == 2


class TestLoo:
    def test_single_model_is_its_column_sum(self, tmp_path, capsys, rng):
        values = rng.normal(-1.0, 0.3, size=(12, 1))
        path = write_lpd(tmp_path / "one.csv", LpdMatrix(values=values, model_names=("only",)))
        out = tmp_path / "loo"
        code, payload = run_cli(capsys, "loo", "--lpd", path, "--out", out)
        assert code == 0
        assert payload["elpd"] == pytest.approx(values.sum())
        assert LooReport.model_validate(read_json(out / "loo.json")).status == "good"
        assert len(pd.read_csv(out / "loo_pointwise.csv")) == 12

    def test_several_models_need_draws(self, cells_dir, capsys):
        code, _ = run_cli(capsys, "loo", "--lpd", cells_dir / "lpd.csv")
        assert code == 2

    def test_corrupted_draws(self, cells_dir, tmp_path, capsys):
        draws = tmp_path / "draws.csv"
        draws.write_text("chain,draw,alpha[0,0]\n0,0,0.1\n0,1,oops\n", encoding="utf-8")
        code, payload = run_cli(
            capsys, "loo", "--lpd", cells_dir / "lpd.csv", "--features", cells_dir / "features.csv", "--draws", draws
        )
        assert code == 2
        assert "non-numeric" in payload["message"]

    def test_draws_for_another_model(self, cells_dir, tmp_path, capsys):
        draws = tmp_path / "draws.csv"
        draws.write_text("chain,draw,x\n0,0,0.1\n0,1,0.2\n", encoding="utf-8")
        code, payload = run_cli(
            capsys, "loo", "--lpd", cells_dir / "lpd.csv", "--features", cells_dir / "features.csv", "--draws", draws
        )
        assert code == 2
        assert "do not match" in payload["message"]


class TestPsis:
    def _loglik(self, tmp_path, rng, name, shift, ids=None):
        y = np.array([-0.5, 0.1, 0.7, 1.9])
        theta = rng.normal(shift, 0.3, size=400)
        return write_loglik(tmp_path / f"{name}.csv", stats.norm.logpdf(y[None, :], theta[:, None], 1.0), ids)

    def test_merges_models_into_one_matrix(self, tmp_path, capsys, rng):
        first = self._loglik(tmp_path, rng, "near", 0.5)
        second = self._loglik(tmp_path, rng, "far", 3.0)
        out = tmp_path / "out"
        code, payload = run_cli(capsys, "psis", "--loglik", first, second, "--out", out)
        assert code == 0
        result = PsisOut.model_validate(payload)
        assert result.models == ["near", "far"]
        assert result.draws == 400
        lpd = pd.read_csv(out / "lpd.csv")
        assert list(lpd.columns) == ["obs_id", "near", "far"]
        assert lpd["near"].sum() > lpd["far"].sum()

    def test_observation_ids_must_agree(self, tmp_path, capsys, rng):
        first = self._loglik(tmp_path, rng, "a", 0.0)
        second = self._loglik(tmp_path, rng, "b", 0.0, ids=("w", "x", "y", "z"))
        code, _ = run_cli(capsys, "psis", "--loglik", first, second)
        assert code == 2

    def test_group_by_cell_needs_features(self, tmp_path, capsys, rng):
        code, _ = run_cli(capsys, "psis", "--loglik", self._loglik(tmp_path, rng, "a", 0.0), "--group-by-cell")
        assert code == 2


class TestTheory:
    def test_spike_slab_bounds(self, tmp_path, capsys):
        out = tmp_path / "theory"
        code, payload = run_cli(capsys, "theory", "--scenario", "spike-slab", "--delta-grid", "0.01", "--out", out)
        assert code == 0
        result = TheoryOut.model_validate(read_json(out / "theory.json"))
        assert result.all_passed
        point = result.points[0]
        assert point.winner_masses == pytest.approx([0.75, 0.25], abs=1e-3)
        assert point.report.epsilon == 0.0
        assert (out / "weights_vs_delta.csv").is_file()
        assert (out / "gains.csv").is_file()
        assert payload["all_passed"]

    def test_equal_models_have_no_report(self, capsys):
        code, payload = run_cli(capsys, "theory", "--delta-grid", "0.5")
        assert code == 0
        assert payload["points"][0]["stacking_defined"] is False
        assert payload["points"][0]["report"] is None

    def test_invalid_grid(self, capsys):
        assert run_cli(capsys, "theory", "--delta-grid", "0.3:0.1:0.1")[0] == 2
        assert run_cli(capsys, "theory", "--delta-grid", "a:b:c")[0] == 2
        assert run_cli(capsys, "theory", "--delta-grid", "0.0")[0] == 2

    def test_custom_scenario_needs_a_file(self, capsys):
        assert run_cli(capsys, "theory", "--scenario", "custom")[0] == 2


def test_runs_are_recorded_in_the_ledger(tmp_path, capsys):
    assert run_cli(capsys, "--seed", 77, "simulate", "--kind", "varying", "--n", 30, "--out", tmp_path)[0] == 0
    rows = [r for r in recent_runs(200) if r.command == "simulate" and r.seed == 77]
    assert rows
    assert rows[0].manifest["config_hash"] == read_json(tmp_path / "manifest.json")["config_hash"]
    assert ledger_file().is_file()


@pytest.mark.parametrize(
    "url,expected",
    [
        ("sqlite:///ledger/runs.db", "ledger/runs.db"),
        ("sqlite://", None),
        ("sqlite:///:memory:", None),
        ("postgresql://user@host/runs", None),
    ],
)
def test_ledger_file_from_url(url, expected):
    assert ledger_file(url) == (None if expected is None else Path(expected))


@pytest.mark.slow
class TestHierarchicalPipeline:
    SAMPLER = ("--chains", 2, "--warmup", 200, "--draws", 200)

    def test_fit_then_loo(self, cells_dir, tmp_path, capsys):
        out = tmp_path / "hier"
        code, payload = run_cli(
            capsys,
            "fit",
            "--method",
            "hier",
            "--lpd",
            cells_dir / "lpd.csv",
            "--features",
            cells_dir / "features.csv",
            *self.SAMPLER,
            "--no-check-diagnostics",
            "--out",
            out,
        )
        assert code == 0
        assert payload["method"] == "hier"
        assert len(pd.read_csv(out / "draws.csv")) == 400
        assert (out / "diagnostics.json").is_file()

        code, loo = run_cli(
            capsys,
            "loo",
            "--lpd",
            cells_dir / "lpd.csv",
            "--features",
            cells_dir / "features.csv",
            "--draws",
            out / "draws.csv",
        )
        assert code == 0
        assert np.isfinite(loo["elpd"])
        assert len(loo["pointwise"]) == 180

    def test_failed_diagnostics_exit_code(self, cells_dir, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(hier, "settings", dataclasses.replace(settings, ess_min=1e9))
        out = tmp_path / "bad"
        code, payload = run_cli(
            capsys,
            "fit",
            "--method",
            "hier",
            "--lpd",
            cells_dir / "lpd.csv",
            "--features",
            cells_dir / "features.csv",
            *self.SAMPLER,
            "--out",
            out,
        )
        assert code == 3
        assert payload["error"] == "diagnostics"
        assert read_json(out / "error.json")["exit_code"] == 3
