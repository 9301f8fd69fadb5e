import json
from pathlib import Path

import numpy as np
import pytest

from oxyrecon.cli import main

AREAS_SINGLE = [{"id": 1, "name": "all", "rects": [[-180, -91, 181, 91]]}]


def write_tiny_config(path, **extra_train):
    cfg = {
        "synth": {"dims": [8, 8, 2, 6], "missing_rate": 0.6, "noise_sd": 1.0},
        "model": {"half_window": 2, "hidden_dim": 8, "message_dim": 6,
                  "n_layers": 1, "hyper_hidden": 8, "edge_hidden": 4},
        "train": {"epochs": 2, "iteration_budget": 4, "batch_size": 16,
                  "lam": 0.02, "patience": 5, **extra_train},
    }
    path.write_text(json.dumps(cfg))
    return path


def _areas_file(tmp_path):
    p = tmp_path / "areas.json"
    p.write_text(json.dumps(AREAS_SINGLE))
    return p


@pytest.fixture()
def pipeline(tmp_path):
    cfg = write_tiny_config(tmp_path / "config.json")
    areas = _areas_file(tmp_path)
    data = tmp_path / "data"
    assert main(["--config", str(cfg), "--seed", "3", "synth",
                 "--out", str(data)]) == 0
    return tmp_path, cfg, areas, data


class TestSynthGrid:
    def test_synth_writes_grids_and_manifest(self, pipeline):
        _, _, _, data = pipeline
        for stem in ("truth_DO", "obs_DO", "obs_nitrate", "obs_phosphate"):
            assert (data / f"{stem}.bin").exists()
            assert (data / f"{stem}.json").exists()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["seed"] == 3
        assert manifest["seed_was_default"] is False
        assert "config_hash" in manifest and "versions" in manifest

    def test_synth_idempotent(self, pipeline, tmp_path):
        _, cfg, _, data = pipeline
        second = tmp_path / "data2"
        assert main(["--config", str(cfg), "--seed", "3", "synth",
                     "--out", str(second)]) == 0
        for stem in ("obs_DO", "truth_DO"):
            assert (data / f"{stem}.bin").read_bytes() == \
                (second / f"{stem}.bin").read_bytes()


class TestTrainEvaluate:
    def test_end_to_end_exit_zero(self, pipeline):
        tmp, cfg, areas, data = pipeline
        run = tmp / "run"
        assert main(["--config", str(cfg), "--seed", "3", "train",
                     "--data", str(data), "--areas", str(areas),
                     "--out", str(run)]) == 0
        assert (run / "checkpoint.json").exists()
        assert (run / "history.csv").exists()
        assert (run / "history.png").exists()

        recon = tmp / "recon"
        assert main(["--config", str(cfg), "reconstruct", "--data", str(data),
                     "--checkpoint", str(run / "checkpoint"),
                     "--areas", str(areas), "--out", str(recon)]) == 0
        assert (recon / "reconstructed_DO.bin").exists()

        ev = tmp / "eval"
        assert main(["--config", str(cfg), "evaluate",
                     "--field", str(recon / "reconstructed_DO"),
                     "--obs", str(data / "truth_DO"),
                     "--group-by", "year", "--out", str(ev)]) == 0
        assert (ev / "metrics.csv").exists()
        assert (ev / "metrics.json").exists()
        assert (ev / "metrics.png").exists()

        omz = tmp / "omz"
        assert main(["omz", "--field", str(recon / "reconstructed_DO"),
                     "--out", str(omz)]) == 0
        rows = (omz / "omz.csv").read_text().strip().splitlines()
        assert rows[0] == "year,rho_omz"
        assert len(rows) == 7  # 6 years + header

        zones = tmp / "zones"
        assert main(["--config", str(cfg), "zones", "--data", str(data),
                     "--checkpoint", str(run / "checkpoint"),
                     "--year-index", "2", "--out", str(zones)]) == 0
        assert (zones / "zones_t2.csv").exists()
        assert (zones / "zones_t2.png").exists()

    def test_no_figures_flag(self, pipeline):
        tmp, cfg, areas, data = pipeline
        run = tmp / "run_nofig"
        assert main(["--config", str(cfg), "--seed", "3", "--no-figures", "train",
                     "--data", str(data), "--areas", str(areas),
                     "--out", str(run)]) == 0
        assert (run / "history.csv").exists()
        assert not (run / "history.png").exists()

    def test_evaluate_dim_mismatch_exit_2(self, pipeline, tmp_path, capsys):
        tmp, cfg, _, data = pipeline
        other = tmp_path / "other"
        cfg2 = tmp_path / "cfg2.json"
        cfg2.write_text(json.dumps({"synth": {"dims": [6, 6, 2, 6]}}))
        assert main(["--config", str(cfg2), "synth", "--out", str(other)]) == 0
        code = main(["evaluate", "--field", str(other / "truth_DO"),
                     "--obs", str(data / "obs_DO"), "--out", str(tmp_path / "x")])
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "data"

    def test_missing_input_exit_2(self, tmp_path, capsys):
        code = main(["evaluate", "--field", str(tmp_path / "nope"),
                     "--obs", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == 2


class TestConfig:
    def test_unknown_section_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"synht": {}}))
        assert main(["--config", str(bad), "synth", "--out", str(tmp_path / "d")]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "config"

    def test_unknown_key_exit_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"synth": {"missign_rate": 0.5}}))
        assert main(["--config", str(bad), "synth", "--out", str(tmp_path / "d")]) == 1

    def test_env_var_fallback(self, tmp_path, monkeypatch):
        cfg = write_tiny_config(tmp_path / "c.json")
        monkeypatch.setenv("OXYRECON_CONFIG", str(cfg))
        out = tmp_path / "d"
        assert main(["--seed", "5", "synth", "--out", str(out)]) == 0
        grid = json.loads((out / "obs_DO.json").read_text())
        assert grid["dims"] == [8, 8, 2, 6]

    def test_default_seed_recorded(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path / "c.json")
        out = tmp_path / "d"
        assert main(["--config", str(cfg), "synth", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed_was_default"] is True
        assert "seed not given" in capsys.readouterr().out


class TestIngestGridGraph:
    def test_ingest_and_grid(self, tmp_path):
        from oxyrecon.datagrid import Record, write_records_csv

        recs = [
            Record("WOD", 10.0, 0.0, 5.0, 2000, "DO", 250.0, "0"),
            Record("WOD", 10.0, 0.0, 5.0, 2000, "DO", 600.0, "0"),   # out of range
            Record("WOD", 10.0, 0.0, 5.0, 2000, "DO", 240.0, "3"),   # bad flag
            Record("Argo", -40.0, 10.0, 80.0, 2001, "temperature", 15.0, "1"),
        ]
        raw = tmp_path / "raw.csv"
        write_records_csv(raw, recs)
        ing = tmp_path / "ingest"
        assert main(["ingest", "--records", str(raw), "--out", str(ing)]) == 0
        rep = json.loads((ing / "ingest_report.json").read_text())
        assert rep["n_accepted"] == 2
        assert rep["reject_reasons"] == {"bad_flag": 1, "out_of_range": 1}

        cfg = tmp_path / "grid.json"
        cfg.write_text(json.dumps({"gridding": {
            "lon_cells": 12, "lat_cells": 12, "depth_levels": [0, 50, 100],
            "year_start": 2000, "year_end": 2002,
        }}))
        gr = tmp_path / "grids"
        assert main(["--config", str(cfg), "grid",
                     "--records", str(ing / "accepted.csv"), "--out", str(gr)]) == 0
        assert (gr / "obs_DO.bin").exists()
        assert (gr / "obs_temperature.bin").exists()

    def test_graph_export(self, pipeline):
        tmp, cfg, _, data = pipeline
        out = tmp / "graph"
        assert main(["--config", str(cfg), "graph", "--data", str(data),
                     "--year-index", "1", "--out", str(out)]) == 0
        lines = (out / "edges_t1.csv").read_text().splitlines()
        assert len(lines) > 1


class TestCrossfoldCommand:
    def test_table_layout(self, pipeline):
        tmp, cfg, areas, data = pipeline
        out = tmp / "cf"
        assert main(["--config", str(cfg), "--seed", "3", "crossfold",
                     "--data", str(data), "--areas", str(areas),
                     "--out", str(out)]) == 0
        rows = (out / "crossfold.csv").read_text().strip().splitlines()
        assert len(rows) == 6  # header + 4 folds + average
        assert rows[1].startswith("k=1,")
        assert rows[5].startswith("average,")
        assert (out / "folds.json").exists()
        assert (out / "crossfold.png").exists()


class TestDeterminism:
    def _run_pipeline(self, base, cfg, areas, workers):
        data = base / "data"
        run = base / "run"
        recon = base / "recon"
        ev = base / "eval"
        w = str(workers)
        assert main(["--config", str(cfg), "--seed", "11", "--workers", w,
                     "synth", "--out", str(data)]) == 0
        assert main(["--config", str(cfg), "--seed", "11", "--workers", w,
                     "train", "--data", str(data), "--areas", str(areas),
                     "--out", str(run)]) == 0
        assert main(["--config", str(cfg), "--workers", w, "reconstruct",
                     "--data", str(data), "--checkpoint", str(run / "checkpoint"),
                     "--areas", str(areas), "--out", str(recon)]) == 0
        assert main(["--config", str(cfg), "--workers", w, "evaluate",
                     "--field", str(recon / "reconstructed_DO"),
                     "--obs", str(data / "truth_DO"), "--group-by", "year",
                     "--out", str(ev)]) == 0
        return {
            "metrics.csv": (ev / "metrics.csv").read_bytes(),
            "metrics.json": (ev / "metrics.json").read_bytes(),
            "history.csv": (run / "history.csv").read_bytes(),
            "checkpoint.bin": (run / "checkpoint.bin").read_bytes(),
        }

    def test_repeat_and_worker_independence(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.json", epochs=2)
        areas = _areas_file(tmp_path)
        a = self._run_pipeline(tmp_path / "a", cfg, areas, workers=1)
        b = self._run_pipeline(tmp_path / "b", cfg, areas, workers=8)
        c = self._run_pipeline(tmp_path / "c", cfg, areas, workers=1)
        assert a == b, "outputs differ across worker counts"
        assert a == c, "outputs differ across repeated runs"
