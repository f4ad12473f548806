"""
End-to-end tests of the command-line pipeline on a synthetic city
"""

import csv
import json
import logging

import numpy as np
import pytest

from floorspace.cli import main
from floorspace.ingest import BandStack
from floorspace.model import FloorspaceModel, ModelConfig, save_model
from floorspace.raster import LabelGrid, Raster
from floorspace.raster_io import read_fsr, write_fsr
from tests.synthetic import grid, make_city, write_city

SMALL = {
    "tile_size": 16,
    "depth": 1,
    "base_channels": 4,
    "epochs": 2,
    "lr_decay_epoch": 1,
    "batch_size": 4,
    "min_building_fraction": 0,
    "val_ratio": 0.25,
    "side_lengths_m": "10:100:10",
    "scatter_side_m": 40,
    "ntl_cell_m": 40,
}


def _settings(**values):
    args = ["--threads", "1"]
    for key, value in {**SMALL, **values}.items():
        args += ["--set", f"{key}={value}"]
    return args


def run(capsys, *args, **settings):
    code = main([*_settings(**settings), *map(str, args)])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _error(err: str) -> dict:
    return json.loads([line for line in err.splitlines() if line.startswith("{")][-1])


@pytest.fixture
def workspace(tmp_path):
    city = make_city(width=64, height=64, n_buildings=24, seed=3)
    return city, write_city(city, tmp_path / "city"), tmp_path


def test_pipeline_end_to_end(capsys, workspace):
    city, paths, root = workspace

    code, out, _ = run(capsys, "rasterize", "--buildings", paths["buildings"], "--grid", paths["stack"],
                       "--out", root / "labels")
    assert code == 0 and out.startswith("✅ rasterize")
    assert np.array_equal(read_fsr(root / "labels" / "mask.fsr").data, city.labels.mask.data)
    assert np.array_equal(read_fsr(root / "labels" / "height.fsr").data, city.labels.height_m.data)

    code, out, _ = run(capsys, "tile", "--stack", paths["stack"], "--labels", root / "labels", "--out", root / "tiles")
    assert code == 0
    manifest = json.loads((root / "tiles" / "manifest.json").read_text())
    assert len(manifest["train"]) == 12 and len(manifest["val"]) == 4
    assert manifest["provenance"]["command"] == "tile"

    code, out, _ = run(capsys, "train", "--tiles", root / "tiles", "--out", root / "model")
    assert code == 0 and "2 epochs" in out
    assert len(list(csv.DictReader((root / "model" / "history.csv").open()))) == 2

    code, _, _ = run(capsys, "predict", "--model", root / "model" / "model.fsm", "--stack", paths["stack"],
                     "--out", root / "pred")
    assert code == 0
    mask = read_fsr(root / "pred" / "mask.fsr")
    assert (mask.width, mask.height) == (64, 64)
    assert mask.transform == city.transform

    code, out, _ = run(capsys, "eval", "--pred", root / "pred", "--ref", root / "labels", "--out", root / "eval")
    assert code == 0 and "dice" in out
    report = json.loads((root / "eval" / "metrics.json").read_text())
    for key in ("precision", "recall", "dice", "mae_m", "rmse_m", "mre_overall"):
        assert key in report
    assert set(report["mre_per_class"]) == {"low", "multi", "mid", "high"}
    assert report["context_class_shares"]["low"] == 0.519
    assert (root / "eval" / "hist_ref.csv").exists()

    code, _, _ = run(capsys, "aggregate", "--pred", root / "pred", "--ref", root / "labels", "--out", root / "agg")
    assert code == 0
    curve = list(csv.DictReader((root / "agg" / "r2_curve.csv").open()))
    assert [float(row["side_length_m"]) for row in curve] == [float(L) for L in range(10, 101, 10)]

    code, out, _ = run(capsys, "ntl", "--pred", root / "labels", "--ref", root / "labels", "--out", root / "ntl")
    assert code == 0
    fit = json.loads((root / "ntl" / "ref_fit.json").read_text())
    assert fit["scale_b"] == pytest.approx(1.0)
    assert np.all(np.nan_to_num(read_fsr(root / "ntl" / "ref_logdiff.fsr").data) == 0)

    code, _, _ = run(capsys, "render", "--raster", root / "pred" / "height.fsr", "--palette", "sequential",
                     "--out", root / "maps" / "height.ppm")
    assert code == 0
    assert (root / "maps" / "height.ppm").exists() and (root / "maps" / "height.txt").exists()

    for directory in ("labels", "tiles", "model", "pred", "eval", "agg", "ntl", "maps"):
        stamp = json.loads((root / directory / "provenance.json").read_text())
        assert len(stamp["config_hash"]) == 64


def test_eval_of_reference_against_itself(capsys, workspace):
    _, paths, root = workspace
    code, out, _ = run(capsys, "eval", "--pred", paths["labels"], "--ref", paths["labels"], "--out", root / "eval")
    assert code == 0
    row = next(csv.DictReader((root / "eval" / "metrics.csv").open()))
    assert row["dice"] == "1.0"
    assert row["mae_m"] == "0.0"
    assert row["context_share_high"] == "0.045"
    assert "" not in row.values()


def test_tile_count_on_large_mosaic(capsys, tmp_path):
    transform = grid(512, 512)
    stack = BandStack(Raster(np.random.default_rng(0).standard_normal((6, 512, 512)).astype(np.float32), transform))
    mask = np.zeros((1, 512, 512), np.uint8)
    mask[0, 100:190, 100:190] = 1
    mask[0, 300:400, 300:400] = 1
    labels = LabelGrid(Raster(mask, transform), Raster(mask.astype(np.float32) * 12.0, transform))
    write_fsr(stack.raster, tmp_path / "stack.fsr")
    write_fsr(labels.mask, tmp_path / "labels" / "mask.fsr")
    write_fsr(labels.height_m, tmp_path / "labels" / "height.fsr")

    code, _, _ = run(capsys, "tile", "--stack", tmp_path / "stack.fsr", "--labels", tmp_path / "labels",
                     "--out", tmp_path / "tiles", tile_size=256, min_building_fraction=0.1, val_ratio=0.5)
    assert code == 0
    manifest = json.loads((tmp_path / "tiles" / "manifest.json").read_text())
    assert len(manifest["train"]) + len(manifest["val"]) == 2


def test_two_stage_training_and_prediction(capsys, workspace):
    _, paths, root = workspace
    run(capsys, "tile", "--stack", paths["stack"], "--labels", paths["labels"], "--out", root / "tiles")

    code, _, _ = run(capsys, "train", "--tiles", root / "tiles", "--out", root / "stage1", head="footprint_only")
    assert code == 0
    code, out, _ = run(capsys, "train", "--tiles", root / "tiles", "--out", root / "stage2",
                       "--stage1", root / "stage1" / "model.fsm", "--compose", "A1")
    assert code == 0 and "A1" in out

    code, _, _ = run(capsys, "predict", "--model", root / "stage2" / "model.fsm", "--stage1",
                     root / "stage1" / "model.fsm", "--stack", paths["stack"], "--out", root / "pred")
    assert code == 0
    assert read_fsr(root / "pred" / "height.fsr").width == 64

    code, _, err = run(capsys, "train", "--tiles", root / "tiles", "--out", root / "stage2b",
                       "--stage1", root / "stage1" / "model.fsm", "--compose", "A3")
    assert code == 13
    assert _error(err)["error"] == "UnsupportedVariantError"


def test_sweep_writes_coefficient_table(capsys, workspace):
    _, paths, root = workspace
    run(capsys, "tile", "--stack", paths["stack"], "--labels", paths["labels"], "--out", root / "tiles")
    code, out, _ = run(capsys, "train", "--tiles", root / "tiles", "--out", root / "sweep", "--sweep",
                       height_task_coefficient_grid="0.1,1")
    assert code == 0 and "best height coefficient" in out
    rows = list(csv.DictReader((root / "sweep" / "sweep.csv").open()))
    assert [row["coefficient"] for row in rows] == ["0.1", "1.0"]


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--out", tmp_path / "gc")
    assert code == 0
    assert "max relative error" in out
    rows = list(csv.DictReader((tmp_path / "gc" / "gradcheck.csv").open()))
    assert all(float(row["max_rel_error"]) < 1e-3 for row in rows)
    assert all(row["checked"] == row["required"] for row in rows)

    code, _, err = run(capsys, "gradcheck", gradcheck_tolerance=1e-300, gradcheck_samples=2)
    assert code == 15
    assert _error(err)["code"] == 15
    assert "relative error" in _error(err)["message"]


def test_error_records_and_exit_codes(capsys, workspace, tmp_path):
    _, paths, root = workspace

    code, _, err = run(capsys, "predict", "--model", tmp_path / "nope.fsm", "--stack", paths["stack"],
                       "--out", root / "pred")
    assert code == 3
    record = _error(err)
    assert record["error"] == "MissingInputError" and "nope.fsm" in record["message"]

    code, _, err = run(capsys, "tile", "--stack", paths["stack"], "--labels", paths["labels"], "--out",
                       root / "tiles", tile_size="banana")
    assert code == 2
    assert _error(err)["error"] == "ConfigError"

    code, _, err = run(capsys, "train", "--tiles", root / "tiles", "--out", root / "m", "--compose", "A1")
    assert code == 2

    code, _, err = run(capsys, "ntl", "--pred", paths["labels"], "--out", root / "ntl")
    assert code == 2

    bad = tmp_path / "bad.fsm"
    bad.write_bytes(b"XXXX0000")
    code, _, err = run(capsys, "predict", "--model", bad, "--stack", paths["stack"], "--out", root / "pred")
    assert code == 5
    assert _error(err)["error"] == "BadMagicError"


def test_predict_rejects_mismatched_stats(capsys, workspace):
    _, paths, root = workspace
    model = FloorspaceModel(ModelConfig(depth=1, base_channels=2),
                            meta={"band_stats": {"mean": [0.0] * 6, "std": [1.0] * 5 + [0.0]}})
    save_model(model, root / "m.fsm")
    code, _, err = run(capsys, "predict", "--model", root / "m.fsm", "--stack", paths["stack"], "--out", root / "p")
    assert code == 9
    assert _error(err)["error"] == "ConditioningError"


@pytest.mark.slow
def test_pipeline_is_deterministic(capsys, tmp_path):
    city = make_city(width=96, height=96, n_buildings=40, seed=8)
    paths = write_city(city, tmp_path / "city")
    settings = dict(tile_size=32, depth=2, epochs=5, lr_decay_epoch=3)

    outputs = []
    for run_id in ("a", "b"):
        root = tmp_path / run_id
        for args in (
            ("tile", "--stack", paths["stack"], "--labels", paths["labels"], "--out", root / "tiles"),
            ("train", "--tiles", root / "tiles", "--out", root / "model"),
            ("predict", "--model", root / "model" / "model.fsm", "--stack", paths["stack"], "--out", root / "pred"),
            ("eval", "--pred", root / "pred", "--ref", paths["labels"], "--out", root / "eval"),
        ):
            code, _, err = run(capsys, *args, **settings)
            assert code == 0, err
        outputs.append((root / "eval" / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_malformed_geojson_gives_validation_record(capsys, workspace, tmp_path):
    _, paths, root = workspace
    broken = tmp_path / "broken.geojson"
    broken.write_text("{not json")
    code, _, err = run(capsys, "rasterize", "--buildings", broken, "--grid", paths["stack"], "--out", root / "labels")
    assert code == 4
    assert _error(err)["error"] == "ValidationError"


def test_zero_range_step_is_a_config_error(capsys, workspace):
    _, paths, root = workspace
    code, _, err = run(capsys, "aggregate", "--pred", paths["labels"], "--ref", paths["labels"], "--out", root / "agg",
                       side_lengths_m="10:100:0")
    assert code == 2
    assert _error(err)["error"] == "ConfigError"


def test_usage_errors_have_their_own_code(capsys, workspace):
    _, paths, root = workspace
    code, _, err = run(capsys, "eval", "--pred", paths["labels"], "--out", root / "eval")
    assert code == 64
    record = _error(err)
    assert (record["error"], record["code"]) == ("UsageError", 64)
    assert "--ref" in record["message"]

    code, _, _ = run(capsys, "no-such-command")
    assert code == 64


def test_unexpected_failures_give_internal_record(capsys, workspace, monkeypatch):
    _, paths, root = workspace

    def broken(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("floorspace.cli.write_report_json", broken)
    code, _, err = run(capsys, "eval", "--pred", paths["labels"], "--ref", paths["labels"], "--out", root / "eval")
    assert code == 70
    assert _error(err) == {"error": "InternalError", "code": 70, "message": "RuntimeError: disk on fire"}


def test_logging_handler_is_released_after_each_command(capsys, workspace):
    _, paths, root = workspace
    package_logger = logging.getLogger("floorspace")
    before = (list(package_logger.handlers), list(logging.getLogger().handlers), package_logger.propagate)

    for attempt in range(2):
        code, _, err = run(capsys, "-v", "eval", "--pred", paths["labels"], "--ref", paths["labels"],
                           "--out", root / f"eval{attempt}")
        assert code == 0
        assert "[floorspace]" in err
        assert (list(package_logger.handlers), list(logging.getLogger().handlers), package_logger.propagate) == before
