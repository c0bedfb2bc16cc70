import csv
import json

import pytest

from sdseval.cli import main
from sdseval.dataset import (
    BoxDetection,
    Detection,
    box_detection_record,
    load_dataset,
    load_detections,
    save_detections,
    write_records,
)
from sdseval.masks import bbox, intersection_area


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def run_failing(capsys, *argv):
    with pytest.raises(SystemExit) as info:
        main([str(a) for a in argv])
    err = capsys.readouterr().err.strip().splitlines()
    return info.value.code, json.loads(err[-1])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run("synth", "--seed", 3, "--images", 8, "--shapes", 2, "--categories", 2, "--out", root / "ds")
    run("train", "--dataset", root / "ds", "--out", root / "models")
    run("score", "--dataset", root / "ds", "--models", root / "models", "--out", root / "dets.jsonl")
    ds = load_dataset(root / "ds")
    save_detections(
        [Detection(g.image_id, g.category_id, 1.0, g.mask) for g in ds.instances], root / "gt_dets.jsonl"
    )
    return root


class TestPipeline:
    def test_identity_volume_is_one(self, workspace):
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "gt_dets.jsonl",
            "--metric", "aprvol", "--out", workspace / "ev_id")
        rows = read_csv(workspace / "ev_id" / "report.csv")
        assert rows[-1]["category"] == "mean" and float(rows[-1]["AP_vol"]) == 1.0

    def test_single_threshold_matches_volume_column(self, workspace):
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "dets.jsonl",
            "--metric", "aprvol", "--out", workspace / "ev_vol")
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "dets.jsonl",
            "--thresholds", "0.5", "--out", workspace / "ev_05")
        vol = read_csv(workspace / "ev_vol" / "report.csv")
        single = read_csv(workspace / "ev_05" / "report.csv")
        assert [r["AP@0.5"] for r in vol] == [r["AP@0.5"] for r in single]

    def test_records_and_pr_curves(self, workspace):
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "dets.jsonl", "--out", workspace / "ev")
        lines = (workspace / "ev" / "records.jsonl").read_text().splitlines()
        summary = json.loads(lines[0])
        assert summary["kind"] == "summary" and summary["metric"] == "region"
        assert (workspace / "ev" / "pr_c1_t0.5.csv").exists()

    def test_box_metric(self, workspace):
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "gt_dets.jsonl",
            "--metric", "apb", "--out", workspace / "ev_b")
        assert float(read_csv(workspace / "ev_b" / "report.csv")[-1]["AP@0.5"]) == 1.0

    def test_deterministic_outputs(self, workspace, tmp_path):
        run("score", "--dataset", workspace / "ds", "--models", workspace / "models",
            "--threads", 2, "--out", tmp_path / "again.jsonl")
        assert (tmp_path / "again.jsonl").read_bytes() == (workspace / "dets.jsonl").read_bytes()

    def test_nms_at_zero_leaves_disjoint_detections(self, workspace):
        dets = load_detections(workspace / "dets.jsonl")
        for i, a in enumerate(dets):
            for b in dets[i + 1 :]:
                if (a.image_id, a.category_id) == (b.image_id, b.category_id):
                    assert intersection_area(a.mask, b.mask) == 0

    def test_diagnose(self, workspace):
        run("diagnose", "--dataset", workspace / "ds", "--dets", workspace / "dets.jsonl",
            "--out", workspace / "diag")
        rows = read_csv(workspace / "diag" / "diagnostics.csv")
        assert list(rows[0]) == ["category", "AP", "AP_remove", "AP_correct", "AP_upper", "loss_misloc",
                                 "AP_pp", "AP_pr", "n_misloc", "n_similar", "n_background"]
        for r in rows[:-1]:
            assert float(r["AP"]) <= float(r["AP_remove"]) <= float(r["AP_correct"])
        assert (workspace / "diag" / "pr_c1_correct.csv").exists()

    def test_pixel_iu(self, workspace):
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "gt_dets.jsonl",
            "--metric", "pixeliu", "--out", workspace / "iu")
        assert float(read_csv(workspace / "iu" / "report.csv")[-1]["IU"]) == 1.0

    def test_pixel_iu_cross_validated(self, workspace):
        (workspace / "val.txt").write_text("img0000\nimg0001\n")
        run("eval", "--dataset", workspace / "ds", "--dets", workspace / "dets.jsonl", "--metric", "pixeliu",
            "--val-images", workspace / "val.txt", "--out", workspace / "iu_cv")
        rec = json.loads((workspace / "iu_cv" / "records.jsonl").read_text())
        assert set(rec["score_thresholds"]) == {"1", "2"}

    def test_upper_bound(self, workspace):
        ds = load_dataset(workspace / "ds")
        write_records(workspace / "boxes.jsonl", [
            box_detection_record(BoxDetection(g.image_id, g.category_id, 1.0, bbox(g.mask)))
            for g in ds.instances
        ])
        run("upper-bound", "--dataset", workspace / "ds", "--boxdets", workspace / "boxes.jsonl",
            "--out", workspace / "ub.jsonl")
        out = load_detections(workspace / "ub.jsonl")
        assert len(out) == len(ds.instances)

    def test_refiner_round_trip(self, tmp_path):
        run("synth", "--scene", "car-road", "--seed", 0, "--images", 20, "--tile", 4, "--out", tmp_path / "cars")
        run("train-refiner", "--dataset", tmp_path / "cars", "--padding", 4, "--out", tmp_path / "ref")
        assert (tmp_path / "ref" / "refiner_c1.json").exists()
        ds = load_dataset(tmp_path / "cars")
        save_detections([Detection(c.image_id, 1, 1.0, c.mask, c.candidate_id) for c in ds.candidates],
                        tmp_path / "d.jsonl")
        run("refine", "--dataset", tmp_path / "cars", "--dets", tmp_path / "d.jsonl",
            "--refiner", tmp_path / "ref", "--out", tmp_path / "r.jsonl")
        assert len(load_detections(tmp_path / "r.jsonl")) == len(ds.candidates)

    def test_single_category_model_file(self, workspace, tmp_path):
        run("train", "--dataset", workspace / "ds", "--category", 1, "--out", tmp_path / "m1.json")
        obj = json.loads((tmp_path / "m1.json").read_text())
        assert obj["category_id"] == 1 and obj["kind"] == "svm" and "lambda" in obj


class TestConfigAndErrors:
    def test_config_supplies_flags(self, workspace, tmp_path):
        write_records(tmp_path / "cfg.jsonl", [
            {"kind": "config", "dataset": str(workspace / "ds"), "dets": str(workspace / "gt_dets.jsonl"),
             "metric": "aprvol"},
        ])
        run("eval", "--config", tmp_path / "cfg.jsonl", "--out", tmp_path / "ev")
        assert float(read_csv(tmp_path / "ev" / "report.csv")[-1]["AP_vol"]) == 1.0

    def test_unknown_flag(self, capsys):
        code, err = run_failing(capsys, "eval", "--bogus")
        assert code == 2 and err["error"] == "UsageError"

    def test_missing_dataset(self, capsys, tmp_path):
        code, err = run_failing(capsys, "eval", "--dataset", tmp_path / "nope", "--dets", tmp_path / "d",
                                "--out", tmp_path / "o")
        assert code == 1 and "not found" in err["message"]

    def test_bad_thresholds(self, capsys, tmp_path):
        code, _ = run_failing(capsys, "eval", "--dataset", tmp_path, "--dets", tmp_path,
                              "--thresholds", "0.5,1.5", "--out", tmp_path)
        assert code == 2

    def test_unknown_config_key(self, capsys, tmp_path):
        write_records(tmp_path / "cfg.jsonl", [{"kind": "config", "colour": "red"}])
        code, err = run_failing(capsys, "eval", "--config", tmp_path / "cfg.jsonl")
        assert code == 1 and "colour" in err["message"]
