import json

import numpy as np
import pytest

from sdseval.dataset import (
    CONTAINER_NAME,
    FEATURES_BIN,
    FEATURES_IDX,
    Dataset,
    DatasetError,
    Detection,
    FeatureTable,
    GroundTruthInstance,
    load_box_detections,
    load_dataset,
    load_detections,
    save_dataset,
    save_detections,
    write_records,
)
from sdseval.masks import PixelBox, SuperpixelMap
from sdseval.synth import synth_generate

from conftest import rect_mask


def _one_instance():
    return GroundTruthInstance("a", 1, 2, rect_mask(1, 1, 2, 3, 5, 5))


class TestContainer:
    def test_empty_file(self, tmp_path):
        (tmp_path / CONTAINER_NAME).write_text("")
        ds = load_dataset(tmp_path)
        assert ds.instances == [] and ds.candidates == [] and ds.detections == []
        assert ds.features is None and ds.groups == {}

    def test_single_instance_byte_identical(self, tmp_path):
        save_dataset(Dataset(instances=[_one_instance()]), tmp_path / "a")
        first = (tmp_path / "a" / CONTAINER_NAME).read_bytes()
        save_dataset(load_dataset(tmp_path / "a"), tmp_path / "b")
        assert (tmp_path / "b" / CONTAINER_NAME).read_bytes() == first
        assert load_dataset(tmp_path / "b").instances == [_one_instance()]

    def test_canonical_line(self, tmp_path):
        save_dataset(Dataset(instances=[_one_instance()]), tmp_path)
        line = (tmp_path / CONTAINER_NAME).read_text().strip()
        assert line == json.dumps(json.loads(line), sort_keys=True, separators=(",", ":"))

    def test_feature_length_mismatch_names_candidate(self, tmp_path):
        m = rect_mask(0, 0, 1, 1, 4, 4).to_json()
        write_records(tmp_path / CONTAINER_NAME, [
            {"kind": "candidate", "image_id": "a", "candidate_id": 1, "mask": m},
            {"kind": "candidate", "image_id": "a", "candidate_id": 7, "mask": m},
            {"kind": "feature", "image_id": "a", "candidate_id": 1, "x": [0.0, 1.0]},
            {"kind": "feature", "image_id": "a", "candidate_id": 7, "x": [0.0]},
        ])
        with pytest.raises(DatasetError, match="candidate a/7"):
            load_dataset(tmp_path)

    @pytest.mark.parametrize(
        "record, message",
        [
            ({"kind": "instance", "image_id": "a", "instance_id": 1, "category_id": 1,
              "mask": {"w": 2, "h": 2, "runs": [1, 2]}}, "mask"),
            ({"kind": "instance", "image_id": "a", "category_id": 1,
              "mask": {"w": 2, "h": 2, "runs": [0, 4]}}, "instance_id"),
            ({"kind": "mystery"}, "unknown record kind"),
        ],
    )
    def test_schema_errors_carry_line(self, tmp_path, record, message):
        write_records(tmp_path / CONTAINER_NAME, [{"kind": "group", "category_id": 1, "group": "g"}, record])
        with pytest.raises(DatasetError, match=message) as info:
            load_dataset(tmp_path)
        assert info.value.line == 2

    def test_dangling_feature_reference(self, tmp_path):
        write_records(tmp_path / CONTAINER_NAME, [
            {"kind": "feature", "image_id": "a", "candidate_id": 3, "x": [1.0]},
        ])
        with pytest.raises(DatasetError, match="unknown candidate"):
            load_dataset(tmp_path)

    def test_duplicate_instance(self, tmp_path):
        rec = {"kind": "instance", "image_id": "a", "instance_id": 1, "category_id": 1,
               "mask": {"w": 2, "h": 2, "runs": [0, 4]}}
        write_records(tmp_path / CONTAINER_NAME, [rec, rec])
        with pytest.raises(DatasetError, match="duplicate"):
            load_dataset(tmp_path)

    def test_invalid_json(self, tmp_path):
        (tmp_path / CONTAINER_NAME).write_text('{"kind": "group"\n')
        with pytest.raises(DatasetError, match="invalid JSON"):
            load_dataset(tmp_path)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(3, 2, 2, 3)


class TestFeatureFormats:
    def test_inline_round_trip(self, ds, tmp_path):
        save_dataset(ds, tmp_path, "inline")
        back = load_dataset(tmp_path)
        assert back.features == ds.features
        assert back.instances == ds.instances and back.candidates == ds.candidates
        assert back.groups == ds.groups
        for k, sp in ds.superpixels.items():
            np.testing.assert_array_equal(back.superpixels[k].labels, sp.labels)

    def test_binary_sidecar(self, ds, tmp_path):
        save_dataset(ds, tmp_path, "binary")
        assert (tmp_path / FEATURES_BIN).exists() and (tmp_path / FEATURES_IDX).exists()
        back = load_dataset(tmp_path)
        for key in ds.features.keys():
            np.testing.assert_allclose(back.features.matrix([key]), ds.features.matrix([key]), rtol=1e-6)
        assert set(back.features.keys()) == set(ds.features.keys())

    def test_truncated_sidecar(self, ds, tmp_path):
        save_dataset(ds, tmp_path, "binary")
        data = (tmp_path / FEATURES_BIN).read_bytes()
        (tmp_path / FEATURES_BIN).write_bytes(data[:-3])
        with pytest.raises(DatasetError, match="bytes"):
            load_dataset(tmp_path)

    def test_table_rejects_wrong_length(self):
        table = FeatureTable(3)
        with pytest.raises(ValueError, match="candidate img/4"):
            table.add("img", "candidate", 4, [1.0, 2.0])


class TestDetectionFiles:
    def test_round_trip(self, tmp_path):
        dets = [
            Detection("a", 1, 0.5, rect_mask(0, 0, 1, 1, 4, 4), 3),
            Detection("b", 2, -1.25, rect_mask(1, 1, 3, 2, 4, 4)),
        ]
        save_detections(dets, tmp_path / "d.jsonl")
        assert load_detections(tmp_path / "d.jsonl") == dets

    def test_box_detections_from_masks(self, tmp_path):
        save_detections([Detection("a", 1, 0.5, rect_mask(1, 0, 2, 3, 4, 4))], tmp_path / "d.jsonl")
        (box,) = load_box_detections(tmp_path / "d.jsonl")
        assert box.box == PixelBox(1, 0, 2, 3)

    def test_superpixel_count_mismatch(self, tmp_path):
        write_records(tmp_path / CONTAINER_NAME, [
            {"kind": "superpixels", "image_id": "a", "w": 2, "h": 2, "labels": [0, 0, 1]},
        ])
        with pytest.raises(DatasetError, match="label count"):
            load_dataset(tmp_path)

    def test_superpixel_map_tiles(self):
        sp = SuperpixelMap.tiles(10, 6, 4)
        assert sp.num_superpixels == 6
        np.testing.assert_array_equal(sp.sizes, [16, 16, 8, 8, 8, 4])
