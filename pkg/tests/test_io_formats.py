"""
Tests for io_formats module.
"""

import json
import struct

import numpy as np
import pytest

from liftmesh.exceptions import (CheckpointIOError, FormatError,
                                 IngestionError, TopologyNotFoundError)
from liftmesh.io_formats import (MAGIC, PoseRecord, decode_container,
                                 encode_container, iter_coco_keypoints,
                                 load_checkpoint, parse_pose_lines,
                                 read_coco_keypoints, read_pose_file,
                                 record_to_json, save_checkpoint,
                                 write_pose_file)
from liftmesh.tensor_core import Tensor


def coco_document(n_people=1, values=51):
    annotations = []
    for i in range(n_people):
        keypoints = []
        for j in range(values // 3):
            keypoints.extend([float(j), float(j) + 0.5, 2 if j % 2 else 0])
        annotations.append({"id": 100 + i, "keypoints": keypoints[:values]})
    return {"images": [], "annotations": annotations}


class TestContainer:
    """Test the binary tensor container."""

    def test_empty_container(self):
        """Test an empty map is just the 16-byte header."""
        payload = encode_container({})
        assert payload == MAGIC + struct.pack("<IQ", 1, 0)
        assert decode_container(payload) == {}

    def test_two_by_two_layout(self):
        """Test the byte count and field order for one 2×2 tensor."""
        payload = encode_container({"w": np.array([[1.0, 2.0], [3.0, 4.0]])})
        assert len(payload) == 16 + 4 + 1 + 8 + 2 * 8 + 4 * 8
        assert payload[16:21] == struct.pack("<I", 1) + b"w"
        assert payload[21:29] == struct.pack("<II", 0, 2)
        assert struct.unpack("<4d", payload[-32:]) == (1.0, 2.0, 3.0, 4.0)

    def test_round_trip_dtypes(self):
        """Test floats, ints, scalars and tape tensors survive."""
        named = {
            "f": np.arange(6.0).reshape(2, 3),
            "i": np.array([3, -1], dtype=np.int64),
            "s": np.array(2.5),
            "t": Tensor([[0.25]]),
        }
        decoded = decode_container(encode_container(named))
        np.testing.assert_array_equal(decoded["f"], named["f"])
        assert decoded["i"].dtype == np.int64
        np.testing.assert_array_equal(decoded["i"], [3, -1])
        assert decoded["s"].shape == ()
        assert decoded["t"][0, 0] == 0.25
        assert not decoded["f"].flags.writeable

    def test_deterministic_bytes(self):
        """Test identical input gives identical bytes."""
        named = {"a": np.ones(3), "b": np.zeros((2, 2))}
        assert encode_container(named) == encode_container(dict(named))

    def test_bad_magic(self):
        """Test a foreign header is rejected."""
        payload = b"XXXX" + encode_container({})[4:]
        with pytest.raises(FormatError):
            decode_container(payload)

    def test_bad_version(self):
        """Test an unknown version is rejected."""
        with pytest.raises(FormatError):
            decode_container(MAGIC + struct.pack("<IQ", 2, 0))

    @pytest.mark.parametrize("cut", [3, 10, 20, 40])
    def test_truncated(self, cut):
        """Test every truncation point raises."""
        payload = encode_container({"w": np.ones((2, 2))})
        with pytest.raises(FormatError):
            decode_container(payload[:cut])

    def test_trailing_bytes(self):
        """Test extra bytes after the last entry are rejected."""
        with pytest.raises(FormatError):
            decode_container(encode_container({"w": np.ones(2)}) + b"\x00")

    def test_duplicate_entry(self):
        """Test two entries with the same name are rejected."""
        entry = encode_container({"w": np.ones(1)})[16:]
        payload = MAGIC + struct.pack("<IQ", 1, 2) + entry + entry
        with pytest.raises(FormatError) as excinfo:
            decode_container(payload)
        assert excinfo.value.entry == "w"

    def test_unknown_dtype(self):
        """Test a dtype code other than 0 or 1 is rejected."""
        payload = bytearray(encode_container({"w": np.ones(1)}))
        payload[21:25] = struct.pack("<I", 7)
        with pytest.raises(FormatError):
            decode_container(bytes(payload))

    @pytest.mark.parametrize("dims", [(2**62, 4), (2**61,), (3, 3)])
    def test_dims_exceed_payload(self, dims):
        """Test dims larger than the remaining bytes are a format error, not a reshape crash."""
        name = b"w"
        payload = (
            MAGIC
            + struct.pack("<IQ", 1, 1)
            + struct.pack("<I", len(name))
            + name
            + struct.pack("<II", 0, len(dims))
            + b"".join(struct.pack("<Q", d) for d in dims)
            + struct.pack("<d", 1.0)
        )
        with pytest.raises(FormatError, match="dims exceed payload") as excinfo:
            decode_container(payload)
        assert excinfo.value.entry == "w"

    def test_random_maps_round_trip(self):
        """Test seeded random name→tensor maps of mixed dtype and rank survive."""
        rng = np.random.default_rng(2024)
        for case in range(120):
            named = {}
            for k in range(int(rng.integers(0, 5))):
                rank = int(rng.integers(0, 5))
                shape = tuple(int(d) for d in rng.integers(0, 4, size=rank))
                if rng.random() < 0.5:
                    named[f"t{case}.{k}"] = np.asarray(rng.normal(size=shape))
                else:
                    named[f"t{case}.{k}"] = np.asarray(
                        rng.integers(-1000, 1000, size=shape, dtype=np.int64)
                    )
            decoded = decode_container(encode_container(named))
            assert list(decoded) == list(named)
            for key, value in named.items():
                assert decoded[key].dtype == value.dtype
                assert decoded[key].shape == value.shape
                np.testing.assert_array_equal(decoded[key], value)

    def test_unsupported_array(self):
        """Test strings cannot be stored."""
        with pytest.raises(FormatError):
            encode_container({"s": np.array(["a"])})

    def test_save_load(self, tmp_path):
        """Test the file round trip leaves no temp files behind."""
        path = tmp_path / "ckpt.lmtc"
        save_checkpoint(path, {"w": np.eye(3)})
        np.testing.assert_array_equal(load_checkpoint(path)["w"], np.eye(3))
        assert [p.name for p in tmp_path.iterdir()] == ["ckpt.lmtc"]

    def test_missing_file(self, tmp_path):
        """Test a missing file is an I/O error."""
        with pytest.raises(CheckpointIOError):
            load_checkpoint(tmp_path / "nope.lmtc")


class TestPoseRecords:
    """Test line-delimited pose records."""

    def test_parse_and_convert(self, pose_coords):
        """Test a record becomes a Pose2D."""
        line = json.dumps({"id": 1, "joints": pose_coords.tolist()})
        (record,) = parse_pose_lines([line, ""])
        pose = record.to_pose2d()
        np.testing.assert_allclose(pose.coords, pose_coords)
        assert pose.topology == "h36m17"

    def test_malformed_json(self):
        with pytest.raises(IngestionError):
            list(parse_pose_lines(["{not json"]))

    def test_wrong_joint_count(self):
        """Test 16 joints under h36m17 raise with the record id."""
        line = json.dumps({"id": "a", "joints": [[0.0, 0.0]] * 16})
        with pytest.raises(IngestionError) as excinfo:
            list(parse_pose_lines([line]))
        assert excinfo.value.record_id == "a"

    def test_wrong_row_width(self):
        line = json.dumps({"id": 2, "gt3d": [[0.0, 0.0]] * 17})
        with pytest.raises(IngestionError):
            list(parse_pose_lines([line]))

    def test_missing_id(self):
        with pytest.raises(IngestionError):
            list(parse_pose_lines([json.dumps({"joints": [[0.0, 0.0]] * 17})]))

    def test_unknown_topology(self):
        line = json.dumps({"id": 3, "topology": "mpii16", "joints": [[0.0, 0.0]] * 16})
        with pytest.raises(TopologyNotFoundError):
            list(parse_pose_lines([line]))

    def test_joints_3d_preference(self):
        """Test predicted joints win unless ground truth is preferred."""
        record = PoseRecord(id=4, gt3d=[[1.0, 1.0, 1.0]] * 17, joints3d=[[2.0, 2.0, 2.0]] * 17)
        assert record.joints_3d()[0, 0] == 2.0
        assert record.joints_3d(prefer_gt=True)[0, 0] == 1.0
        with pytest.raises(IngestionError):
            PoseRecord(id=5).joints_3d()

    def test_mesh_vertices(self):
        record = PoseRecord(id=6, gt_vertices=[[0.0, 1.0, 2.0]])
        assert record.mesh_vertices().shape == (1, 3)
        with pytest.raises(IngestionError):
            PoseRecord(id=7, vertices=[[0.0, 1.0]]).mesh_vertices()

    def test_file_round_trip(self, tmp_path, pose_coords):
        """Test written records read back unchanged and omit empty fields."""
        path = tmp_path / "poses.jsonl"
        records = [PoseRecord(id=i, joints=pose_coords.tolist()) for i in range(3)]
        write_pose_file(path, records)
        assert read_pose_file(path) == records
        assert "gt3d" not in record_to_json(records[0])


class TestCocoKeypoints:
    """Test COCO keypoint ingestion."""

    def test_read(self, tmp_path):
        """Test coordinates and visibility-derived confidence."""
        path = tmp_path / "coco.json"
        path.write_text(json.dumps(coco_document(n_people=2)))
        items = list(iter_coco_keypoints(path))
        assert [ann_id for ann_id, _ in items] == [100, 101]
        pose = items[0][1]
        assert pose.topology == "coco17"
        np.testing.assert_array_equal(pose.coords[3], [3.0, 3.5])
        assert pose.confidence[0] == 0.0
        assert pose.confidence[1] == 1.0
        assert len(read_coco_keypoints(path)) == 2

    def test_wrong_value_count(self, tmp_path):
        """Test 50 keypoint values raise with the annotation id."""
        path = tmp_path / "coco.json"
        path.write_text(json.dumps(coco_document(values=50)))
        with pytest.raises(IngestionError) as excinfo:
            read_coco_keypoints(path)
        assert excinfo.value.record_id == 100

    def test_no_annotations(self, tmp_path):
        path = tmp_path / "coco.json"
        path.write_text(json.dumps({"images": []}))
        with pytest.raises(IngestionError):
            read_coco_keypoints(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "coco.json"
        path.write_text("{")
        with pytest.raises(IngestionError):
            read_coco_keypoints(path)
