import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from align_qi.errors import (BboxMismatch, EmptyMask, FormatError, InvalidRotation,
                             RleLengthMismatch, SchemaError)
from align_qi.scene_io import (AnchorSet, GTBox, InstanceMask, QueryAnchor, Scene,
                               anchors_to_text, calibration_to_dict, load_anchors,
                               load_point_cloud, load_scene, mask_bbox, masks_to_dict,
                               parse_anchors, parse_calibration, parse_ground_truth,
                               parse_masks, rle_decode, rle_encode, save_anchors,
                               save_point_cloud, save_scene)
from conftest import make_camera

LOADER_ERRORS = (SchemaError, FormatError)


def calib_doc(**over):
    cam = {"camera_id": 0, "intrinsics": [[1000, 0, 800], [0, 1000, 450], [0, 0, 1]],
           "extrinsic": np.eye(4).tolist(), "width": 1600, "height": 900}
    cam.update(over)
    return {"cameras": [cam]}


# ---- point clouds --------------------------------------------------------

def test_empty_point_cloud(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(b"")
    pts, inten = load_point_cloud(p)
    assert pts.shape == (0, 3) and inten.shape == (0,)


def test_single_record(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<5f", 1, 2, 3, 0.5, 0))
    pts, inten = load_point_cloud(p)
    assert pts.tolist() == [[1, 2, 3]] and inten.tolist() == [0.5]


def test_truncated_cloud_names_file(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * 21)
    with pytest.raises(FormatError, match="bad.bin"):
        load_point_cloud(p)


def test_missing_cloud_is_oserror(tmp_path):
    with pytest.raises(OSError):
        load_point_cloud(tmp_path / "nope.bin")


def test_point_cloud_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=30, size=(1000, 3)).astype(np.float32).astype(float)
    inten = rng.uniform(size=1000).astype(np.float32).astype(float)
    save_point_cloud(tmp_path / "c.bin", pts, inten)
    p2, i2 = load_point_cloud(tmp_path / "c.bin")
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(i2, inten)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200))
def test_point_cloud_loader_is_total(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("fz") / "x.bin"
    p.write_bytes(data)
    try:
        pts, _ = load_point_cloud(p)
        assert len(pts) == len(data) // 20
    except FormatError:
        pass


# ---- calibration ---------------------------------------------------------

def test_valid_calibration():
    (cam,) = parse_calibration(calib_doc())
    assert cam.image_width == 1600 and cam.intrinsics[0, 2] == 800


def test_calibration_bad_row_norm():
    E = np.eye(4)
    E[0, :3] *= 1.1
    with pytest.raises(InvalidRotation):
        parse_calibration(calib_doc(extrinsic=E.tolist()))


def test_calibration_missing_key_named():
    doc = calib_doc()
    del doc["cameras"][0]["intrinsics"]
    with pytest.raises(SchemaError, match="intrinsics") as ei:
        parse_calibration(doc)
    assert not isinstance(ei.value, InvalidRotation)


def test_calibration_lists_every_violation():
    E = np.eye(4)
    E[0, :3] *= 1.1
    doc = calib_doc(extrinsic=E.tolist(), width=0, intrinsics=[[-1, 0, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(SchemaError) as ei:
        parse_calibration(doc)
    assert len(ei.value.violations) == 3


def test_calibration_round_trip():
    cams = [make_camera(k) for k in range(3)]
    assert parse_calibration(calibration_to_dict(cams)) == cams


# ---- masks ---------------------------------------------------------------

def test_full_frame_rle():
    (m,) = parse_masks({"width": 4, "height": 4, "instances": [
        {"camera_id": 0, "instance_id": 1, "class_id": 0, "bbox": [0, 0, 3, 3],
         "rle_counts": [0, 16]}]})
    assert m.area == 16 and m.bbox == (0, 0, 3, 3)


def test_rle_is_column_major():
    bm = np.zeros((3, 4), dtype=bool)
    bm[0, 1] = True  # v=0, u=1 -> flat column-major index 3
    assert rle_encode(bm) == [3, 1, 8]
    np.testing.assert_array_equal(rle_decode([3, 1, 8], 4, 3), bm)


def test_rle_short_counts():
    with pytest.raises(RleLengthMismatch):
        rle_decode([0, 15], 4, 4)


@pytest.mark.parametrize("inst,err", [
    ({"bbox": [0, 0, 2, 3], "rle_counts": [0, 16]}, BboxMismatch),
    ({"bbox": [0, 0, 3, 3], "rle_counts": [16]}, EmptyMask),
    ({"bbox": [0, 0, 3, 3], "rle_counts": [0, 17]}, RleLengthMismatch),
    ({"bbox": [0, 0, 3, 3], "rle_counts": [-1, 17]}, RleLengthMismatch),
])
def test_mask_errors(inst, err):
    inst = {"camera_id": 0, "instance_id": 1, "class_id": 0, **inst}
    with pytest.raises(err):
        parse_masks({"width": 4, "height": 4, "instances": [inst]})


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_rle_round_trip(w, h, seed):
    bm = np.random.default_rng(seed).uniform(size=(h, w)) < 0.4
    np.testing.assert_array_equal(rle_decode(rle_encode(bm), w, h), bm)
    if bm.any():
        (m,) = parse_masks(masks_to_dict([InstanceMask(0, 3, bm, 9)], w, h))
        np.testing.assert_array_equal(m.bitmap, bm)
        assert m.bbox == mask_bbox(bm)


# ---- ground truth --------------------------------------------------------

def test_gt_round_trip_and_errors():
    g = GTBox([1.0, 2.0, -1.0], (1.9, 4.5, 1.6), 0.3, 0, 0.55)
    (g2,) = parse_ground_truth([g.to_dict()])
    assert g2.to_dict() == g.to_dict()
    bad = g.to_dict() | {"visible_fraction": 1.5}
    with pytest.raises(SchemaError):
        parse_ground_truth([bad])
    with pytest.raises(SchemaError):
        parse_ground_truth([{"center": [0, 0, 0]}])


# ---- anchors -------------------------------------------------------------

def test_empty_anchor_file_has_header_only(tmp_path):
    save_anchors(AnchorSet([], "h", "s"), tmp_path / "a.jsonl")
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0]) == {"config_hash": "h", "count": 0, "scene_id": "s"}
    assert load_anchors(tmp_path / "a.jsonl").anchors == []


def test_900_anchor_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    pos = rng.uniform(-54, 54, size=(900, 3)) * np.exp(rng.normal(size=(900, 1)))
    kinds = ["oce", "cluster", "neighbor", "background"]
    anchors = [QueryAnchor(p, kinds[k % 4], 3 if k % 4 == 0 else None, k if k % 4 < 3 else None)
               for k, p in enumerate(pos)]
    save_anchors(AnchorSet(anchors, "abc", "scene"), tmp_path / "a.jsonl")
    back = load_anchors(tmp_path / "a.jsonl")
    assert back.positions().tobytes() == pos.tobytes()
    assert back.kinds() == [a.kind for a in anchors]
    assert [a.class_id for a in back.anchors] == [a.class_id for a in anchors]


def test_neighbor_without_class_is_valid():
    text = anchors_to_text(AnchorSet([QueryAnchor([1, 2, 3], "neighbor", None, 4)], "h", "s"))
    (a,) = parse_anchors(text).anchors
    assert a.class_id is None and a.source == 4


def test_anchor_count_mismatch():
    text = anchors_to_text(AnchorSet([QueryAnchor([1, 2, 3], "oce", 0, 0)], "h", "s"))
    with pytest.raises(SchemaError):
        parse_anchors(text.splitlines()[0])


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=300))
def test_anchor_parser_is_total(text):
    try:
        parse_anchors(text)
    except SchemaError:
        pass


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-10, 2000) | st.floats(allow_nan=False) | st.text(max_size=5),
    lambda kids: st.lists(kids, max_size=5) | st.dictionaries(
        st.sampled_from(["cameras", "camera_id", "intrinsics", "extrinsic", "width", "height",
                         "instances", "instance_id", "class_id", "bbox", "rle_counts",
                         "center", "size", "yaw", "visible_fraction", "x"]), kids, max_size=6),
    max_leaves=30)


@settings(max_examples=300, deadline=None)
@given(json_values)
def test_json_loaders_are_total(doc):
    for parse in (parse_calibration, parse_masks, parse_ground_truth):
        try:
            parse(doc)
        except LOADER_ERRORS:
            pass


# ---- whole scenes --------------------------------------------------------

def test_scene_round_trip(tmp_path):
    cams = [make_camera(k, width=8, height=6, f=5.0, cx=4.0, cy=3.0) for k in range(2)]
    bm = np.zeros((6, 8), dtype=bool)
    bm[2:4, 1:5] = True
    pts = np.array([[1.5, 2.25, -0.5], [10.0, 0.0, 1.0]])
    gt = [GTBox([1, 2, 3], (1, 2, 3), 0.0, 5, 1.0)]
    scene = Scene("abc", pts, cams, [InstanceMask(1, 5, bm, 0)], gt, np.array([0.5, 1.0]))
    save_scene(scene, tmp_path / "abc")
    back = load_scene(tmp_path / "abc")
    assert back.scene_id == "abc"
    np.testing.assert_array_equal(back.points, pts)
    assert back.cameras == cams
    np.testing.assert_array_equal(back.masks[0].bitmap, bm)
    assert back.ground_truth[0].to_dict() == gt[0].to_dict()


def test_scene_mask_size_must_match_camera(tmp_path):
    cams = [make_camera(0, width=8, height=6)]
    save_scene(Scene("s", np.zeros((1, 3)), cams), tmp_path / "s")
    (tmp_path / "s" / "masks.json").write_text(json.dumps(masks_to_dict(
        [InstanceMask(0, 0, np.ones((5, 5), bool), 0)], 5, 5)))
    with pytest.raises(SchemaError, match="does not match"):
        load_scene(tmp_path / "s")
