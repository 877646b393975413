import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from align_qi.dqb import BalanceConfig, assemble
from align_qi.errors import PlacementFailure, SchemaError
from align_qi.harness import (Box, SceneSpec, camera_rig, center_error, coverage,
                              evaluate_scene, place_boxes, points_in_box, render_scene,
                              report, scene_seeds, synth_scene, visibility_bin)
from align_qi.scene_io import AnchorSet, GTBox, QueryAnchor

NO_OBJECTS = {}


# ---- visibility levels ---------------------------------------------------

@pytest.mark.parametrize("frac,level", [(0.0, 1), (0.35, 1), (0.3999999, 1), (0.40, 2), (0.59, 2),
                                        (0.6, 3), (0.79, 3), (0.8, 4), (1.0, 4)])
def test_visibility_bins(frac, level):
    assert visibility_bin(frac) == level


@given(st.floats(0, 1), st.floats(0, 1))
def test_visibility_bin_monotone(a, b):
    lo, hi = sorted((a, b))
    assert visibility_bin(lo) <= visibility_bin(hi)


def test_visibility_bin_rejects_out_of_range():
    with pytest.raises(ValueError):
        visibility_bin(1.01)


# ---- generator -----------------------------------------------------------

def test_spec_validation_and_json():
    with pytest.raises(SchemaError):
        SceneSpec(point_density=0)
    with pytest.raises(SchemaError):
        SceneSpec(occluder_prob=1.5)
    with pytest.raises(SchemaError):
        SceneSpec.from_dict({"colour": "red"})
    spec = SceneSpec(seed=4, class_counts={"car": [1, 2]})
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_camera_rig_covers_all_azimuths():
    cams = camera_rig()
    assert [c.camera_id for c in cams] == list(range(6))
    from align_qi.geometry import project_point
    for ang in np.linspace(-np.pi, np.pi, 73):
        p = (20 * np.cos(ang), 20 * np.sin(ang), -0.5)
        assert any(project_point(p, c) is not None for c in cams)


def test_zero_objects_gives_ground_only():
    syn = synth_scene(SceneSpec(class_counts=NO_OBJECTS), 0)
    assert syn.scene.masks == [] and syn.scene.ground_truth == []
    np.testing.assert_allclose(syn.scene.points[:, 2], -1.8, atol=0.2)
    assert (syn.point_object == -1).all() and len(syn.point_object) > 1000


def test_single_unoccluded_box_is_level_4():
    box = Box(np.array([15.0, 3.0, -1.05]), (1.9, 4.5, 1.5), 0.3, 0)
    syn = render_scene([box], SceneSpec(), np.random.default_rng(1))
    (g,) = syn.scene.ground_truth
    assert g.visible_fraction == 1.0 and visibility_bin(g.visible_fraction) == 4


def test_box_hidden_behind_larger_box():
    truck = Box(np.array([12.0, 0.0, -1.8 + 2.25]), (3.5, 14.0, 4.5), np.pi / 2, 1)
    ped = Box(np.array([25.0, 0.0, -1.8 + 0.9]), (0.6, 0.6, 1.8), 0.0, 5)
    syn = render_scene([truck, ped], SceneSpec(), np.random.default_rng(2))
    assert (syn.point_object == 1).sum() == 0
    assert points_in_box(syn.scene.points, syn.scene.ground_truth[1]) == 0
    assert syn.scene.ground_truth[1].visible_fraction == 0.0
    assert all(syn.mask_object[m.instance_id] == 0 for m in syn.scene.masks)


def test_placement_failure():
    spec = SceneSpec(class_counts={"bus": [40, 40]}, max_range=12.0, max_attempts=20)
    with pytest.raises(PlacementFailure):
        place_boxes(spec, np.random.default_rng(3))


def test_boxes_never_interpenetrate():
    for seed in range(10):
        boxes = place_boxes(SceneSpec(), np.random.default_rng(seed))
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert not a.footprint().intersects(b.footprint())


def local_coords(box, pts):
    return (pts - box.center) @ box.rotation


@pytest.mark.parametrize("seed", [4, 5])
def test_lidar_points_are_nearest_hits_on_one_surface(seed):
    spec = SceneSpec(noise_sigma=0.0)
    syn = synth_scene(spec, seed)
    pts = syn.scene.points
    rng_ = np.linalg.norm(pts, axis=1)
    dirs = pts / rng_[:, None]
    t_best = np.full(len(pts), np.inf)
    for b in syn.boxes:
        t_best = np.minimum(t_best, b.ray_hits(np.zeros(3), dirs))
    assert (t_best >= rng_ - 1e-6).all()
    ground = syn.point_object == -1
    np.testing.assert_allclose(pts[ground, 2], spec.ground_z, atol=1e-9)
    for k, b in enumerate(syn.boxes):
        own = syn.point_object == k
        if own.any():
            rel = np.abs(local_coords(b, pts[own])) / b.half
            np.testing.assert_allclose(rel.max(axis=1), 1.0, atol=1e-9)


def test_noisy_points_stay_within_noise_of_surface():
    spec = SceneSpec(noise_sigma=0.02)
    syn = synth_scene(spec, 6)
    pts = syn.scene.points
    ground = syn.point_object == -1
    # range noise moves a ground point along its ray; bound the vertical miss loosely
    assert np.abs(pts[ground, 2] - spec.ground_z).max() < 0.2


def test_mask_pixels_see_their_own_box_first():
    syn = synth_scene(SceneSpec(image_width=200, image_height=112), 7)
    for m in syn.scene.masks:
        cam = syn.scene.camera(m.camera_id)
        v, u = np.nonzero(m.bitmap)
        dirs = cam.pixel_rays(np.column_stack([u, v]))
        owner = syn.boxes[syn.mask_object[m.instance_id]]
        t_own = owner.ray_hits(cam.center, dirs)
        assert np.isfinite(t_own).all()
        for b in syn.boxes:
            assert (b.ray_hits(cam.center, dirs) >= t_own).all()


def test_generator_is_deterministic():
    a = synth_scene(SceneSpec(), np.random.default_rng(scene_seeds(9, 3)[2]))
    b = synth_scene(SceneSpec(), np.random.default_rng(scene_seeds(9, 3)[2]))
    assert a.scene.points.tobytes() == b.scene.points.tobytes()
    assert [m.bitmap.tobytes() for m in a.scene.masks] == [m.bitmap.tobytes() for m in b.scene.masks]


# ---- metrics -------------------------------------------------------------

def gt_at(*centers, vis=1.0, cls=0):
    return [GTBox(c, (1.0, 1.0, 1.0), 0.0, cls, vis) for c in centers]


def aset(*items):
    return AnchorSet([QueryAnchor(p, k, c) for p, k, c in items], "h", "s")


def test_coverage_examples():
    gt = gt_at((10, 0, 0), (0, 20, 0))
    flags, rate = coverage(aset(((10, 0, 0), "oce", 0)), gt, 2.0)
    assert flags.tolist() == [True, False] and rate == 0.5
    assert coverage(aset(), gt, 2.0)[1] == 0.0
    bg = aset(((0, 20, 0), "background", None))
    assert coverage(bg, gt, 2.0)[1] == 0.0
    assert coverage(bg, gt, 2.0, include_background=True)[1] == 0.5


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 4.0), st.integers(0, 2**31))
def test_dense_grid_covers_everything(s, seed):
    ax = np.arange(-10, 10 + s, s)
    grid = np.stack(np.meshgrid(ax, ax, ax), -1).reshape(-1, 3)
    centers = np.random.default_rng(seed).uniform(-10, 10, size=(50, 3))
    assert coverage(grid, gt_at(*centers), s * np.sqrt(3) / 2 * 1.0001)[1] == 1.0


def test_center_error_examples():
    gt = gt_at((10, 0, 0), (30, 0, 0), vis=0.5)
    res = center_error([QueryAnchor((10, 0, 0), "oce", 0), QueryAnchor((0, 40, 0), "oce", 0),
                        QueryAnchor((30, 0, 0), "oce", 5)], gt)
    assert len(res.matches) == 1 and res.unmatched == 2
    m = res.matches[0]
    assert m.error == 0.0 and m.level == 2
    res = center_error([QueryAnchor((9, 0, 0), "oce", 0)], gt)
    assert res.matches[0].radial_error == pytest.approx(1.0)


def test_zero_offset_oce_is_biased_toward_sensor():
    from align_qi.oce import DepthOffsetTable, run_oce
    spec = SceneSpec(class_counts={"car": [6, 6]}, occluder_prob=0.0)
    raw, fixed = [], []
    for seed in range(5):
        syn = synth_scene(spec, seed)
        gt = syn.scene.ground_truth
        raw += center_error(run_oce(syn.scene, DepthOffsetTable.zeros()), gt).radial_errors().tolist()
        fixed += center_error(run_oce(syn.scene, DepthOffsetTable()), gt).radial_errors().tolist()
    assert np.mean(raw) > 0.8
    assert abs(np.mean(fixed)) < abs(np.mean(raw))


def test_points_in_box():
    g = GTBox((10, 0, 0), (2.0, 4.0, 1.0), np.pi / 2, 0, 1.0)
    pts = np.array([[10, 0, 0], [10, 1.9, 0], [11.5, 0, 0], [10, 0, 0.55]])
    assert points_in_box(pts, g, margin=0.0) == 2
    assert points_in_box(pts, g, margin=0.1) == 3


# ---- reports -------------------------------------------------------------

def test_single_scene_all_level4():
    gt = gt_at((10, 0, 0), (20, 0, 0))
    ev = evaluate_scene(aset(((10, 0, 0), "oce", 0)), gt)
    rep = report([ev])
    assert [r.gt_count for r in rep.rows] == [0, 0, 0, 2]
    assert rep.row(4).coverage == 0.5 and rep.row(1).coverage == 0.0
    assert rep.total_gt == 2


def test_zero_return_gt_is_excluded_when_points_given():
    gt = gt_at((10, 0, 0), (20, 0, 0))
    ev = evaluate_scene(aset(), gt, points=np.array([[10.0, 0.1, 0.0]]))
    assert len(ev.levels) == 1 and ev.excluded == 1


def test_csv_json_shape():
    rep = report([evaluate_scene(aset(((10, 0, 0), "oce", 0)), gt_at((10, 0, 0), vis=0.1))])
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("level,gt_count,coverage,median_err_m,mean_err_m,car_gt_count")
    assert len(lines) == 5 and lines[1].startswith("1,1,1.000000,0.000000,0.000000,1,1.000000")
    doc = json.loads(rep.to_json())
    assert [lv["gt_count"] for lv in doc["levels"]] == [1, 0, 0, 0]


def test_report_identity_and_additivity_and_replay():
    cfg = BalanceConfig()
    spec = SceneSpec(image_width=160, image_height=90)

    def run():
        evals = []
        for k, seq in enumerate(scene_seeds(3, 100)):
            syn = synth_scene(spec, np.random.default_rng(seq), f"s{k}")
            evals.append(evaluate_scene(assemble(syn.scene, cfg), syn.scene.ground_truth,
                                        points=syn.scene.points))
        return evals

    evals = run()
    rep = report(evals)
    assert sum(r.gt_count for r in rep.rows) == rep.total_gt == sum(len(e.levels) for e in evals)
    parts = [report(evals[:37]), report(evals[37:])]
    for lvl in range(1, 5):
        assert rep.row(lvl).gt_count == sum(p.row(lvl).gt_count for p in parts)
        assert rep.row(lvl).covered == sum(p.row(lvl).covered for p in parts)
        assert 0.0 <= rep.row(lvl).coverage <= 1.0
    assert report(run()).to_json() == rep.to_json()
