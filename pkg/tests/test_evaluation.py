import json

import numpy as np
import pytest

from sensorcal import synth
from sensorcal.calibrator import CalibrationOptions, calibrate
from sensorcal.dataset import Collection, Dataset, RangeDetection, RgbDetection, SensorSpec
from sensorcal.evaluation import (
    TABLES,
    Evaluator,
    PairwiseReport,
    eval_lidar_lidar,
    eval_rgb_rgb,
    parse_text,
    polyline_distance,
    report,
)
from sensorcal.geometry import RigidTransform, TransformTree
from sensorcal.sensors import CameraIntrinsics, PatternSpec, corner_points, project_points

from conftest import small_scene

INTR = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
SPEC = PatternSpec(5, 4, 0.1, boundary_sample_step=0.01)
BOARD = RigidTransform(np.eye(3), [-0.2, -0.15, 2.0])  # fronto-parallel, 2 m ahead of cam_a


def two_cameras(offset=(0.0, 0.0, 0.0), see_b=True):
    truth = TransformTree("world")
    truth.add_edge("world", "cam_a", RigidTransform.identity())
    truth.add_edge("world", "cam_b", RigidTransform(np.eye(3), [0.3, 0.0, 0.0]))
    sensors = [SensorSpec("cam_a", "rgb", "cam_a", ("world", "cam_a"), INTR),
               SensorSpec("cam_b", "rgb", "cam_b", ("world", "cam_b"), INTR)]
    dets = {}
    for s in sensors:
        if s.id == "cam_b" and not see_b:
            continue
        uv, _ = project_points(INTR, truth.chain_to(s.data_frame).inverse().apply(BOARD.apply(corner_points(SPEC))))
        dets[s.id] = RgbDetection(np.arange(SPEC.n_corners), uv)
    ds = Dataset(SPEC, truth, sensors, [Collection(0, dets)])
    calibrated = truth.copy()
    calibrated.set_transform("cam_b", RigidTransform(np.eye(3), np.array([0.3, 0.0, 0.0]) + offset))
    return ds, calibrated


def test_rgb_rgb_perfect_and_offset():
    ds, exact = two_cameras()
    assert eval_rgb_rgb(ds, exact, "cam_a", "cam_b", {0: BOARD}).rms < 1e-9
    ds, off = two_cameras(offset=(0.005, 0.0, 0.0))
    r = eval_rgb_rgb(ds, off, "cam_a", "cam_b", {0: BOARD})
    # every corner sits at depth 2 m, so the shift is fx * 0.005 / 2 everywhere
    assert r.rms == pytest.approx(600 * 0.005 / 2.0, abs=1e-9)
    assert r.collections == 1 and len(r.distances) == SPEC.n_corners


def test_rgb_rgb_without_codetections_is_not_evaluable():
    ds, tree = two_cameras(see_b=False)
    r = eval_rgb_rgb(ds, tree, "cam_a", "cam_b", {0: BOARD})
    assert not r.evaluable and np.isnan(r.rms)
    rep, _ = report(ds, tree, {0: BOARD})
    row = rep.table("rgb-rgb")[0]
    assert row.rms is None
    text = rep.text()
    assert "n/a (a)" in text and "(a) cam_a -> cam_b: no co-detections" in text
    assert rep.averages["rgb-rgb"] is None


def test_identical_clouds_are_zero_millimeters():
    tree = TransformTree("world")
    tree.add_edge("world", "l1", RigidTransform.identity())
    tree.add_edge("world", "l2", RigidTransform.identity())
    pts = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    det = RangeDetection(pts, pts[:10])
    ds = Dataset(SPEC, tree, [SensorSpec("l1", "lidar3d", "l1", ("world", "l1")),
                              SensorSpec("l2", "lidar3d", "l2", ("world", "l2"))],
                 [Collection(0, {"l1": det, "l2": det})])
    assert eval_lidar_lidar(ds, tree, "l1", "l2").rms == 0.0
    moved = tree.copy()
    moved.set_transform("l1", RigidTransform(np.eye(3), [0.0, 0.0, 0.003]))
    # a pure shift smaller than the point spacing moves every nearest neighbour by the shift
    r = eval_lidar_lidar(ds, moved, "l1", "l2")
    assert r.rms <= 3.0 + 1e-9 and np.all(r.distances >= 0)


def test_polyline_distance_against_dense_sampling():
    rng = np.random.default_rng(2)
    poly = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 5.0], [0.0, 5.0], [0.0, 0.0]])
    t = np.linspace(0, 1, 20001)[:, None]
    dense = np.vstack([a + t * (b - a) for a, b in zip(poly[:-1], poly[1:])])
    pts = rng.uniform(-3, 13, (300, 2))
    brute = np.min(np.linalg.norm(pts[:, None] - dense[None], axis=2), axis=1)
    assert np.max(np.abs(polyline_distance(pts, poly) - brute)) < 1e-3
    assert np.allclose(polyline_distance(np.array([[5.0, -2.0], [5.0, 2.0]]), poly), [2.0, 2.0])


@pytest.fixture(scope="module")
def noiseless_report(small_noiseless):
    ds, gt = small_noiseless
    return report(ds, gt.tree)


def test_perfect_calibration_scores_zero(noiseless_report):
    rep, raw = noiseless_report
    for r in rep.rows:
        if r.table == "lidar-lidar" or r.rms is None:
            continue
        assert r.rms < 1e-6, (r.table, r.src, r.dst)
    # nearest-neighbour distances between two ring patterns are bounded by the ring spacing
    for r in rep.table("lidar-lidar"):
        if r.rms is not None:
            assert np.max(raw[("lidar-lidar", r.src, r.dst)]) < 100.0


def test_table_shapes(noiseless_report):
    rep, _ = noiseless_report
    counts = {name: len(rep.table(name)) for name, *_ in TABLES}
    assert counts == {"rgb-rgb": 3, "lidar-lidar": 3, "lidar-rgb": 9, "lidar-depth": 3, "depth-rgb": 3}
    units = {r.table: r.unit for r in rep.rows}
    assert units["lidar-lidar"] == "millimeters" and units["rgb-rgb"] == "pixels"


def test_averages_are_row_means(noiseless_report):
    rep, _ = noiseless_report
    for name, *_ in TABLES:
        vals = [r.rms for r in rep.table(name) if r.rms is not None]
        if vals:
            assert rep.averages[name] == pytest.approx(np.mean(vals), abs=1e-6)


def test_text_and_json_carry_the_same_numbers(noiseless_report):
    rep, _ = noiseless_report
    doc = json.loads(json.dumps(rep.to_dict()))
    back = PairwiseReport.from_dict(doc)
    assert [r.to_dict() for r in back.rows] == [r.to_dict() for r in rep.rows]
    parsed = parse_text(rep.text())
    for name, *_ in TABLES:
        t = doc["tables"][name]
        assert parsed[name]["average"] == t["average"]
        for row in t["rows"]:
            assert parsed[name][(row["src"], row["dst"])] == row["rms"]


def test_range_points_behind_target_are_excluded(small_noiseless):
    ds, gt = small_noiseless
    flipped = gt.tree.copy()
    child = ds.sensor("rgb_1").calibrated_edge[1]
    T = flipped.edge(child).transform
    # spin the camera half a turn about its own y axis: the board is now behind it
    flip = RigidTransform(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
    flipped.set_transform(child, T @ flip)
    ev = Evaluator(ds, flipped, dict(gt.pattern_poses))
    r = ev.range_to_image("lidar_1", "rgb_1")
    assert not r.evaluable and r.excluded > 0


def test_evaluate_rejects_wrong_modalities(small_noiseless):
    ds, gt = small_noiseless
    ev = Evaluator(ds, gt.tree, dict(gt.pattern_poses))
    with pytest.raises(ValueError):
        ev.rgb_rgb("lidar_1", "rgb_1")
    with pytest.raises(ValueError):
        ev.range_to_image("rgb_1", "lidar_1")


@pytest.mark.slow
def test_train_metrics_do_not_beat_test_metrics_in_median():
    noise = synth.NoiseModel()
    train_avg, test_avg = [], []
    for seed in range(10):
        train, gt = synth.generate(small_scene(seed, noise), with_raw=False)
        test, _ = synth.generate(small_scene(1000 + seed, noise, first_collection_id=100), with_raw=False)
        init = synth.perturb_initial(gt, 0.1, 0.1, seed=seed, sensors=train.sensors, anchor="lidar_1")
        res = calibrate(train, init, CalibrationOptions(anchor="lidar_1"))
        tree = res.sensor_tree()
        a, _ = report(train, tree)
        b, _ = report(test, tree)
        train_avg.append(a.averages["rgb-rgb"])
        test_avg.append(b.averages["rgb-rgb"])
    assert np.median(train_avg) <= np.median(test_avg)
