import numpy as np
import pytest

from sensorcal import synth
from sensorcal.calibrator import (
    CalibrationError,
    CalibrationOptions,
    Problem,
    calibrate,
    initialize_pattern_poses,
    plane_pose,
    planar_pose,
    prepare_tree,
)
from sensorcal.dataset import dumps
from sensorcal.geometry import RigidTransform, TreeError, exp_so3, transform_error
from sensorcal.sensors import CameraIntrinsics, PatternSpec, corner_points, project_points

from conftest import gradient_check

ANCHOR = "lidar_1"


def relative_errors(gt, tree, sensors, anchor=ANCHOR):
    """Worst translation / rotation error of every sensor pose relative to the anchor."""
    ref_gt = gt.tree.chain_to(sensors[anchor].data_frame)
    ref = tree.chain_to(sensors[anchor].data_frame)
    worst = [0.0, 0.0]
    for sid, s in sensors.items():
        a = ref_gt.inverse() @ gt.tree.chain_to(s.data_frame)
        b = ref.inverse() @ tree.chain_to(s.data_frame)
        dt, dr = transform_error(a, b)
        worst = [max(worst[0], dt), max(worst[1], dr)]
    return worst


def gt_problem(ds, gt, collections=None, anchor=ANCHOR, **kw):
    tree, packed = prepare_tree(ds, gt.full_tree(collections), anchor)
    cids = sorted(collections if collections is not None else gt.pattern_poses)
    return Problem(ds, tree, packed, cids, **kw)


# ----------------------------------------------------------------------------
# initialization


def test_planar_pose_from_four_corners():
    intr = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
    spec = PatternSpec(5, 4, 0.1)
    T = RigidTransform(exp_so3([0.2, -0.3, 0.1]), [-0.1, -0.2, 1.8])
    ids = np.array([0, 4, 15, 19])
    uv, _ = project_points(intr, T.apply(corner_points(spec)[ids]))
    est = planar_pose(intr, ids, uv, spec)
    assert est.allclose(T, 1e-9)
    with pytest.raises(CalibrationError):
        planar_pose(intr, ids[:3], uv[:3], spec)


def test_plane_pose_normal_from_range_points(small_noiseless):
    ds, gt = small_noiseless
    checked = 0
    for c in ds.collections:
        det = c.detections.get("lidar_1")
        if det is None:
            continue
        T = gt.tree.chain_to("lidar_1").inverse() @ gt.pattern_poses[c.id]
        est = plane_pose(det.inside, ds.pattern)
        cosang = abs(est.rotation[:, 2] @ T.rotation[:, 2])
        assert np.arccos(min(cosang, 1.0)) < 1e-6
        checked += 1
    assert checked > 0


def test_initial_pattern_poses_match_ground_truth(small_noiseless):
    ds, gt = small_noiseless
    poses = initialize_pattern_poses(ds, gt.tree)
    assert set(poses) == set(gt.pattern_poses)
    for cid, T in poses.items():
        dt, dr = transform_error(T, gt.pattern_poses[cid])
        assert dt < 1e-6 and dr < 1e-6


# ----------------------------------------------------------------------------
# problem


def test_layout_and_pack_round_trip(small_noiseless, rng):
    ds, gt = small_noiseless
    prob = gt_problem(ds, gt)
    n_edges = len(ds.sensors) - 1
    assert prob.layout.size == 6 * (n_edges + len(gt.pattern_poses))
    x = prob.canonicalize(prob.x0 + rng.normal(0, 0.1, prob.layout.size))
    assert np.allclose(prob.pack(prob.unpack(x)), x, atol=1e-12)
    assert prob.layout.slice_of("pattern", min(gt.pattern_poses)).start == 6 * n_edges
    with pytest.raises(KeyError):
        prob.layout.slice_of("edge", "nowhere")


def test_jacobian_matches_central_difference(small_noiseless, rng):
    ds, gt = small_noiseless
    cids = sorted(gt.pattern_poses)[:3]
    prob = gt_problem(ds, gt, cids)
    assert {b.kind for b in prob.blocks} == {"rgb_reprojection", "range_orthogonal", "range_longitudinal"}
    assert {b.sensor.modality for b in prob.blocks} == {"rgb", "lidar3d", "depth"}
    excluded = 0
    for _ in range(5):
        x = prob.x0 + rng.normal(0, 0.01, prob.layout.size)
        worst, n = gradient_check(prob, x)
        assert worst < 1e-4
        excluded += n
    # the kink filter only ever drops a sliver of the rows
    assert excluded < 1e-3 * 5 * prob.n_residuals * prob.layout.size


def test_jacobian_respects_sparsity(small_noiseless, rng):
    ds, gt = small_noiseless
    prob = gt_problem(ds, gt, sorted(gt.pattern_poses)[:4])
    x = prob.x0 + rng.normal(0, 0.01, prob.layout.size)
    J = prob.jacobian(x)
    mask = prob.sparsity().toarray() > 0
    assert not np.any(J.toarray()[~mask])
    # board parameters only touch their own collection
    for cid in prob.collections:
        sl = prob.layout.slice_of("pattern", cid)
        rows = np.flatnonzero(mask[:, sl].any(axis=1))
        own = np.concatenate([np.arange(b.rows.start, b.rows.stop) for b in prob.blocks if b.collection == cid])
        assert np.array_equal(rows, own)


def test_prepare_tree_rejects_missing_optimized_edge(small_noiseless):
    ds, gt = small_noiseless
    tree = gt.tree.copy()
    depth = ds.sensor("depth_1")
    bad = [s for s in ds.sensors]
    bad[bad.index(depth)] = type(depth)(depth.id, depth.modality, depth.data_frame, ("world", "nowhere"), depth.intrinsics)
    broken = type(ds)(ds.pattern, tree, bad, ds.collections)
    with pytest.raises(TreeError, match="nowhere"):
        prepare_tree(broken, tree, ANCHOR)


# ----------------------------------------------------------------------------
# solver


def test_start_at_ground_truth(small_noiseless):
    ds, gt = small_noiseless
    res = calibrate(ds, gt.tree, CalibrationOptions(anchor=ANCHOR), pattern_poses=dict(gt.pattern_poses))
    assert res.iterations <= 2
    assert res.final_cost < 1e-12
    assert res.status == "converged"


@pytest.fixture(scope="module")
def perturbed_run(small_noiseless):
    ds, gt = small_noiseless
    init = synth.perturb_initial(gt, 0.1, 0.1, seed=3, sensors=ds.sensors, anchor=ANCHOR)
    return init, calibrate(ds, init, CalibrationOptions(anchor=ANCHOR))


def test_recovers_ground_truth_from_perturbation(small_noiseless, perturbed_run):
    ds, gt = small_noiseless
    init, res = perturbed_run
    sensors = {s.id: s for s in ds.sensors}
    assert res.status == "converged"
    dt, dr = relative_errors(gt, res.tree, sensors)
    assert dt < 1e-6 and dr < 1e-6
    # the anchor edge is returned bit for bit
    child = ds.sensor(ANCHOR).calibrated_edge[1]
    assert np.array_equal(res.tree.edge(child).transform.matrix(), init.edge(child).transform.matrix())


def test_accepted_costs_never_increase(perturbed_run):
    _, res = perturbed_run
    h = np.array(res.history)
    assert len(h) == len(set(h)) and np.all(np.diff(h) < 0)
    assert h[0] == res.initial_cost and h[-1] == res.final_cost


def test_calibration_is_deterministic(small_noiseless, perturbed_run):
    ds, _ = small_noiseless
    init, res = perturbed_run
    again = calibrate(ds, init, CalibrationOptions(anchor=ANCHOR))
    assert dumps(again.to_doc()) == dumps(res.to_doc())


def test_without_anchor_matches_up_to_gauge(small_noiseless):
    ds, gt = small_noiseless
    init = synth.perturb_initial(gt, 0.05, 0.05, seed=4, sensors=ds.sensors, anchor=None)
    res = calibrate(ds, init, CalibrationOptions(anchor=None))
    assert res.anchor is None
    dt, dr = relative_errors(gt, res.tree, {s.id: s for s in ds.sensors})
    assert dt < 1e-6 and dr < 1e-6


def test_weight_changes_do_not_move_noiseless_optimum(small_noiseless):
    ds, gt = small_noiseless
    init = synth.perturb_initial(gt, 0.05, 0.05, seed=5, sensors=ds.sensors, anchor=ANCHOR)
    trees = []
    for w in ({"rgb": 1.0, "range": 100.0}, {"rgb": 2.0, "range": 100.0}, {"rgb": 1.0, "range": 200.0},
              {"rgb": 0.5, "range": 100.0}, {"rgb": 1.0, "range": 50.0}):
        trees.append(calibrate(ds, init, CalibrationOptions(anchor=ANCHOR, weights=w)).tree)
    for t in trees[1:]:
        for s in ds.sensors:
            dt, dr = transform_error(t.chain_to(s.data_frame), trees[0].chain_to(s.data_frame))
            assert dt < 1e-6 and dr < 1e-6


@pytest.mark.slow
def test_repeated_small_perturbations(small_noiseless):
    ds, gt = small_noiseless
    sensors = {s.id: s for s in ds.sensors}
    for seed in range(10):
        init = synth.perturb_initial(gt, 0.05, 0.05, seed=100 + seed, sensors=ds.sensors, anchor=ANCHOR)
        res = calibrate(ds, init, CalibrationOptions(anchor=ANCHOR))
        dt, dr = relative_errors(gt, res.tree, sensors)
        assert dt < 1e-6 and dr < 1e-6, seed


def test_unknown_anchor_is_rejected(small_noiseless):
    ds, gt = small_noiseless
    with pytest.raises(CalibrationError, match="anchor"):
        calibrate(ds, gt.tree, CalibrationOptions(anchor="radar_9"))


def test_result_document_fields(perturbed_run):
    _, res = perturbed_run
    doc = res.to_doc()
    for key in ("tool", "status", "anchor", "iterations", "initial_cost", "final_cost", "cost_history", "rms", "tree"):
        assert key in doc
    assert doc["anchor"] == ANCHOR
    kinds = {e["kind"] for e in doc["tree"]["edges"]}
    assert kinds >= {"optimized", "pattern"}
    assert sum(e["kind"] == "pattern" for e in doc["tree"]["edges"]) == len(res.pattern_poses)
