import copy
import json

import numpy as np
import pytest

from sensorcal import synth
from sensorcal.dataset import (
    DatasetError,
    dataset_from_doc,
    dataset_stats,
    dataset_to_doc,
    load_dataset,
    min_corners,
    read_cloud,
    read_depth,
    save_dataset,
    write_cloud,
    write_depth,
)

I3 = [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]


def minimal_doc():
    return {
        "version": 1,
        "pattern": {"nx": 3, "ny": 3, "square": 0.1},
        "tree": {"root": "world", "edges": [
            {"parent": "world", "child": "cam", "kind": "optimized", "rotation": I3, "translation": [0, 0, 0]},
        ]},
        "sensors": [{
            "id": "cam", "modality": "rgb", "data_frame": "cam", "calibrated_edge": ["world", "cam"],
            "intrinsics": {"fx": 500, "fy": 500, "cx": 320, "cy": 240, "width": 640, "height": 480},
        }],
        "collections": [{"id": 0, "detections": {"cam": {"corners": [[0, 10, 10], [1, 20, 10], [2, 30, 10]]}}}],
    }


def test_minimal_dataset_loads_complete():
    d = dataset_from_doc(minimal_doc())
    assert len(d.collections) == 1
    assert d.is_complete(d.collections[0])
    det = d.collections[0].detections["cam"]
    assert det.partial and det.ids.tolist() == [0, 1, 2]


def test_tree_cycle_is_rejected_with_field_path():
    doc = minimal_doc()
    doc["tree"]["edges"] += [
        {"parent": "b", "child": "a", "rotation": I3, "translation": [0, 0, 0]},
        {"parent": "a", "child": "b", "rotation": I3, "translation": [0, 0, 0]},
    ]
    with pytest.raises(DatasetError, match="cycle") as exc:
        dataset_from_doc(doc)
    assert exc.value.path.startswith("tree")


@pytest.mark.parametrize("mutate, field, message", [
    (lambda d: d["sensors"][0].update(modality="thermal"), "sensors[0].modality", "unknown modality"),
    (lambda d: d["sensors"][0].update(calibrated_edge=["world", "elsewhere"]), "sensors[0].calibrated_edge", "not on"),
    (lambda d: d["collections"][0]["detections"]["cam"].update(corners=[[0, 1, 1], [1, 2, 2]]),
     "collections[0].detections.cam.corners", "25%"),
    (lambda d: d["collections"][0]["detections"]["cam"].update(corners=[[0, 1, 1], [0, 2, 2], [1, 3, 3]]),
     "collections[0].detections.cam.corners", "duplicate"),
    (lambda d: d["collections"].append(copy.deepcopy(d["collections"][0])), "collections[1].id", "duplicate"),
    (lambda d: d.update(version=99), "version", "unsupported"),
    (lambda d: d["sensors"][0].pop("intrinsics"), "sensors[0].intrinsics", "intrinsics"),
])
def test_validation_errors_name_the_field(mutate, field, message):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(DatasetError, match=message) as exc:
        dataset_from_doc(doc)
    assert exc.value.path == field


def test_collections_without_detections_are_dropped_and_counted():
    doc = minimal_doc()
    doc["collections"].append({"id": 5, "detections": {}})
    doc["collections"].append({"id": 6, "detections": {"cam": None}})
    d = dataset_from_doc(doc)
    assert [c.id for c in d.collections] == [0]
    assert d.meta["dropped_on_load"] == 2


def test_min_corners_is_quarter_rounded_up():
    from sensorcal.sensors import PatternSpec

    assert min_corners(PatternSpec(11, 8, 0.08)) == 22
    assert min_corners(PatternSpec(3, 3, 0.1)) == 3


def test_save_load_round_trip(tmp_path, small_noiseless):
    ds, _ = small_noiseless
    path = tmp_path / "d" / "dataset.json"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.sensor_ids == ds.sensor_ids
    assert back.pattern == ds.pattern
    assert [c.id for c in back.collections] == [c.id for c in ds.collections]
    for a, b in zip(ds.collections, back.collections):
        assert set(a.detections) == set(b.detections)
        for sid in a.detections:
            da, db = a.detections[sid], b.detections[sid]
            if hasattr(da, "ids"):
                assert np.array_equal(da.ids, db.ids) and da.partial == db.partial
                assert np.max(np.abs(da.uv - db.uv), initial=0) <= 1e-12
            else:
                assert np.max(np.abs(da.inside - db.inside)) <= 1e-12
                assert np.max(np.abs(da.boundary - db.boundary)) <= 1e-12
        for sid, rel in a.raw.items():
            raw = back.load_raw(b.id, sid)
            assert np.allclose(raw, ds.raw_cache[rel], rtol=1e-6, equal_nan=True)
    for e in ds.tree:
        f = back.tree.edge(e.child)
        assert (f.parent, f.kind) == (e.parent, e.kind)
        assert np.max(np.abs(f.transform.matrix() - e.transform.matrix())) <= 1e-12
    # the document itself is a fixed point
    assert json.dumps(dataset_to_doc(back), sort_keys=True) == json.dumps(
        {**dataset_to_doc(ds), "meta": back.meta}, sort_keys=True)


def test_sidecar_formats(tmp_path):
    cloud = np.array([[1.0, 2.0, 3.0, 0.0], [4.0, 5.0, 6.0, 7.0]])
    write_cloud(tmp_path / "c.bin", cloud)
    assert (tmp_path / "c.bin").stat().st_size == 32
    assert np.array_equal(read_cloud(tmp_path / "c.bin"), cloud)

    img = np.full((3, 5), np.nan)
    img[1, 2] = 1.5
    write_depth(tmp_path / "d.bin", img)
    raw = (tmp_path / "d.bin").read_bytes()
    assert len(raw) == 16 + 15 * 4
    assert np.frombuffer(raw[:8], "<u4").tolist() == [5, 3]
    assert raw[8:16] == bytes(8)
    back = read_depth(tmp_path / "d.bin")
    assert back[1, 2] == 1.5 and np.isnan(back).sum() == 14


def test_stats_match_generator_manifest(small_noiseless):
    ds, gt = small_noiseless
    stats = dataset_stats(ds).to_dict()
    for k in ("collections", "rgb_partials", "complete", "detections"):
        assert stats[k] == gt.manifest[k]


def test_stats_count_zero_for_blind_sensor():
    doc = minimal_doc()
    doc["sensors"].append({"id": "lidar", "modality": "lidar3d", "data_frame": "cam", "calibrated_edge": ["world", "cam"]})
    stats = dataset_stats(dataset_from_doc(doc))
    assert stats.detections == {"cam": 1, "lidar": 0}
    assert stats.complete == 0


@pytest.mark.slow
def test_real_shaped_counts():
    cfg = synth.default_scene("real_train", seed=0, noise=synth.NoiseModel.none())
    ds, gt = synth.generate(cfg, with_raw=False)
    s = dataset_stats(ds)
    assert (s.collections, s.rgb_partials, s.complete) == (29, 61, 6)
    assert "29" in s.table() and "61" in s.table()
