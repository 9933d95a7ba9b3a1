import json
import os

import numpy as np
import pytest

from sceneseq.scene import (
    BundleError,
    ObjectProposal,
    load_scene,
    object_aabb,
    object_centroid,
    read_table,
    save_scene,
    validate_bundle,
    write_table,
)
from sceneseq.synth import SynthSpec, gen_scene

from conftest import make_scene


def _minimal_bundle(path, point_indices=(0,), points=((1.0, 2.0, 3.0),)):
    os.makedirs(path, exist_ok=True)
    write_table(os.path.join(path, "points.bin"), np.array(points))
    with open(os.path.join(path, "scene.json"), "w") as fh:
        json.dump({"scene_id": "tiny", "proposals": [{"index": 0, "point_indices": list(point_indices)}],
                   "views": []}, fh)
    return path


def test_minimal_bundle(tmp_path):
    scene = load_scene(_minimal_bundle(tmp_path / "b"))
    assert scene.scene_id == "tiny"
    assert scene.n_objects == 1
    assert scene.views == ()


def test_out_of_range_point_index(tmp_path):
    with pytest.raises(BundleError) as err:
        load_scene(_minimal_bundle(tmp_path / "b", point_indices=(0, 1)))
    assert "scene.json" in err.value.path
    assert err.value.field == "proposals[0].point_indices"


@pytest.mark.parametrize("indices", [(0, 0), (1, 0)])
def test_duplicate_or_descending_indices_rejected(tmp_path, indices):
    pts = ((0, 0, 0), (1, 1, 1))
    with pytest.raises(BundleError):
        load_scene(_minimal_bundle(tmp_path / "b", point_indices=indices, points=pts))
    with pytest.raises(ValueError):
        ObjectProposal(0, np.array(indices))


def test_missing_file_and_bad_magic(tmp_path):
    b = _minimal_bundle(tmp_path / "b")
    os.remove(b / "points.bin")
    with pytest.raises(BundleError, match="missing file"):
        load_scene(b)
    (b / "points.bin").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(BundleError) as err:
        load_scene(b)
    assert err.value.field == "header.magic"
    assert validate_bundle(b)


def test_table_roundtrip(tmp_path, rng):
    data = rng.normal(size=(7, 5)).astype(np.float32)
    write_table(tmp_path / "t.bin", data)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == b"CSPP"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 7, 5]
    np.testing.assert_array_equal(read_table(tmp_path / "t.bin"), data.astype(np.float64))


def test_synth_bundle_roundtrips_bit_identically(tmp_path):
    scene, _ = gen_scene(SynthSpec(seed=3))
    save_scene(scene, tmp_path / "b")
    again = load_scene(tmp_path / "b")
    assert again == scene
    assert load_scene(tmp_path / "b") == again
    assert validate_bundle(tmp_path / "b") == []


def test_scene_arrays_are_read_only(synth_scene):
    scene, _ = synth_scene
    with pytest.raises(ValueError):
        scene.points[0, 0] = 1.0


def test_centroid_examples():
    s = make_scene([(1, 2, 3), (0, 0, 0), (2, 0, 0)], [[0], [1, 2]])
    np.testing.assert_array_equal(object_centroid(s, 0), [1, 2, 3])
    np.testing.assert_array_equal(object_centroid(s, 1), [1, 0, 0])
    with pytest.raises(IndexError):
        object_centroid(s, 2)


def test_centroid_matches_summation_oracle(rng):
    pts = rng.normal(size=(150, 3))
    mask = sorted(rng.choice(150, 100, replace=False).tolist())
    s = make_scene(pts, [mask])
    total = [0.0, 0.0, 0.0]
    for i in mask:
        for k in range(3):
            total[k] += pts[i][k]
    np.testing.assert_allclose(object_centroid(s, 0), np.array(total) / 100, atol=1e-9)


def test_aabb_examples(rng):
    s = make_scene([(0, 0, 0), (1, 2, 3), (5, 5, 5)], [[0, 1], [2]])
    lo, hi = object_aabb(s, 0)
    assert lo.tolist() == [0, 0, 0] and hi.tolist() == [1, 2, 3]
    lo, hi = object_aabb(s, 1)
    assert lo.tolist() == hi.tolist() == [5, 5, 5]

    pts = rng.uniform(-3, 3, size=(60, 3))
    s = make_scene(pts, [list(range(0, 60, 2))])
    lo, hi = object_aabb(s, 0)
    for k in range(3):
        col = [pts[i][k] for i in range(0, 60, 2)]
        assert lo[k] == min(col) and hi[k] == max(col)


def test_aabb_contains_centroid(synth_scene):
    scene, _ = synth_scene
    for i in range(scene.n_objects):
        lo, hi = object_aabb(scene, i)
        c = object_centroid(scene, i)
        assert np.all(lo <= c) and np.all(c <= hi)
