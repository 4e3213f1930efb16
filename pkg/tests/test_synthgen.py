import json

import numpy as np
import pytest

from mphpe import _kernels, datamodel
from mphpe.geometry import EulerPose, angular_abs_diff
from mphpe.labelgen import build_labels
from mphpe.synthgen import (SECTOR_COLORS, TEXTURE_DIM, HeadPlacement, PlacementError, SceneSpec,
                            generate_benchmark, head_mesh, render_scene, sample_scene)


def _rng(seed=0):
    return np.random.default_rng(seed)


def _colour_mask(img, name):
    base = np.array(SECTOR_COLORS[name], dtype=float)
    m = np.zeros(img.shape[:2], dtype=bool)
    for c in (base, np.round(base * TEXTURE_DIM)):
        m |= np.all(np.abs(img.astype(float) - c) <= 1, axis=-1)
    return m


def test_exactly_one_head():
    spec = SceneSpec(heads_per_image=(1, 1))
    for s in range(20):
        assert len(sample_scene(spec, _rng(s))) == 1


def test_same_seed_same_scene():
    spec = SceneSpec()
    a, b = sample_scene(spec, _rng(4)), sample_scene(spec, _rng(4))
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert p.pose == q.pose and p.scale == q.scale
        np.testing.assert_array_equal(p.anchor, q.anchor)


def test_yaw_histogram_uniform():
    spec = SceneSpec()
    rng = _rng(11)
    yaws = [p.pose.yaw for _ in range(1000) for p in sample_scene(spec, rng)]
    counts, _ = np.histogram(yaws, bins=np.linspace(-180, 180, 13))
    expected = len(yaws) / 12
    assert np.all(np.abs(counts - expected) <= 0.2 * expected)


def test_pitch_roll_within_limits():
    spec = SceneSpec(pitch_limit=30, roll_limit=20)
    for s in range(50):
        for p in sample_scene(spec, _rng(s)):
            assert abs(p.pose.pitch) < 30 and abs(p.pose.roll) < 20


def test_overlap_bound_respected():
    spec = SceneSpec(heads_per_image=(3, 3), max_overlap_iou=0.1)
    cam = spec.camera()
    from mphpe.synthgen import _placement_box
    from mphpe.labelgen import ReferenceHead

    ref = ReferenceHead()
    for s in range(20):
        boxes = []
        for p in sample_scene(spec, _rng(s)):
            bx, by, bw, bh = _placement_box(p, cam, spec, ref)
            boxes.append([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2])
        iou = _kernels.box_iou_matrix(np.array(boxes), np.array(boxes))
        np.fill_diagonal(iou, 0)
        assert iou.max() <= 0.1 + 1e-12


def test_placement_error_when_impossible():
    spec = SceneSpec(heads_per_image=(3, 3), max_overlap_iou=0.0, max_retries=1, depth_range=(200, 201))
    with pytest.raises(PlacementError):
        for s in range(30):
            sample_scene(spec, _rng(s))


def test_frontal_head_label():
    spec = SceneSpec()
    cam = spec.camera()
    img, labels = render_scene([HeadPlacement(EulerPose(0, 0, 0), 1.0, np.array([0, 0, 1000.0]))], cam, spec, _rng())
    assert img.shape == (320, 320, 3) and img.dtype == np.uint8
    (lab,) = labels
    np.testing.assert_allclose(lab.pose.as_array(), 0, atol=1e-6)
    assert abs(lab.box[0] - 160) < 1 and abs(lab.box[1] - 160) < 1
    counts = {name: _colour_mask(img, name).sum() for name in SECTOR_COLORS}
    assert max(counts, key=counts.get) == "front" and counts["back"] == 0


def test_back_of_head_dominates_at_yaw_180():
    spec = SceneSpec()
    img, (lab,) = render_scene([HeadPlacement(EulerPose(0, 180, 0), 1.0, np.array([0, 0, 1000.0]))],
                               spec.camera(), spec, _rng())
    x0, y0, w, h = (int(round(v)) for v in lab.corner_box())
    region = img[y0:y0 + h, x0:x0 + w]
    counts = {name: _colour_mask(region, name).sum() for name in SECTOR_COLORS}
    assert max(counts, key=counts.get) == "back"
    assert counts["front"] == 0


def test_nearer_head_overwrites_farther():
    spec = SceneSpec()
    cam = spec.camera()
    near = HeadPlacement(EulerPose(0, 0, 0), 1.0, np.array([0, 0, 900.0]))
    far = HeadPlacement(EulerPose(0, 180, 0), 1.0, np.array([30, 0, 1300.0]))
    both, _ = render_scene([far, near], cam, spec, _rng(1))
    alone, _ = render_scene([near], cam, spec, _rng(1))
    head_px = np.any(alone != render_scene([], cam, spec, _rng(1))[0], axis=-1)
    np.testing.assert_array_equal(both[head_px], alone[head_px])


def test_render_backends_identical():
    spec = SceneSpec()
    scene = sample_scene(spec, _rng(5))
    imgs = [render_scene(scene, spec.camera(), spec, _rng(6), impl=m)[0]
            for m in _kernels.available_backends().values()]
    for im in imgs[1:]:
        np.testing.assert_array_equal(im, imgs[0])


def test_mesh_is_closed_and_contains_landmarks():
    from mphpe.labelgen import ReferenceHead

    verts, faces, colors = head_mesh()
    edges = {}
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[(min(a, b), max(a, b))] = edges.get((min(a, b), max(a, b)), 0) + 1
    assert set(edges.values()) == {2}
    ref = ReferenceHead()
    # every vertex must sit inside the labelling sphere so boxes cover the drawn head
    assert np.linalg.norm(verts - ref.centroid, axis=1).max() < ref.diameter


def test_label_path_matches_sampler():
    spec = SceneSpec()
    cam = spec.camera()
    worst = 0.0
    for s in range(100):
        rng = _rng(s)
        scene = sample_scene(spec, rng, cam)
        _, labels = render_scene(scene, cam, spec, rng)
        for p, lab in zip(scene, labels):
            if abs(abs(p.pose.yaw) - 90) < 1:
                continue
            worst = max(worst, float(np.max(angular_abs_diff(lab.pose.as_array(), p.pose.as_array()))))
    assert worst < 1e-5


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return generate_benchmark(SceneSpec(seed=21), (4, 50), tmp_path_factory.mktemp("b1"))


def test_benchmark_files(bench):
    assert len(list((bench.root / "images" / "train").glob("*.png"))) == 4
    assert len(list((bench.root / "images" / "val").glob("*.png"))) == 50
    for p in (bench.train, bench.val):
        ds = datamodel.load(p)
        assert ds.annotations


def test_benchmark_deterministic(bench, tmp_path):
    again = generate_benchmark(SceneSpec(seed=21), (4, 50), tmp_path)
    for name in ("train.json", "val.json", "train_scene.json", "images/val/000007.png"):
        assert (bench.root / name).read_bytes() == (again.root / name).read_bytes()


def test_benchmark_splits_disjoint(bench):
    a = (bench.root / "images/train/000001.png").read_bytes()
    b = (bench.root / "images/val/000001.png").read_bytes()
    assert a != b


def test_labels_recomputable_from_scene(bench):
    stored = datamodel.load(bench.val)
    rebuilt = build_labels(json.loads(bench.scene_files["val"].read_text()))
    assert datamodel.dumps(rebuilt.canonical().to_json_obj()["annotations"]) == \
        datamodel.dumps(stored.canonical().to_json_obj()["annotations"])


def test_val_yaw_coverage(bench):
    yaws = [a.pose[1] for a in datamodel.load(bench.val).annotations]
    counts, _ = np.histogram(yaws, bins=np.linspace(-180, 180, 9))
    assert np.all(counts > 0)


def test_counts_validated(tmp_path):
    with pytest.raises(ValueError):
        generate_benchmark(SceneSpec(), (0, 1), tmp_path)


def test_spec_rejects_unknown_keys():
    with pytest.raises(ValueError):
        SceneSpec.from_dict({"rotation_aug": 1})
    assert SceneSpec.from_dict(SceneSpec(seed=9).to_dict()) == SceneSpec(seed=9)
