"""Acceptance criteria, one test each; the terminal summary prints PASS/FAIL per criterion.

The end-to-end and ablation criteria train two 60-epoch models on the 500-image
benchmark. Results are cached (see ``acceptance_runs.py``); a cold cache costs
roughly 80 minutes on one CPU core.

    python3 -m pytest tests/test_acceptance.py -v
"""
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

import acceptance_runs as runs
from test_geometry import scipy_matrix
from test_infer_eval import FIXTURE_DT, FIXTURE_GT, _coco_reference, _random_dets, det, nms_oracle
from test_labelgen import head_in_camera
from test_losses import TOY, W, _fd_check, _empty, _toy_pred, toy

from mphpe import cli
from mphpe.geometry import EulerPose, angular_abs_diff, euler_to_matrix, horn_align, matrix_to_euler, wrap_angles
from mphpe.infer_eval import PosePairs, average_precision, mae, nms
from mphpe.labelgen import build_labels, label_variance_study
from mphpe.losses import LossWeights, box_loss, compute_loss, obj_loss, pose_loss, pose_sq_error, pose_wrapped_loss
from mphpe.losses import total_loss
from mphpe.net import TargetGrids, decode_box, decode_pose, encode_pose, logit
from mphpe.synthgen import SceneSpec, sample_scene


def note(record_property, text):
    record_property("detail", text)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------- fast criteria

@pytest.mark.criterion("geometry suite")
def test_geometry_suite(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_horn = 0.0
    for k in range(1000):
        s = rng.uniform(0.2, 5.0)
        r = Rotation.random(random_state=k).as_matrix()
        t = rng.normal(0, 100, 3)
        src = rng.normal(size=(13, 3)) * 60
        got = horn_align(src, s * src @ r.T + t)
        worst_horn = max(worst_horn, abs(got.scale - s), np.abs(got.rotation - r).max(),
                         np.abs(got.translation - t).max())

    worst_euler = 0.0
    poses = np.column_stack([rng.uniform(-89, 89, 20000), rng.uniform(-179.9, 180, 20000), rng.uniform(-89, 89, 20000)])
    poses = poses[np.abs(np.abs(poses[:, 1]) - 90) > 1]
    for p in poses:
        m = euler_to_matrix(EulerPose(*p))
        worst_euler = max(worst_euler, np.abs(m - scipy_matrix(*p)).max())
        back = matrix_to_euler(m).as_array()
        worst_euler = max(worst_euler, float(np.max(angular_abs_diff(back, p))))

    a = np.arange(-1080, 1081, dtype=float)
    w = wrap_angles(a)
    wrap_ok = bool(np.all((w > -180) & (w <= 180)) and np.all(np.mod(w - a, 360) == 0))
    g = np.arange(-180, 181, dtype=float)
    x, y = np.meshgrid(g, g)
    d = angular_abs_diff(x, y)
    raw = np.abs(x - y) % 360
    diff_ok = bool(np.array_equal(d, angular_abs_diff(y, x)) and d.min() >= 0 and d.max() <= 180
                   and np.allclose(d, np.minimum(raw, 360 - raw), atol=1e-12)
                   and np.allclose(angular_abs_diff(x + 720, y - 360), d, atol=1e-9))
    elapsed = time.perf_counter() - t0
    note(record_property, f"horn {worst_horn:.1e}, euler {worst_euler:.1e}, {elapsed:.1f}s")
    assert worst_horn <= 1e-6
    assert worst_euler <= 1e-8
    assert wrap_ok and diff_ok
    assert elapsed < 30


@pytest.mark.criterion("label-pipeline inverse")
def test_label_pipeline_inverse(record_property):
    t0 = time.perf_counter()
    spec = SceneSpec(seed=5)
    cam = spec.camera()
    rng = np.random.default_rng(5)
    scenes, truth, heads = [], [], []
    while len(truth) < 500:
        lms = []
        for p in sample_scene(spec, rng, cam):
            if abs(p.pose.yaw) >= 89 or len(truth) + len(lms) >= 500:
                continue
            lm = head_in_camera(p.pose.as_array(), p.anchor, p.scale, cam)
            lms.append(lm)
            truth.append(p.pose.as_array())
            heads.append((lm, cam))
        if lms:
            i = len(scenes) + 1
            scenes.append({"image_id": i, "file_name": f"{i:06d}.png", "width": spec.image_size[0],
                           "height": spec.image_size[1], "camera": cam.to_dict(),
                           "heads": [{"head_id": k, "landmarks": h.tolist()} for k, h in enumerate(lms)]})
    ds = build_labels(scenes)
    got = np.array([a.pose for a in ds.annotations])
    worst = float(np.max(angular_abs_diff(got, np.array(truth)))) if len(got) == 500 else math.inf
    var = label_variance_study(heads).as_tuple()
    elapsed = time.perf_counter() - t0
    note(record_property, f"{len(got)} heads, worst {worst:.1e} deg, variance {var}, {elapsed:.1f}s")
    assert len(got) == 500
    assert worst < 1e-5
    assert var == (0.0, 0.0, 0.0, 0.0)
    assert elapsed < 60


@pytest.mark.criterion("decode/encode suite")
def test_decode_encode_suite(record_property):
    grid, px = decode_box(np.zeros(4), (32, 48), 8, (0, 0))
    np.testing.assert_allclose(grid, [0.5, 0.5, 4, 6], rtol=0, atol=1e-12)
    np.testing.assert_allclose(px, [4, 4, 32, 48], rtol=0, atol=1e-12)
    raw = (0.7, -1.1, 0.4, -0.3)
    grid, px = decode_box(np.array(raw), (40, 24), 16, (5, 2))
    want = [2 * sig(0.7) - 0.5 + 5, 2 * sig(-1.1) - 0.5 + 2,
            40 / 16 * (2 * sig(0.4)) ** 2, 24 / 16 * (2 * sig(-0.3)) ** 2]
    np.testing.assert_allclose(grid, want, rtol=1e-12)
    np.testing.assert_allclose(px, np.array(want) * 16, rtol=1e-12)
    np.testing.assert_allclose(decode_pose(np.zeros(3)), [0, 0, 0], atol=1e-12)
    assert decode_pose(logit(np.array([0.5, 0.75, 0.5])))[1] == pytest.approx(90, abs=1e-9)
    raw_pose = np.array([1.3, -0.6, 0.2])
    np.testing.assert_allclose(decode_pose(raw_pose),
                               [(sig(1.3) - 0.5) * 180, (sig(-0.6) - 0.5) * 360, (sig(0.2) - 0.5) * 180], rtol=1e-12)
    rng = np.random.default_rng(3)
    poses = np.column_stack([rng.uniform(-89.9, 89.9, 10000), rng.uniform(-179.9, 179.9, 10000),
                             rng.uniform(-89.9, 89.9, 10000)])
    worst = max(float(np.abs(decode_pose(logit(encode_pose(p))) - p).max()) for p in poses)
    note(record_property, f"encode/decode worst {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion("loss suite")
def test_loss_suite(record_property):
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        t = toy(TOY)
        p = _toy_pred()
        _fd_check(lambda g0: box_loss([g0] + p[1:], t), p[0], range(1, 5))
        _fd_check(lambda g0: obj_loss([g0] + p[1:], t, W), p[0], [0])
        _fd_check(lambda g0: pose_loss([g0] + p[1:], t, 0.4), p[0], range(6, 9))
        pw = _toy_pred()
        pw[0][0, 2, 7, 0, 1] = 2.5
        _fd_check(lambda g0: pose_wrapped_loss([g0] + pw[1:], t, 0.4), pw[0], range(6, 9))
        _fd_check(lambda g0: compute_loss([g0] + p[1:], t, W).total, p[0], [0, 6, 7, 8])

        zeros = [torch.zeros(1, 1, 9, 1, 1) for _ in range(4)]
        empty = TargetGrids([_empty((1, 1, 1)) for _ in range(4)])
        ln2 = float(obj_loss(zeros, empty, LossWeights(stride_weights=(1.0, 0.0, 0.0, 0.0))))
        total = float(total_loss(1.0, 1.0, 1.0, LossWeights(alpha=0.05, beta=0.7, gamma=0.1), 4))

        rng = np.random.default_rng(4)
        pred = torch.tensor(rng.uniform(0, 1, (10_000, 3)))
        target = torch.tensor(rng.uniform(0, 1, (10_000, 3)))
        pointwise = bool((pose_sq_error(pred, target, wrapped=True) <= pose_sq_error(pred, target)).all())
    finally:
        torch.set_default_dtype(old)
    note(record_property, f"ln2 err {abs(ln2 - math.log(2)):.1e}, total {total!r}")
    assert abs(ln2 - math.log(2)) <= 1e-9
    assert abs(total - 3.4) <= 1e-9
    assert pointwise


@pytest.mark.criterion("NMS/matching/AP oracles")
def test_nms_ap_baseline(record_property):
    pytest.importorskip("pycocotools")
    rng = np.random.default_rng(6)
    agree = 0
    for _ in range(200):
        dets = _random_dets(rng, int(rng.integers(0, 50)))
        agree += sorted(nms(dets, 0.3, 0.5), key=id) == sorted(nms_oracle(dets, 0.3, 0.5), key=id)
    stats = _coco_reference()
    gts = {k: np.array(v, dtype=float).reshape(-1, 4) for k, v in FIXTURE_GT.items()}
    dts = {k: [det(b, s) for b, s in v] for k, v in FIXTURE_DT.items()}
    ap = average_precision(dts, gts)
    ap_err = max(abs(ap["ap"] - stats[0]), abs(ap["ap50"] - stats[1]), abs(ap["ap75"] - stats[2]))
    r = np.random.default_rng(2024)
    pred, gt = np.zeros((10_000, 3)), np.zeros((10_000, 3))
    pred[:, 1] = r.uniform(-180, 180, 10_000)
    gt[:, 1] = r.uniform(-180, 180, 10_000)
    base = mae(PosePairs(pred, gt)).yaw
    note(record_property, f"nms {agree}/200, AP err {ap_err:.1e}, baseline yaw {base:.2f}")
    assert agree == 200
    assert ap_err <= 1e-4
    assert abs(base - 90) <= 2


@pytest.mark.criterion("determinism")
def test_determinism(tiny_bench, tmp_path, record_property):
    cfg = {"train": str(tiny_bench.train), "val": str(tiny_bench.val), "input_size": 128, "epochs": 2,
           "batch_size": 4, "model_width": 0.25, "warmup_epochs": 0.0}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    logs, weights = [], []
    for k in range(2):
        out = tmp_path / f"train{k}"
        assert cli.run(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--seed", "9"]) == 0
        logs.append((out / "metrics.jsonl").read_bytes())
        weights.append(torch.load(out / "last.pt", weights_only=False)["model"])
    synth = []
    for k in range(2):
        out = tmp_path / f"synth{k}"
        assert cli.run(["build-synth", "--train", "3", "--val", "2", "--seed", "4", "--out", str(out)]) == 0
        synth.append(json.loads((out / "manifest.json").read_text())["artifacts"])
    reports = []
    for k in range(2):
        out = tmp_path / f"pred{k}.json"
        assert cli.run(["predict", "--weights", str(tmp_path / "train0" / "last.pt"),
                        "--images", str(tiny_bench.root / "images" / "val"), "--gt", str(tiny_bench.val),
                        "--out", str(out)]) == 0
        rep = tmp_path / f"rep{k}.json"
        assert cli.run(["eval", "--pred", str(out), "--gt", str(tiny_bench.val), "--report", str(rep)]) == 0
        reports.append(rep.read_bytes())
    note(record_property, f"{len(logs[0].splitlines())} log rows compared byte for byte")
    assert logs[0] == logs[1]
    # checkpoint bytes embed the output path, so compare the tensors
    assert all(torch.equal(weights[0][k], weights[1][k]) for k in weights[0])
    assert synth[0] == synth[1]
    assert reports[0] == reports[1]


# ---------------------------------------------------------------- trained criteria

@pytest.fixture(scope="module")
def plain_run():
    name, over = runs.PLAIN
    return runs.trained(name, **over)


@pytest.fixture(scope="module")
def wrapped_run():
    name, over = runs.WRAPPED
    return runs.trained(name, **over)


@pytest.mark.slow
@pytest.mark.criterion("end-to-end toy reproduction")
def test_end_to_end(plain_run, record_property):
    assert not plain_run["diverged"], plain_run["error"]
    last = plain_run["metrics"][-1]
    note(record_property, f"epochs {last['epoch']}, P_M {last['p_m']:.3f}, AP50 {last['val_ap50']:.3f}, "
                          f"yaw MAE {last['val_mae_yaw']:.2f}, train {plain_run['wall_s'] / 60:.0f} min")
    assert last["epoch"] == runs.EPOCHS
    assert plain_run["wall_s"] < 2 * 3600
    assert last["p_m"] >= 0.85
    assert last["val_ap50"] >= 0.70
    assert last["val_mae_yaw"] <= 25


# bins (-120,-90], (-90,-60], (60,90], (90,120] against (-30,0], (0,30]
NEAR_GIMBAL = (2, 3, 8, 9)
NEAR_FRONT = (5, 6)


def _pooled(bins, idx, k):
    n = sum(bins["counts"][i] for i in idx if bins["mae"][i] is not None)
    return sum(bins["counts"][i] * bins["mae"][i][k] for i in idx if bins["mae"][i] is not None) / n


@pytest.mark.slow
@pytest.mark.criterion("ablation directions")
def test_ablation_directions(plain_run, wrapped_run, record_property):
    assert not plain_run["diverged"] and not wrapped_run["diverged"]
    plain = plain_run["report_full"]["mae"]["avg"]
    wrapped = wrapped_run["report_full"]["mae"]["avg"]
    bins = plain_run["report_full"]["yaw_bins"]
    ratios = [_pooled(bins, NEAR_GIMBAL, k) / _pooled(bins, NEAR_FRONT, k) for k in (0, 2)]
    note(record_property, f"MAE plain {plain:.2f} vs wrapped {wrapped:.2f}; "
                          f"pitch ratio {ratios[0]:.2f}, roll ratio {ratios[1]:.2f}")
    assert plain <= wrapped
    assert min(ratios) >= 1.5


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
