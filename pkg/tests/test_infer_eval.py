import contextlib
import io
import itertools
import math

import numpy as np
import pytest
import torch

from mphpe.datamodel import Annotation, DatasetFile, ImageRecord
from mphpe.infer_eval import (NO_MATCHES, ConfigError, Detection, EvalReport, Letterbox, PosePairs,
                              average_precision, decode_detections, evaluate, filter_range, letterbox_geometry,
                              mae, mae_by_yaw_bin, match, nms, yaw_bin_edges, yaw_bin_index)
from mphpe.net import AnchorConfig


def sig(x):
    return 1 / (1 + math.exp(-x))


def det(box, conf, pose=(0.0, 0.0, 0.0)):
    return Detection(tuple(float(v) for v in box), float(conf), tuple(float(v) for v in pose))


# ---------------------------------------------------------------- decoding

def _grids(fill=-30.0):
    return [torch.full((3, 9, n, n), fill) for n in (40, 20, 10, 5)]


def test_one_hot_cell_decodes_analytically():
    g = _grids()
    a, gy, gx = 1, 7, 12
    raw = torch.tensor([3.0, 0.2, -0.4, 0.1, 0.3, 4.0, 0.5, 1.0, -0.7])
    g[0][a, :, gy, gx] = raw
    anchors = AnchorConfig()
    dets = decode_detections(g, anchors, conf_floor=0.001)
    assert len(dets) == 1
    d = dets[0]
    aw, ah = anchors.anchors[0][a]
    cx = (2 * sig(0.2) - 0.5 + gx) * 8
    cy = (2 * sig(-0.4) - 0.5 + gy) * 8
    w = aw * (2 * sig(0.1)) ** 2
    h = ah * (2 * sig(0.3)) ** 2
    np.testing.assert_allclose(d.box, [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], rtol=1e-6)
    assert d.confidence == pytest.approx(sig(3.0) * sig(4.0), rel=1e-6)
    np.testing.assert_allclose(d.pose, [(sig(0.5) - 0.5) * 180, (sig(1.0) - 0.5) * 360, (sig(-0.7) - 0.5) * 180],
                               rtol=1e-6)


def test_all_negative_objectness_gives_nothing():
    assert decode_detections(_grids(-1e4), AnchorConfig()) == []


def test_identity_letterbox_scales_by_stride():
    g = _grids()
    g[2][0, :, 3, 4] = torch.tensor([5.0, 0, 0, 0, 0, 5.0, 0, 0, 0])
    (d,) = decode_detections(g, AnchorConfig(), Letterbox())
    aw = AnchorConfig().anchors[2][0][0]
    cx, cy = (0.5 + 4) * 32, (0.5 + 3) * 32
    np.testing.assert_allclose(d.box, [cx - aw / 2, cy - aw / 2, cx + aw / 2, cy + aw / 2], rtol=1e-6)


def test_letterbox_undo():
    lb = letterbox_geometry(640, 320, 320)
    assert lb.scale == 0.5 and lb.pad_x == 0 and lb.pad_y == 80
    np.testing.assert_allclose(lb.to_original(np.array([[10, 90, 20, 100]])), [[20, 20, 40, 40]])


def test_anchor_grid_mismatch():
    with pytest.raises(ConfigError):
        decode_detections(_grids()[:3], AnchorConfig())
    bad = _grids()
    bad[1] = torch.zeros(2, 9, 20, 20)
    with pytest.raises(ConfigError):
        decode_detections(bad, AnchorConfig())


# ---------------------------------------------------------------- NMS

def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms_oracle(dets, tau_conf, tau_iou):
    """Exhaustive suppression: repeatedly take the best remaining and drop all it overlaps."""
    remaining = [d for d in dets if d.confidence >= tau_conf]
    kept = []
    while remaining:
        best = max(remaining, key=lambda d: (d.confidence, tuple(-v for v in d.box)))
        kept.append(best)
        remaining = [d for d in remaining if d is not best and _iou(d.box, best.box) <= tau_iou]
    return kept


def _random_dets(rng, n):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 80, 2)
        w, h = rng.uniform(5, 40, 2)
        out.append(det((x, y, x + w, y + h), round(float(rng.uniform(0, 1)), 3), rng.uniform(-80, 80, 3)))
    return out


def test_nms_single_kept_unchanged():
    d = det((0, 0, 10, 10), 0.9, (1, 2, 3))
    assert nms([d]) == [d]


def test_nms_identical_boxes():
    a, b = det((0, 0, 10, 10), 0.9, (1, 1, 1)), det((0, 0, 10, 10), 0.8, (2, 2, 2))
    assert nms([b, a], 0.7, 0.65) == [a]


def test_nms_matches_exhaustive_oracle(rng, kernel_impl):
    for _ in range(200):
        dets = _random_dets(rng, int(rng.integers(0, 50)))
        got = nms(dets, 0.3, 0.5, impl=kernel_impl)
        want = nms_oracle(dets, 0.3, 0.5)
        assert sorted(got, key=id) == sorted(want, key=id)


def test_nms_order_invariant_subset_and_floor(rng):
    dets = _random_dets(rng, 60)
    base = nms(dets, 0.4, 0.5)
    for _ in range(5):
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert nms(shuffled, 0.4, 0.5) == base
    assert all(any(b is d for d in dets) for b in base)
    assert all(b.confidence >= 0.4 for b in base)


def test_nms_threshold_validation():
    with pytest.raises(ValueError):
        nms([], 0.0, 0.5)


# ---------------------------------------------------------------- matching

def test_match_identical():
    boxes = [(0, 0, 10, 10), (20, 20, 40, 40)]
    res = match([det(b, 0.9) for b in boxes], np.array(boxes))
    assert res.p_m == 1.0 and sorted(res.pairs) == [(0, 0), (1, 1)]


def test_match_no_dets():
    res = match([], np.array([(0, 0, 10, 10)]))
    assert res.p_m == 0.0 and res.pairs == []


def test_match_greedy_scripted_case():
    # A overlaps both ground truths, B only the second; greedy gives A the better one and B goes unmatched
    g1, g2 = (0, 0, 10, 10), (4, 0, 14, 10)
    a = det((3, 0, 13, 10), 0.9)    # IoU with g1 0.538, with g2 0.818
    b = det((6, 0, 16, 10), 0.8)    # IoU with g1 0.25, with g2 0.667
    res = match([a, b], np.array([g1, g2]))
    assert res.pairs == [(0, 1)]


def _optimal_count(iou, thr):
    nd, ng = iou.shape
    best = 0
    for perm in itertools.permutations(range(max(nd, ng)), nd):
        best = max(best, sum(1 for d, g in enumerate(perm) if g < ng and iou[d, g] >= thr))
    return best


def test_match_against_brute_force(rng):
    for _ in range(100):
        gts = [d.box for d in _random_dets(rng, 2)]
        boxes = [np.array(gts[int(rng.integers(2))]) + rng.normal(0, 3, 4) for _ in range(3)]
        dets = [det(b, rng.uniform(0, 1)) for b in boxes if b[2] > b[0] and b[3] > b[1]]
        res = match(dets, np.array(gts))
        iou = np.array([[_iou(d.box, g) for g in gts] for d in dets]).reshape(len(dets), 2)
        opt = _optimal_count(iou, 0.5) if len(dets) else 0
        assert res.n_hat <= opt
        unambiguous = np.all((iou >= 0.5).sum(axis=1) <= 1) and np.all((iou >= 0.5).sum(axis=0) <= 1)
        if unambiguous:
            assert res.n_hat == opt
        # each ground truth used once and every pair clears the threshold
        assert len({g for _, g in res.pairs}) == len(res.pairs)
        assert all(iou[d, g] >= 0.5 for d, g in res.pairs)


def test_p_m_monotone_in_confidence_threshold(rng):
    gts = [d.box for d in _random_dets(rng, 15)]
    boxes = [np.array(g) + rng.normal(0, 2, 4) for g in gts for _ in range(2)]
    dets = [det(b, rng.uniform(0, 1)) for b in boxes if b[2] > b[0] and b[3] > b[1]]
    pms = [match([d for d in dets if d.confidence >= t], np.array(gts)).p_m for t in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(pms, pms[1:]))


# ---------------------------------------------------------------- MAE and bins

def test_mae_examples():
    m = mae(PosePairs([[0, 179, 0]], [[0, -179, 0]]))
    assert m.yaw == pytest.approx(2) and m.pitch == 0 and m.roll == 0
    m = mae(PosePairs([[1, 2, 3]], [[1, 2, 3]]))
    assert (m.pitch, m.yaw, m.roll, m.avg) == (0, 0, 0, 0)


def test_mae_empty_marker():
    assert mae(PosePairs()) is NO_MATCHES
    assert not NO_MATCHES and repr(NO_MATCHES) == "NO_MATCHES"


def test_mae_random_against_direct_oracle(rng):
    pred = rng.uniform(-180, 180, (100, 3))
    gt = rng.uniform(-180, 180, (100, 3))
    m = mae(PosePairs(pred, gt))
    want = []
    for k in range(3):
        errs = []
        for p, g in zip(pred[:, k], gt[:, k]):
            d = abs(p - g) % 360
            errs.append(min(d, 360 - d))
        want.append(sum(errs) / len(errs))
    assert (m.pitch, m.yaw, m.roll) == pytest.approx(tuple(want), abs=1e-9)
    assert m.avg == pytest.approx(sum(want) / 3)


def test_mae_union_is_weighted_mean(rng):
    a = PosePairs(rng.uniform(-90, 90, (37, 3)), rng.uniform(-90, 90, (37, 3)))
    b = PosePairs(rng.uniform(-90, 90, (12, 3)), rng.uniform(-90, 90, (12, 3)))
    u = mae(PosePairs.concat([a, b]))
    ma, mb = mae(a), mae(b)
    assert u.yaw == pytest.approx((37 * ma.yaw + 12 * mb.yaw) / 49)


def test_random_yaw_baseline():
    r = np.random.default_rng(2024)
    n = 10_000
    pred = np.zeros((n, 3))
    gt = np.zeros((n, 3))
    pred[:, 1] = r.uniform(-180, 180, n)
    gt[:, 1] = r.uniform(-180, 180, n)
    assert abs(mae(PosePairs(pred, gt)).yaw - 90) <= 2


def test_yaw_bins_edges_and_boundaries():
    edges = yaw_bin_edges()
    assert len(edges) == 13 and edges[0] == -180 and edges[-1] == 180
    assert yaw_bin_index([0.0, 0.001, 30.0, 180.0, -179.99, -150.0]).tolist() == [5, 6, 6, 11, 0, 0]


def test_yaw_bins_all_zero():
    rep = mae_by_yaw_bin(PosePairs(np.zeros((5, 3)), np.zeros((5, 3))))
    assert rep.counts == [0] * 5 + [5] + [0] * 6
    assert [m is None for m in rep.mae] == [True] * 5 + [False] + [True] * 6


def test_yaw_bins_uniform_all_populated(rng):
    gt = np.stack([np.zeros(600), rng.uniform(-180, 180, 600), np.zeros(600)], axis=1)
    rep = mae_by_yaw_bin(PosePairs(gt + 1, gt))
    assert all(c > 0 for c in rep.counts) and sum(rep.counts) == 600


def test_filter_range():
    pairs = PosePairs(np.zeros((3, 3)), [[0, 89.9, 0], [0, 135, 0], [0, -90, 0]])
    assert len(filter_range(pairs, "narrow")) == 1 and len(filter_range(pairs, "full")) == 3
    with pytest.raises(ValueError):
        filter_range(pairs, "wide")


def test_filter_range_brute_force(rng):
    yaws = rng.uniform(-180, 180, 10)
    anns = [Annotation(i + 1, 1, (1, 1, 5, 5), (0, float(y), 0)) for i, y in enumerate(yaws)]
    got = filter_range(anns, "narrow")
    assert len(got) == sum(1 for y in yaws if -90 < y < 90)


# ---------------------------------------------------------------- AP

def test_ap_perfect_and_empty():
    gts = {1: np.array([[0, 0, 10, 10.0]]), 2: np.array([[5, 5, 30, 30.0]])}
    perfect = {k: [det(v[0], 1.0)] for k, v in gts.items()}
    assert average_precision(perfect, gts)["ap"] == pytest.approx(1.0)
    assert average_precision({}, gts)["ap"] == 0.0
    assert math.isnan(average_precision({}, {})["ap"])


FIXTURE_GT = {
    1: [(10, 10, 60, 70), (100, 40, 150, 100)],
    2: [(30, 30, 90, 80)],
    3: [(0, 0, 40, 40), (50, 50, 90, 90), (200, 200, 260, 250)],
    4: [],
    5: [(120, 10, 170, 60)],
}
FIXTURE_DT = {
    1: [((12, 8, 62, 72), 0.95), ((100, 45, 148, 104), 0.7), ((300, 300, 340, 340), 0.4)],
    2: [((28, 35, 92, 85), 0.88), ((30, 30, 90, 80), 0.6)],
    3: [((2, 0, 40, 44), 0.91), ((55, 50, 95, 92), 0.5), ((205, 190, 255, 260), 0.83)],
    4: [((10, 10, 30, 30), 0.77)],
    5: [((110, 15, 160, 55), 0.66), ((125, 12, 168, 58), 0.52)],
}


def _coco_reference():
    from pycocotools.coco import COCO
    from pycocotools.cocoeval import COCOeval

    images, anns, dets = [], [], []
    k = 1
    for img, boxes in FIXTURE_GT.items():
        images.append({"id": img, "width": 400, "height": 400})
        for x0, y0, x1, y1 in boxes:
            anns.append({"id": k, "image_id": img, "category_id": 1, "bbox": [x0, y0, x1 - x0, y1 - y0],
                         "area": (x1 - x0) * (y1 - y0), "iscrowd": 0})
            k += 1
    for img, rows in FIXTURE_DT.items():
        for (x0, y0, x1, y1), s in rows:
            dets.append({"image_id": img, "category_id": 1, "bbox": [x0, y0, x1 - x0, y1 - y0], "score": s})
    with contextlib.redirect_stdout(io.StringIO()):
        gt = COCO()
        gt.dataset = {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "head"}]}
        gt.createIndex()
        ev = COCOeval(gt, gt.loadRes(dets), "bbox")
        ev.evaluate()
        ev.accumulate()
        ev.summarize()
    return ev.stats


def test_ap_matches_reference_evaluator():
    pytest.importorskip("pycocotools")
    stats = _coco_reference()
    gts = {k: np.array(v, dtype=float).reshape(-1, 4) for k, v in FIXTURE_GT.items()}
    dts = {k: [det(b, s) for b, s in v] for k, v in FIXTURE_DT.items()}
    got = average_precision(dts, gts)
    assert got["ap"] == pytest.approx(stats[0], abs=1e-4)
    assert got["ap50"] == pytest.approx(stats[1], abs=1e-4)
    assert got["ap75"] == pytest.approx(stats[2], abs=1e-4)


# ---------------------------------------------------------------- evaluate

def _gt_ds():
    images = [ImageRecord(1, "a.png", 200, 200), ImageRecord(2, "b.png", 200, 200)]
    anns = [Annotation(1, 1, (10, 10, 40, 40), (5, 20, -5)), Annotation(2, 1, (100, 100, 50, 50), (0, 150, 0)),
            Annotation(3, 2, (20, 50, 60, 60), (-10, -100, 10))]
    return DatasetFile(images, anns, {})


def test_evaluate_self_is_perfect():
    gt = _gt_ds()
    pred = DatasetFile(gt.images, [Annotation(a.ann_id, a.image_id, a.bbox, a.pose, 0.99) for a in gt.annotations])
    rep = evaluate(pred, gt, "full")
    assert rep.p_m == 1.0 and rep.n == 3 and rep.ap == pytest.approx(1.0)
    assert rep.mae["avg"] == 0.0
    narrow = evaluate(pred, gt, "narrow")
    assert narrow.n == 1 and narrow.n_hat == 1 and narrow.ap == pytest.approx(1.0)


def test_evaluate_no_matches_reports_marker():
    gt = _gt_ds()
    pred = DatasetFile(gt.images, [Annotation(1, 1, (150, 0, 10, 10), (0, 0, 0), 0.9)])
    rep = evaluate(pred, gt)
    assert rep.mae is None and rep.p_m == 0.0 and "no matches" in rep.summary()


def test_evaluate_low_confidence_excluded_from_matching():
    gt = _gt_ds()
    pred = DatasetFile(gt.images, [Annotation(a.ann_id, a.image_id, a.bbox, a.pose, 0.5) for a in gt.annotations])
    rep = evaluate(pred, gt, tau_conf=0.7)
    assert rep.n_hat == 0 and rep.ap == pytest.approx(1.0)


def test_evaluate_unknown_image_rejected():
    gt = _gt_ds()
    pred = DatasetFile([ImageRecord(9, "z.png", 10, 10)], [Annotation(1, 9, (1, 1, 2, 2), (0, 0, 0), 0.9)])
    with pytest.raises(ValueError):
        evaluate(pred, gt)


def test_report_round_trip(tmp_path):
    gt = _gt_ds()
    pred = DatasetFile(gt.images, [Annotation(a.ann_id, a.image_id, a.bbox, a.pose, 0.9) for a in gt.annotations])
    rep = evaluate(pred, gt)
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == rep
