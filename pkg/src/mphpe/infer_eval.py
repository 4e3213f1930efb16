"""Post-processing of raw grids and the evaluation protocol.

Detections are decoded from the grids, filtered by confidence and NMS, then
scored against ground truth with greedy IoU matching (pose MAE, ``P_M``),
COCO-style AP and a per-yaw-bin breakdown.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import _kernels
from .datamodel import Annotation, DatasetFile
from .geometry import ANGLE_RANGES, EulerPose, angular_abs_diff
from .net import CH_BOX, CH_CLS, CH_OBJ, CH_POSE, NUM_OUTPUTS, AnchorConfig

TAU_CONF = 0.7
TAU_IOU = 0.65
MATCH_IOU = 0.5
CONF_FLOOR = 0.001
YAW_BIN_WIDTH = 30.0
COCO_IOUS = np.linspace(0.5, 0.95, 10)
COCO_RECALLS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
RANGE_MODES = ("narrow", "full")
# decoded angles are kept strictly inside the open Euler ranges
_ANGLE_MARGIN = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple          # (x0, y0, x1, y1) pixels
    confidence: float
    pose: tuple         # (pitch, yaw, roll) degrees

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"detection box {self.box} has no area")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def euler(self) -> EulerPose:
        return EulerPose(*self.pose)


@dataclass(frozen=True)
class Letterbox:
    """Maps original image pixels to network input pixels: ``u' = scale * u + pad``."""

    scale: float = 1.0
    pad_x: float = 0.0
    pad_y: float = 0.0
    width: int | None = None   # original size, used for clipping
    height: int | None = None

    def to_original(self, boxes: np.ndarray) -> np.ndarray:
        out = np.array(boxes, dtype=np.float64)
        out[..., [0, 2]] = (out[..., [0, 2]] - self.pad_x) / self.scale
        out[..., [1, 3]] = (out[..., [1, 3]] - self.pad_y) / self.scale
        if self.width is not None:
            out[..., [0, 2]] = out[..., [0, 2]].clip(0, self.width)
        if self.height is not None:
            out[..., [1, 3]] = out[..., [1, 3]].clip(0, self.height)
        return out


def letterbox_geometry(width: int, height: int, size: int) -> Letterbox:
    """Aspect-preserving resize into a ``size`` square with centred padding."""
    scale = min(size / width, size / height)
    nw, nh = round(width * scale), round(height * scale)
    return Letterbox(scale, (size - nw) / 2.0, (size - nh) / 2.0, width, height)


# ---------------------------------------------------------------- decoding

def decode_detections(grids, anchors: AnchorConfig, letterbox: Letterbox | None = None,
                      conf_floor: float = CONF_FLOOR) -> list:
    """Decode one image's grids (each ``[C_a, 9, H, W]``) into detections.

    Accepts a batch dimension of size 1 as well. Cells with confidence below
    ``conf_floor`` are dropped.
    """
    if len(grids) != len(anchors.strides):
        raise ConfigError(f"{len(grids)} grids for {len(anchors.strides)} strides")
    letterbox = letterbox or Letterbox()
    boxes, confs, poses = [], [], []
    for li, g in enumerate(grids):
        g = g.detach().cpu().numpy() if hasattr(g, "detach") else np.asarray(g)
        if g.ndim == 5:
            if g.shape[0] != 1:
                raise ConfigError("decode_detections takes one image at a time")
            g = g[0]
        if g.ndim != 4 or g.shape[0] != anchors.num_anchors or g.shape[1] != NUM_OUTPUTS:
            raise ConfigError(f"grid {li} shape {g.shape} does not match {anchors.num_anchors} anchors")
        g = g.astype(np.float64)
        conf = expit(g[:, CH_OBJ]) * expit(g[:, CH_CLS])
        a, gy, gx = np.nonzero(conf >= conf_floor)
        if len(a) == 0:
            continue
        stride = anchors.strides[li]
        anc = anchors.grid_units(li)[a]
        raw = g[a, :, gy, gx]
        s = expit(raw[:, CH_BOX])
        cx = (2.0 * s[:, 0] - 0.5 + gx) * stride
        cy = (2.0 * s[:, 1] - 0.5 + gy) * stride
        w = anc[:, 0] * (2.0 * s[:, 2]) ** 2 * stride
        h = anc[:, 1] * (2.0 * s[:, 3]) ** 2 * stride
        boxes.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1))
        confs.append(conf[a, gy, gx])
        poses.append((expit(raw[:, CH_POSE]) - 0.5) * ANGLE_RANGES)
    if not boxes:
        return []
    boxes = letterbox.to_original(np.concatenate(boxes))
    confs = np.concatenate(confs)
    poses = _clip_poses(np.concatenate(poses))
    keep = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return [Detection(tuple(map(float, b)), float(c), tuple(map(float, p)))
            for b, c, p in zip(boxes[keep], confs[keep], poses[keep])]


def _clip_poses(p: np.ndarray) -> np.ndarray:
    p = p.copy()
    lim = 90.0 - _ANGLE_MARGIN
    p[:, 0] = p[:, 0].clip(-lim, lim)
    p[:, 2] = p[:, 2].clip(-lim, lim)
    p[:, 1] = p[:, 1].clip(-180.0 + _ANGLE_MARGIN, 180.0)
    return p


def _ordered(dets) -> list:
    # confidence descending with a geometric tie-break, so the order never
    # depends on the caller's ordering
    return sorted(dets, key=lambda d: (-d.confidence, d.box, d.pose))


def nms(dets, tau_conf: float = TAU_CONF, tau_iou: float = TAU_IOU, impl=None) -> list:
    """Confidence filter then greedy suppression (IoU strictly above ``tau_iou``)."""
    if not (0.0 < tau_conf < 1.0 and 0.0 < tau_iou < 1.0):
        raise ValueError("thresholds must lie in (0, 1)")
    cand = _ordered(d for d in dets if d.confidence >= tau_conf)
    if not cand:
        return []
    boxes = np.array([d.box for d in cand])
    # scores are already sorted, pass ranks to make the kernel order explicit
    ranks = np.arange(len(cand), 0, -1, dtype=np.float64)
    keep = _kernels.nms(boxes, ranks, tau_iou, impl=impl)
    return [cand[i] for i in sorted(keep)]


# ---------------------------------------------------------------- matching

@dataclass
class PosePairs:
    """Matched (prediction, ground truth) poses, one row per matched head."""

    pred: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    gt: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64).reshape(-1, 3)
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 3)
        if len(self.pred) != len(self.gt):
            raise ValueError("pred and gt pose arrays differ in length")

    def __len__(self):
        return len(self.gt)

    def subset(self, mask) -> "PosePairs":
        return PosePairs(self.pred[mask], self.gt[mask])

    @staticmethod
    def concat(parts) -> "PosePairs":
        parts = list(parts)
        if not parts:
            return PosePairs()
        return PosePairs(np.concatenate([p.pred for p in parts]), np.concatenate([p.gt for p in parts]))


@dataclass
class MatchResult:
    pairs: list          # (det index, gt index) in the caller's det order
    n: int
    n_hat: int
    poses: PosePairs

    @property
    def p_m(self) -> float:
        return self.n_hat / self.n if self.n else 0.0


def match(dets, gt_boxes, gt_poses=None, iou_threshold: float = MATCH_IOU, impl=None) -> MatchResult:
    """Greedy one-to-one matching in descending confidence.

    ``gt_boxes`` are corner-format pixels. Each ground truth is used at most
    once; a detection takes the free ground truth of highest IoU at or above
    the threshold.
    """
    dets = list(dets)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(gt_boxes)
    if not dets or n == 0:
        return MatchResult([], n, 0, PosePairs())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].box, dets[i].pose))
    iou = _kernels.box_iou_matrix(np.array([dets[i].box for i in order]), gt_boxes, impl=impl)
    assigned = _kernels.greedy_match(iou, iou_threshold, impl=impl)
    pairs = [(order[r], int(g)) for r, g in enumerate(assigned) if g >= 0]
    poses = PosePairs()
    if gt_poses is not None and pairs:
        gt_poses = np.asarray(gt_poses, dtype=np.float64).reshape(-1, 3)
        poses = PosePairs([dets[d].pose for d, _ in pairs], gt_poses[[g for _, g in pairs]])
    return MatchResult(pairs, n, len(pairs), poses)


# ---------------------------------------------------------------- pose metrics

class _NoMatches:
    """Marker for an MAE over zero pairs (distinct from an error of zero)."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NO_MATCHES"

    def __bool__(self):
        return False


NO_MATCHES = _NoMatches()


@dataclass(frozen=True)
class PoseMAE:
    pitch: float
    yaw: float
    roll: float
    count: int

    @property
    def avg(self) -> float:
        return (self.pitch + self.yaw + self.roll) / 3.0

    def to_dict(self) -> dict:
        return {"pitch": self.pitch, "yaw": self.yaw, "roll": self.roll, "avg": self.avg, "count": self.count}


def mae(pairs: PosePairs):
    """Wrapped per-angle mean absolute error, or :data:`NO_MATCHES`."""
    if len(pairs) == 0:
        return NO_MATCHES
    err = angular_abs_diff(pairs.pred, pairs.gt).mean(axis=0)
    return PoseMAE(float(err[0]), float(err[1]), float(err[2]), len(pairs))


def yaw_bin_edges(width: float = YAW_BIN_WIDTH) -> np.ndarray:
    n = 360.0 / width
    if abs(n - round(n)) > 1e-9:
        raise ValueError("bin width must divide 360")
    return -180.0 + width * np.arange(int(round(n)) + 1)


def yaw_bin_index(yaw, width: float = YAW_BIN_WIDTH) -> np.ndarray:
    """Right-closed bins ``(-180 + w k, -180 + w (k+1)]`` keyed by yaw."""
    nb = len(yaw_bin_edges(width)) - 1
    k = np.ceil((np.asarray(yaw, dtype=np.float64) + 180.0) / width).astype(int) - 1
    return k.clip(0, nb - 1)


@dataclass
class YawBinReport:
    edges: list
    counts: list
    mae: list   # per bin [pitch, yaw, roll] or None when the bin is empty

    def to_dict(self) -> dict:
        return asdict(self)


def mae_by_yaw_bin(pairs: PosePairs, bin_width: float = YAW_BIN_WIDTH) -> YawBinReport:
    edges = yaw_bin_edges(bin_width)
    nb = len(edges) - 1
    idx = yaw_bin_index(pairs.gt[:, 1], bin_width) if len(pairs) else np.zeros(0, dtype=int)
    err = angular_abs_diff(pairs.pred, pairs.gt) if len(pairs) else np.zeros((0, 3))
    counts, out = [], []
    for k in range(nb):
        sel = idx == k
        counts.append(int(sel.sum()))
        out.append([float(v) for v in err[sel].mean(axis=0)] if sel.any() else None)
    return YawBinReport([float(e) for e in edges], counts, out)


def range_mask(gt_yaw, mode: str) -> np.ndarray:
    if mode not in RANGE_MODES:
        raise ValueError(f"range mode must be one of {RANGE_MODES}, got {mode!r}")
    yaw = np.asarray(gt_yaw, dtype=np.float64)
    if mode == "full":
        return np.ones(yaw.shape, dtype=bool)
    return np.abs(yaw) < 90.0


def filter_range(items, mode: str):
    """Keep ground truths (or pairs) by ground-truth yaw; narrow means ``|yaw| < 90``."""
    if isinstance(items, PosePairs):
        return items.subset(range_mask(items.gt[:, 1], mode))
    if isinstance(items, DatasetFile):
        anns = [a for a in items.annotations if range_mask(a.pose[1], mode)]
        return DatasetFile(list(items.images), anns, dict(items.meta))
    items = list(items)
    return [a for a in items if range_mask(a.pose[1], mode)]


# ---------------------------------------------------------------- AP

def _coco_match_image(dt_boxes, gt_boxes, gt_ignore, thr):
    """COCO per-image matching at one IoU threshold.

    Detections must be score-sorted; ignored ground truths are last. Returns
    (dt_matched, dt_ignored) boolean arrays.
    """
    nd = len(dt_boxes)
    dtm = np.zeros(nd, dtype=bool)
    dtig = np.zeros(nd, dtype=bool)
    if nd == 0 or len(gt_boxes) == 0:
        return dtm, dtig
    ious = _kernels.box_iou_matrix(dt_boxes, gt_boxes)
    gtm = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(nd):
        best_iou = min(thr, 1 - 1e-10)
        best = -1
        for g in range(len(gt_boxes)):
            if gtm[g]:
                continue
            if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            if ious[d, g] < best_iou:
                continue
            best_iou = ious[d, g]
            best = g
        if best == -1:
            continue
        dtig[d] = gt_ignore[best]
        dtm[d] = True
        gtm[best] = True
    return dtm, dtig


def average_precision(dets_by_image: dict, gts_by_image: dict, ignore_by_image: dict | None = None,
                      iou_thresholds=COCO_IOUS, max_dets: int = MAX_DETS) -> dict:
    """Single-category COCO AP with 101-point interpolated precision.

    Args:
        dets_by_image: image id -> list of :class:`Detection`.
        gts_by_image: image id -> (n, 4) corner boxes.
        ignore_by_image: optional image id -> (n,) bool, ground truths that
            neither count as misses nor turn matching detections into false
            positives.

    Returns ``{"ap": AP@[.5:.95], "ap50": AP@.5, "ap75": AP@.75}``; NaN
    when there are no (non-ignored) ground truths.
    """
    ignore_by_image = ignore_by_image or {}
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    image_ids = sorted(set(gts_by_image) | set(dets_by_image))
    scores, matched, ignored = [], [[] for _ in thresholds], [[] for _ in thresholds]
    n_pos = 0
    for img in image_ids:
        gt = np.asarray(gts_by_image.get(img, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
        ig = np.asarray(ignore_by_image.get(img, np.zeros(len(gt), dtype=bool)), dtype=bool)
        g_order = np.argsort(ig, kind="mergesort")
        gt, ig = gt[g_order], ig[g_order]
        n_pos += int((~ig).sum())
        dts = list(dets_by_image.get(img, []))
        d_order = np.argsort([-d.confidence for d in dts], kind="mergesort")[:max_dets]
        dts = [dts[i] for i in d_order]
        dt_boxes = np.array([d.box for d in dts], dtype=np.float64).reshape(-1, 4)
        scores.append(np.array([d.confidence for d in dts], dtype=np.float64))
        for t, thr in enumerate(thresholds):
            m, i = _coco_match_image(dt_boxes, gt, ig, thr)
            matched[t].append(m)
            ignored[t].append(i)
    nan = {"ap": float("nan"), "ap50": float("nan"), "ap75": float("nan")}
    if n_pos == 0:
        return nan
    scores = np.concatenate(scores) if scores else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    per_thr = []
    for t in range(len(thresholds)):
        m = np.concatenate(matched[t])[order]
        ig = np.concatenate(ignored[t])[order]
        tp = np.cumsum(m & ~ig).astype(np.float64)
        fp = np.cumsum(~m & ~ig).astype(np.float64)
        if len(tp) == 0:
            per_thr.append(0.0)
            continue
        rc = tp / n_pos
        pr = tp / (fp + tp + np.spacing(1))
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        inds = np.searchsorted(rc, COCO_RECALLS, side="left")
        q = np.where(inds < len(pr), pr[np.minimum(inds, len(pr) - 1)], 0.0)
        per_thr.append(float(q.mean()))
    per_thr = np.array(per_thr)
    out = {"ap": float(per_thr.mean())}
    for key, val in (("ap50", 0.5), ("ap75", 0.75)):
        hit = np.flatnonzero(np.isclose(thresholds, val))
        out[key] = float(per_thr[hit[0]]) if len(hit) else float("nan")
    return out


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    mode: str
    n: int
    n_hat: int
    p_m: float
    mae: dict | None        # pitch/yaw/roll/avg/count; None means no matches
    ap: float
    ap50: float
    ap75: float
    yaw_bins: dict
    tau_conf: float = TAU_CONF
    iou_threshold: float = MATCH_IOU

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(_json_safe(self.to_dict()), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def summary(self) -> str:
        m = self.mae
        mae_s = "no matches" if m is None else \
            f"MAE pitch {m['pitch']:.2f} yaw {m['yaw']:.2f} roll {m['roll']:.2f} avg {m['avg']:.2f}"
        return (f"[{self.mode}] {mae_s} | P_M {self.p_m:.3f} ({self.n_hat}/{self.n}) | "
                f"AP {self.ap:.3f} AP50 {self.ap50:.3f}")


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _corner(bbox) -> tuple:
    x, y, w, h = bbox
    return (x, y, x + w, y + h)


def annotation_to_detection(a: Annotation) -> Detection:
    return Detection(_corner(a.bbox), 1.0 if a.score is None else float(a.score), tuple(a.pose))


def evaluate(pred: DatasetFile, gt: DatasetFile, mode: str = "full", tau_conf: float = TAU_CONF,
             iou_threshold: float = MATCH_IOU, bin_width: float = YAW_BIN_WIDTH) -> EvalReport:
    """Score predictions against ground truth.

    Matching, ``P_M`` and pose errors use detections with confidence at or
    above ``tau_conf``; AP uses every detection. In narrow mode heads with
    ``|yaw| >= 90`` are ignored: they do not count toward ``n`` and
    detections landing on them are neither hits nor false positives.
    """
    if mode not in RANGE_MODES:
        raise ValueError(f"range mode must be one of {RANGE_MODES}, got {mode!r}")
    gt_images = gt.image_index()
    unknown = sorted({a.image_id for a in pred.annotations} - set(gt_images))
    if unknown:
        raise ValueError(f"predictions reference image ids absent from ground truth: {unknown[:5]}")
    gts = gt.annotations_by_image()
    dets = {img: [] for img in gt_images}
    for a in pred.annotations:
        dets[a.image_id].append(annotation_to_detection(a))
    parts, n, n_hat = [], 0, 0
    gt_boxes, ignore = {}, {}
    for img in sorted(gt_images):
        anns = gts.get(img, [])
        boxes = np.array([_corner(a.bbox) for a in anns], dtype=np.float64).reshape(-1, 4)
        poses = np.array([a.pose for a in anns], dtype=np.float64).reshape(-1, 3)
        keep = range_mask(poses[:, 1], mode)
        gt_boxes[img], ignore[img] = boxes, ~keep
        confident = [d for d in dets[img] if d.confidence >= tau_conf]
        res = match(confident, boxes, poses, iou_threshold)
        hit = np.array([g for _, g in res.pairs], dtype=int)
        kept_hits = keep[hit] if len(hit) else np.zeros(0, dtype=bool)
        n += int(keep.sum())
        n_hat += int(kept_hits.sum())
        if len(res.poses):
            parts.append(res.poses.subset(kept_hits))
    pairs = PosePairs.concat(parts)
    m = mae(pairs)
    ap = average_precision(dets, gt_boxes, ignore)
    return EvalReport(
        mode=mode, n=n, n_hat=n_hat, p_m=n_hat / n if n else 0.0,
        mae=None if m is NO_MATCHES else m.to_dict(),
        ap=ap["ap"], ap50=ap["ap50"], ap75=ap["ap75"],
        yaw_bins=mae_by_yaw_bin(pairs, bin_width).to_dict(),
        tau_conf=tau_conf, iou_threshold=iou_threshold,
    )
