"""One-stage joint head detector / pose regressor.

Every prediction grid has shape ``[B, C_a, C_o, H/s, W/s]`` with ``C_o = 9``
channels in the order: objectness, box (x, y, w, h), class score, pose
(pitch, yaw, roll). All channels are raw (pre-sigmoid).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from .geometry import ANGLE_RANGES

log = logging.getLogger(__name__)

STRIDES = (8, 16, 32, 64)
NUM_OUTPUTS = 9
CH_OBJ, CH_BOX, CH_CLS, CH_POSE = 0, slice(1, 5), 5, slice(6, 9)
ANCHOR_RATIO_THRESHOLD = 4.0
CLASS_PRIOR = 0.995

DEFAULT_ANCHORS = (
    ((12, 12), (20, 20), (28, 28)),
    ((40, 40), (56, 56), (72, 72)),
    ((96, 96), (128, 128), (160, 160)),
    ((200, 200), (256, 256), (320, 320)),
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    """Per-stride anchor sizes in pixels, ``anchors[i]`` belongs to ``strides[i]``."""

    anchors: tuple = DEFAULT_ANCHORS
    strides: tuple = STRIDES

    def __post_init__(self):
        anchors = tuple(tuple((float(w), float(h)) for w, h in level) for level in self.anchors)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(anchors) != len(self.strides):
            raise ValueError("one anchor list per stride required")
        if len({len(level) for level in anchors}) != 1:
            raise ValueError("every stride needs the same number of anchors")
        for level in anchors:
            if any(w <= 0 or h <= 0 for w, h in level):
                raise ValueError("anchor sizes must be positive")
            areas = [w * h for w, h in level]
            if areas != sorted(areas):
                raise ValueError("anchors must be sorted ascending within a stride")

    @property
    def num_anchors(self) -> int:
        return len(self.anchors[0])

    def grid_units(self, level: int) -> np.ndarray:
        return np.asarray(self.anchors[level]) / self.strides[level]

    def to_dict(self) -> dict:
        return {"anchors": [[list(a) for a in level] for level in self.anchors], "strides": list(self.strides)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        return cls(tuple(tuple(tuple(a) for a in level) for level in d["anchors"]), tuple(d["strides"]))


def kmeans_anchors(wh: np.ndarray, num_anchors: int = 3, strides=STRIDES, seed: int = 0) -> AnchorConfig:
    """Cluster training box sizes into ``len(strides) * num_anchors`` anchors.

    Falls back to :data:`DEFAULT_ANCHORS` when there are too few boxes.
    """
    from scipy.cluster.vq import kmeans2

    k = num_anchors * len(strides)
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    wh = wh[(wh > 2).all(axis=1)]
    if len(np.unique(wh, axis=0)) < k:
        log.warning("only %d distinct boxes; using default anchors", len(wh))
        return AnchorConfig()
    # cluster in log space so small and large boxes weigh alike
    centers, _ = kmeans2(np.log(wh), k, minit="++", seed=np.random.default_rng(seed))
    centers = np.exp(centers)
    centers = centers[np.argsort(centers.prod(axis=1))]
    levels = tuple(tuple(tuple(np.round(c, 2)) for c in centers[i * num_anchors:(i + 1) * num_anchors])
                   for i in range(len(strides)))
    return AnchorConfig(levels, tuple(strides))


# ---------------------------------------------------------------- decoding

def decode_box(raw, anchor, stride: int, cell) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(b'x, b'y, b'w, b'h)`` -> (centre-format box in grid units, in pixels).

    Grid units are absolute grid coordinates (the cell offset is included).
    """
    r = expit(np.asarray(raw, dtype=np.float64))
    aw, ah = anchor
    grid = np.array([
        2.0 * r[..., 0] - 0.5 + cell[0],
        2.0 * r[..., 1] - 0.5 + cell[1],
        aw / stride * (2.0 * r[..., 2]) ** 2,
        ah / stride * (2.0 * r[..., 3]) ** 2,
    ])
    grid = np.moveaxis(grid, 0, -1)
    return grid, grid * stride


def decode_pose(raw) -> np.ndarray:
    """Raw ``(p'pitch, p'yaw, p'roll)`` -> degrees."""
    return (expit(np.asarray(raw, dtype=np.float64)) - 0.5) * ANGLE_RANGES


def encode_pose(pose) -> np.ndarray:
    """Degrees -> normalised targets in [0, 1]; inverse of :func:`decode_pose` after a logit."""
    p = np.asarray(pose, dtype=np.float64)
    if p.shape[-1] != 3 or not np.all(np.isfinite(p)):
        raise ValueError("pose must end in a (pitch, yaw, roll) axis of finite values")
    if (np.any(np.abs(p[..., 0]) > 90) or np.any(np.abs(p[..., 2]) > 90)
            or np.any(p[..., 1] <= -180) or np.any(p[..., 1] > 180)):
        raise ValueError(f"pose {p.tolist()} outside the Euler ranges")
    return p / ANGLE_RANGES + 0.5


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------- targets

@dataclass
class LevelTargets:
    """Positives of one stride as parallel arrays (one row per assignment)."""

    batch: np.ndarray       # (n,) image index within the batch
    anchor: np.ndarray      # (n,) anchor index
    gy: np.ndarray          # (n,) cell row
    gx: np.ndarray          # (n,) cell column
    box: np.ndarray         # (n, 4) target (x, y) relative to the cell, (w, h) in grid units
    anchor_wh: np.ndarray   # (n, 2) anchor size in grid units
    pose: np.ndarray        # (n, 3) normalised pose in [0, 1]
    gt_index: np.ndarray    # (n,) row of the source ground truth
    shape: tuple            # (C_a, H, W)

    def positive_mask(self, batch_size: int) -> np.ndarray:
        mask = np.zeros((batch_size,) + self.shape, dtype=bool)
        mask[self.batch, self.anchor, self.gy, self.gx] = True
        return mask


@dataclass
class TargetGrids:
    levels: list
    uncovered: list = field(default_factory=list)  # gt rows with no positive at any stride


def build_targets(gts: np.ndarray, anchors: AnchorConfig, grid_shapes, ratio_threshold: float = ANCHOR_RATIO_THRESHOLD,
                  neighbours: str = "two") -> TargetGrids:
    """Assign ground truths to anchor cells.

    Args:
        gts: (n, 8) rows of ``(batch, cx, cy, w, h, pitch, yaw, roll)`` with
            the box in pixels (centre format) and the pose in degrees.
        grid_shapes: ``(H_s, W_s)`` for every stride.
        neighbours: ``"two"`` adds the nearer horizontal and vertical neighbour
            of the centre cell (fraction <= 0.5 picks left/up); ``"four"``
            adds all four axis neighbours.
    """
    if neighbours not in ("two", "four"):
        raise ValueError("neighbours must be 'two' or 'four'")
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 8)
    pose_t = encode_pose(gts[:, 5:8]) if len(gts) else np.zeros((0, 3))
    covered = np.zeros(len(gts), dtype=bool)
    levels = []
    na = anchors.num_anchors
    for li, (stride, (gh, gw)) in enumerate(zip(anchors.strides, grid_shapes)):
        anc = anchors.grid_units(li)
        rows = []
        xy = gts[:, 1:3] / stride
        wh = gts[:, 3:5] / stride
        for a in range(na):
            r = wh / anc[a]
            ok = np.maximum(r, 1.0 / r).max(axis=1) < ratio_threshold
            for g in np.flatnonzero(ok):
                cx, cy = xy[g]
                ix, iy = int(math.floor(cx)), int(math.floor(cy))
                fx, fy = cx - ix, cy - iy
                cells = [(ix, iy)]
                if neighbours == "two":
                    cells.append((ix - 1, iy) if fx <= 0.5 else (ix + 1, iy))
                    cells.append((ix, iy - 1) if fy <= 0.5 else (ix, iy + 1))
                else:
                    cells += [(ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1)]
                for x, y in cells:
                    if 0 <= x < gw and 0 <= y < gh:
                        rows.append((int(gts[g, 0]), a, y, x, g))
        if rows:
            arr = np.array(rows, dtype=np.int64)
            b, a_idx, gy, gx, g = arr.T
            covered[g] = True
            box = np.stack([xy[g, 0] - gx, xy[g, 1] - gy, wh[g, 0], wh[g, 1]], axis=1)
            levels.append(LevelTargets(b, a_idx, gy, gx, box, anc[a_idx], pose_t[g], g, (na, gh, gw)))
        else:
            z = np.zeros(0, dtype=np.int64)
            levels.append(LevelTargets(z, z, z, z, np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 3)), z,
                                       (na, gh, gw)))
    return TargetGrids(levels, [int(i) for i in np.flatnonzero(~covered)])


# ---------------------------------------------------------------- network

class ConvBNAct(nn.Module):
    def __init__(self, c_in, c_out, k=1, s=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c, shortcut=True):
        super().__init__()
        self.cv1 = ConvBNAct(c, c, 1)
        self.cv2 = ConvBNAct(c, c, 3)
        self.add = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class CSPBlock(nn.Module):
    """Cross-stage partial block: half the channels go through bottlenecks."""

    def __init__(self, c_in, c_out, n=1, shortcut=True):
        super().__init__()
        c_ = c_out // 2
        self.cv1 = ConvBNAct(c_in, c_, 1)
        self.cv2 = ConvBNAct(c_in, c_, 1)
        self.m = nn.Sequential(*(Bottleneck(c_, shortcut) for _ in range(n)))
        self.cv3 = ConvBNAct(2 * c_, c_out, 1)

    def forward(self, x):
        return self.cv3(torch.cat([self.m(self.cv1(x)), self.cv2(x)], dim=1))


@dataclass(frozen=True)
class ModelConfig:
    width: float = 1.0
    depth: int = 1
    base_channels: tuple = (16, 32, 64, 96, 128, 160)

    def channels(self) -> list:
        return [max(8, int(round(c * self.width / 8)) * 8) for c in self.base_channels]


class HeadPoseNet(nn.Module):
    """CSP backbone with a top-down feature pyramid and four 1x1 prediction heads."""

    def __init__(self, anchors: AnchorConfig = AnchorConfig(), cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.anchors = anchors
        self.cfg = cfg
        c = cfg.channels()
        n = cfg.depth
        self.stem = ConvBNAct(3, c[0], 3, 2)
        self.stage2 = nn.Sequential(ConvBNAct(c[0], c[1], 3, 2), CSPBlock(c[1], c[1], n))
        self.stage3 = nn.Sequential(ConvBNAct(c[1], c[2], 3, 2), CSPBlock(c[2], c[2], n))
        self.stage4 = nn.Sequential(ConvBNAct(c[2], c[3], 3, 2), CSPBlock(c[3], c[3], n))
        self.stage5 = nn.Sequential(ConvBNAct(c[3], c[4], 3, 2), CSPBlock(c[4], c[4], n))
        self.stage6 = nn.Sequential(ConvBNAct(c[4], c[5], 3, 2), CSPBlock(c[5], c[5], n))
        self.lat6 = ConvBNAct(c[5], c[4], 1)
        self.fuse5 = CSPBlock(2 * c[4], c[4], n, shortcut=False)
        self.lat5 = ConvBNAct(c[4], c[3], 1)
        self.fuse4 = CSPBlock(2 * c[3], c[3], n, shortcut=False)
        self.lat4 = ConvBNAct(c[3], c[2], 1)
        self.fuse3 = CSPBlock(2 * c[2], c[2], n, shortcut=False)
        na = anchors.num_anchors
        self.heads = nn.ModuleList(nn.Conv2d(ch, na * NUM_OUTPUTS, 1) for ch in (c[2], c[3], c[4], c[5]))
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self._init_biases()

    def _init_biases(self):
        na = self.anchors.num_anchors
        for head, s in zip(self.heads, self.anchors.strides):
            b = head.bias.view(na, NUM_OUTPUTS).detach()
            b[:, CH_OBJ] = math.log(8 / (640 / s) ** 2)
            b[:, CH_CLS] = math.log(CLASS_PRIOR / (1 - CLASS_PRIOR))
            b[:, CH_POSE] = 0.0
            head.bias = nn.Parameter(b.reshape(-1).clone())

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input [B, 3, H, W], got {tuple(x.shape)}")
        if x.shape[2] % 64 or x.shape[3] % 64:
            raise ShapeError(f"input height and width must be multiples of 64, got {tuple(x.shape[2:])}")
        c3 = self.stage3(self.stage2(self.stem(x)))
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        c6 = self.stage6(c5)
        l6 = self.lat6(c6)
        p5 = self.fuse5(torch.cat([self.up(l6), c5], 1))
        l5 = self.lat5(p5)
        p4 = self.fuse4(torch.cat([self.up(l5), c4], 1))
        l4 = self.lat4(p4)
        p3 = self.fuse3(torch.cat([self.up(l4), c3], 1))
        feats = (p3, p4, p5, c6)
        out = []
        na = self.anchors.num_anchors
        for head, f in zip(self.heads, feats):
            y = head(f)
            out.append(y.view(y.shape[0], na, NUM_OUTPUTS, y.shape[2], y.shape[3]))
        return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
