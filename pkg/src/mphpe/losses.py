"""Box, objectness and pose losses for the grid predictions.

Total loss: ``N_bs * (alpha * L_box + beta * L_obj + gamma * L_pose)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .net import CH_OBJ, CH_POSE, STRIDES, TargetGrids

EPS = 1e-12


class TrainingDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.05  # box
    beta: float = 0.7    # objectness
    gamma: float = 0.1   # pose
    tau: float = 0.4     # objectness gate for the pose term
    stride_weights: tuple = (4.0, 1.0, 0.4, 0.1)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or min(self.stride_weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        object.__setattr__(self, "stride_weights", tuple(float(w) for w in self.stride_weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stride_weights"] = list(self.stride_weights)
        return d


def ciou(a: torch.Tensor, b: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Complete IoU of centre-format boxes ``(..., 4)``: IoU - rho^2/c^2 - alpha*v."""
    ax0, ax1 = a[..., 0] - a[..., 2] / 2, a[..., 0] + a[..., 2] / 2
    ay0, ay1 = a[..., 1] - a[..., 3] / 2, a[..., 1] + a[..., 3] / 2
    bx0, bx1 = b[..., 0] - b[..., 2] / 2, b[..., 0] + b[..., 2] / 2
    by0, by1 = b[..., 1] - b[..., 3] / 2, b[..., 1] + b[..., 3] / 2
    inter = (torch.min(ax1, bx1) - torch.max(ax0, bx0)).clamp(min=0) * \
        (torch.min(ay1, by1) - torch.max(ay0, by0)).clamp(min=0)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter + eps
    iou = inter / union
    cw = torch.max(ax1, bx1) - torch.min(ax0, bx0)
    ch = torch.max(ay1, by1) - torch.min(ay0, by0)
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = (a[..., 0] - b[..., 0]) ** 2 + (a[..., 1] - b[..., 1]) ** 2
    v = (4 / math.pi ** 2) * (torch.atan(b[..., 2] / (b[..., 3] + eps)) - torch.atan(a[..., 2] / (a[..., 3] + eps))) ** 2
    # alpha keeps its gradient so the loss is the exact derivative of its value
    denom = v - iou + (1 + eps)
    alpha = torch.where(v > 0, v / denom.clamp(min=1e-12), torch.zeros_like(v))
    return iou - (rho2 / c2 + alpha * v)


def ciou_boxes(a, b) -> float:
    """CIoU of two plain ``(cx, cy, w, h)`` boxes; rejects degenerate ones."""
    ta = torch.as_tensor(a, dtype=torch.float64)
    tb = torch.as_tensor(b, dtype=torch.float64)
    if ta.shape != (4,) or tb.shape != (4,):
        raise ValueError("boxes must be 4-vectors (cx, cy, w, h)")
    if ta[2] <= 0 or ta[3] <= 0 or tb[2] <= 0 or tb[3] <= 0:
        raise ValueError("box width and height must be positive")
    return float(ciou(ta, tb, eps=0.0))


def _positives(pred: torch.Tensor, lvl):
    idx = [torch.as_tensor(v, dtype=torch.long) for v in (lvl.batch, lvl.anchor, lvl.gy, lvl.gx)]
    # pred: [B, A, C, H, W] -> rows [n, C]
    return pred[idx[0], idx[1], :, idx[2], idx[3]], idx


def decoded_boxes(p: torch.Tensor, anchor_wh: torch.Tensor) -> torch.Tensor:
    s = torch.sigmoid(p[:, 1:5])
    xy = 2.0 * s[:, :2] - 0.5
    wh = (2.0 * s[:, 2:]) ** 2 * anchor_wh
    return torch.cat([xy, wh], dim=1)


def pose_sq_error(pred_norm: torch.Tensor, target: torch.Tensor, wrapped: bool = False) -> torch.Tensor:
    """Per-row squared L2 error between normalised poses, shape (n,).

    ``wrapped`` measures the yaw component along the shorter way round the
    circle, ``min(|d|, 1 - |d|)``.
    """
    d = (pred_norm - target).abs()
    if wrapped:
        yaw = torch.minimum(d[:, 1], 1.0 - d[:, 1])
        d = torch.stack([d[:, 0], yaw, d[:, 2]], dim=1)
    return (d ** 2).sum(dim=1)


@dataclass
class LossParts:
    box: torch.Tensor
    obj: torch.Tensor
    pose: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"l_box": float(self.box.detach()), "l_obj": float(self.obj.detach()), "l_pose": float(self.pose.detach()),
                "loss": float(self.total.detach())}


def box_loss(preds, targets: TargetGrids) -> torch.Tensor:
    total = preds[0].new_zeros(())
    for pred, lvl in zip(preds, targets.levels):
        if len(lvl.batch) == 0:
            continue
        p, _ = _positives(pred, lvl)
        pbox = decoded_boxes(p, torch.as_tensor(lvl.anchor_wh, dtype=p.dtype))
        total = total + (1.0 - ciou(pbox, torch.as_tensor(lvl.box, dtype=p.dtype))).mean()
    return total


def obj_loss(preds, targets: TargetGrids, weights: LossWeights) -> torch.Tensor:
    total = preds[0].new_zeros(())
    for pred, lvl, w_s in zip(preds, targets.levels, weights.stride_weights):
        tobj = torch.zeros_like(pred[:, :, CH_OBJ])
        if len(lvl.batch):
            p, idx = _positives(pred, lvl)
            with torch.no_grad():
                pbox = decoded_boxes(p, torch.as_tensor(lvl.anchor_wh, dtype=p.dtype))
                score = ciou(pbox, torch.as_tensor(lvl.box, dtype=p.dtype)).clamp(0.0, 1.0)
            tobj[idx[0], idx[1], idx[2], idx[3]] = score.to(tobj.dtype)
        total = total + w_s * F.binary_cross_entropy_with_logits(pred[:, :, CH_OBJ], tobj)
    return total


def pose_loss(preds, targets: TargetGrids, tau: float, wrapped: bool = False) -> torch.Tensor:
    """Gated pose error, summed over strides, each averaged over its positives.

    Cells whose objectness ``sigmoid(o') <= tau`` contribute zero; the gate
    carries no gradient.
    """
    total = preds[0].new_zeros(())
    for pred, lvl in zip(preds, targets.levels):
        n = len(lvl.batch)
        if n == 0:
            continue
        p, _ = _positives(pred, lvl)
        gate = (torch.sigmoid(p[:, CH_OBJ]) > tau).detach()
        if not gate.any():
            continue
        err = pose_sq_error(torch.sigmoid(p[gate][:, CH_POSE]),
                            torch.as_tensor(lvl.pose, dtype=p.dtype)[gate], wrapped)
        total = total + err.sum() / n
    return total


def pose_wrapped_loss(preds, targets: TargetGrids, tau: float) -> torch.Tensor:
    return pose_loss(preds, targets, tau, wrapped=True)


def total_loss(box, obj, pose, weights: LossWeights, batch_size: int):
    """``N_bs * (alpha*box + beta*obj + gamma*pose)``; rejects non-finite parts."""
    for name, v in (("box", box), ("obj", obj), ("pose", pose)):
        f = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(f):
            raise TrainingDivergenceError(f"{name} loss is not finite ({f})")
    return batch_size * (weights.alpha * box + weights.beta * obj + weights.gamma * pose)


def compute_loss(preds, targets: TargetGrids, weights: LossWeights, wrapped: bool = False) -> LossParts:
    if len(preds) != len(weights.stride_weights):
        raise ValueError(f"{len(preds)} grids but {len(weights.stride_weights)} stride weights")
    lb = box_loss(preds, targets)
    lo = obj_loss(preds, targets, weights)
    lp = pose_loss(preds, targets, weights.tau, wrapped)
    return LossParts(lb, lo, lp, total_loss(lb, lo, lp, weights, preds[0].shape[0]))


assert len(LossWeights().stride_weights) == len(STRIDES)
