"""Pure numpy versions of the compiled kernels, same signatures and results."""
import numpy as np


def rasterize_triangles(image, inv_depth, verts, depth, colors):
    h, w = image.shape[:2]
    written = 0
    for t in range(verts.shape[0]):
        (x0, y0), (x1, y1), (x2, y2) = verts[t]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        iz0, iz1, iz2 = 1.0 / depth[t]
        j0 = int(max(np.floor(min(x0, x1, x2) - 0.5), 0.0))
        j1 = int(min(np.ceil(max(x0, x1, x2) - 0.5), w - 1))
        i0 = int(max(np.floor(min(y0, y1, y2) - 0.5), 0.0))
        i1 = int(min(np.ceil(max(y0, y1, y2) - 0.5), h - 1))
        if j1 < j0 or i1 < i0:
            continue
        px = np.arange(j0, j1 + 1) + 0.5
        py = (np.arange(i0, i1 + 1) + 0.5)[:, None]
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = 1.0 - w0 - w1
        iz = w0 * iz0 + w1 * iz1 + w2 * iz2
        zb = inv_depth[i0:i1 + 1, j0:j1 + 1]
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (iz > zb)
        if hit.any():
            zb[hit] = iz[hit]
            image[i0:i1 + 1, j0:j1 + 1][hit] = colors[t]
            written += int(hit.sum())
    return written


def box_iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where((inter > 0) & (union > 0), inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def nms(boxes, scores, iou_threshold):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = box_iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)


def greedy_match(iou, threshold):
    iou = np.asarray(iou, dtype=np.float64)
    d, g = iou.shape
    out = np.full(d, -1, dtype=np.intp)
    taken = np.zeros(g, dtype=bool)
    floor = min(threshold, 1.0 - 1e-10)
    for i in range(d):
        cand = np.where(~taken & (iou[i] >= floor))[0]
        if cand.size == 0:
            continue
        vals = iou[i, cand]
        best = cand[np.flatnonzero(vals == vals.max())[-1]]
        taken[best] = True
        out[i] = best
    return out
