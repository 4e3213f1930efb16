# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: triangle rasterisation, box IoU, greedy NMS, greedy matching."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, fmax, fmin

cnp.import_array()


def rasterize_triangles(unsigned char[:, :, ::1] image,
                        double[:, ::1] inv_depth,
                        double[:, :, ::1] verts,
                        double[:, ::1] depth,
                        unsigned char[:, ::1] colors):
    """Fill triangles into ``image`` with a 1/z buffer, in place.

    verts: (T, 3, 2) pixel coordinates; depth: (T, 3) camera z (> 0);
    colors: (T, 3). Pixel (i, j) is sampled at (j + 0.5, i + 0.5).
    Returns the number of pixels written.
    """
    cdef Py_ssize_t h = image.shape[0], w = image.shape[1]
    cdef Py_ssize_t t, i, j, i0, i1, j0, j1
    cdef double x0, y0, x1, y1, x2, y2, area, px, py, w0, w1, w2, iz
    cdef double iz0, iz1, iz2
    cdef long written = 0
    for t in range(verts.shape[0]):
        x0 = verts[t, 0, 0]; y0 = verts[t, 0, 1]
        x1 = verts[t, 1, 0]; y1 = verts[t, 1, 1]
        x2 = verts[t, 2, 0]; y2 = verts[t, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        iz0 = 1.0 / depth[t, 0]; iz1 = 1.0 / depth[t, 1]; iz2 = 1.0 / depth[t, 2]
        j0 = <Py_ssize_t>fmax(floor(fmin(x0, fmin(x1, x2)) - 0.5), 0.0)
        j1 = <Py_ssize_t>fmin(ceil(fmax(x0, fmax(x1, x2)) - 0.5), <double>(w - 1))
        i0 = <Py_ssize_t>fmax(floor(fmin(y0, fmin(y1, y2)) - 0.5), 0.0)
        i1 = <Py_ssize_t>fmin(ceil(fmax(y0, fmax(y1, y2)) - 0.5), <double>(h - 1))
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                if iz > inv_depth[i, j]:
                    inv_depth[i, j] = iz
                    image[i, j, 0] = colors[t, 0]
                    image[i, j, 1] = colors[t, 1]
                    image[i, j, 2] = colors[t, 2]
                    written += 1
    return written


def box_iou_matrix(double[:, ::1] a, double[:, ::1] b):
    """Pairwise IoU of corner-format boxes, (N, M)."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, k
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double iw, ih, inter, area_a, area_b, union
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for k in range(m):
            iw = fmin(a[i, 2], b[k, 2]) - fmax(a[i, 0], b[k, 0])
            if iw <= 0.0:
                continue
            ih = fmin(a[i, 3], b[k, 3]) - fmax(a[i, 1], b[k, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[k, 2] - b[k, 0]) * (b[k, 3] - b[k, 1])
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, k] = inter / union
    return out_arr


def nms(double[:, ::1] boxes, double[::1] scores, double iou_threshold):
    """Greedy NMS; returns kept indices in descending score order."""
    cdef Py_ssize_t n = boxes.shape[0], a, b, ia, ib
    order_arr = np.argsort(-np.asarray(scores), kind="stable").astype(np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    cdef double iw, ih, inter, area_a, area_b
    keep = []
    for a in range(n):
        ia = order[a]
        if suppressed[ia]:
            continue
        keep.append(ia)
        area_a = (boxes[ia, 2] - boxes[ia, 0]) * (boxes[ia, 3] - boxes[ia, 1])
        for b in range(a + 1, n):
            ib = order[b]
            if suppressed[ib]:
                continue
            iw = fmin(boxes[ia, 2], boxes[ib, 2]) - fmax(boxes[ia, 0], boxes[ib, 0])
            ih = fmin(boxes[ia, 3], boxes[ib, 3]) - fmax(boxes[ia, 1], boxes[ib, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (boxes[ib, 2] - boxes[ib, 0]) * (boxes[ib, 3] - boxes[ib, 1])
            if inter / (area_a + area_b - inter) > iou_threshold:
                suppressed[ib] = 1
    return np.asarray(keep, dtype=np.intp)


def greedy_match(double[:, ::1] iou, double threshold):
    """Match score-sorted detections (rows) to ground truths (columns).

    Each detection takes the still-free ground truth with the highest IoU
    >= ``threshold`` (ties go to the later column). Returns an int array of
    matched column indices, -1 where unmatched.
    """
    cdef Py_ssize_t d = iou.shape[0], g = iou.shape[1], i, k, best
    cdef double best_iou
    out_arr = np.full(d, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] out = out_arr
    taken_arr = np.zeros(g, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    for i in range(d):
        best = -1
        best_iou = fmin(threshold, 1.0 - 1e-10)
        for k in range(g):
            if taken[k]:
                continue
            if iou[i, k] < best_iou:
                continue
            best_iou = iou[i, k]
            best = k
        if best >= 0:
            taken[best] = 1
            out[i] = best
    return out_arr
