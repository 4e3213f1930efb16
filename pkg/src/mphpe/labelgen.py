"""Head pose and head box labels from 3D face landmarks plus camera parameters.

A generic frontal reference head is aligned to each observed landmark set with
a closed-form similarity transform ``M_c``. The pose is the rotation part of
``M_r = C_real @ M_c @ inv(C_ref)`` split into Euler angles, and the box is the
2D extent of a loose sphere of sample points carried along by ``M_c``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import datamodel
from .geometry import (
    CameraModel,
    EulerPose,
    GeometryError,
    SimilarityTransform,
    angular_abs_diff,
    horn_align,
    matrix_to_euler,
    wrap_angles,
)

log = logging.getLogger(__name__)

# Canonical 68-point head in millimetres, iBUG ordering. Axes match a camera
# looking at a frontal face: x to image right, y down, z away from the camera,
# origin at the centre of the skull (the face lies at negative z).
REFERENCE_LANDMARKS = np.array([
    # 0-: jaw line, image-left ear to image-right ear
    [-66.0, -8.0, -44.5],
    [-64.7, 3.3, -47.9],
    [-61.0, 17.3, -52.8],
    [-54.9, 31.5, -57.4],
    [-46.7, 44.8, -61.0],
    [-36.7, 56.1, -63.5],
    [-25.3, 64.7, -64.9],
    [-12.9, 70.2, -65.7],
    [0.0, 72.0, -65.9],
    [12.9, 70.2, -65.7],
    [25.3, 64.7, -64.9],
    [36.7, 56.1, -63.5],
    [46.7, 44.8, -61.0],
    [54.9, 31.5, -57.4],
    [61.0, 17.3, -52.8],
    [64.7, 3.3, -47.9],
    [66.0, -8.0, -44.5],
    # 17-: brows
    [-58.0, -40.0, -50.7],
    [-47.0, -45.7, -64.0],
    [-36.0, -48.0, -73.8],
    [-25.0, -45.7, -82.4],
    [-14.0, -40.0, -89.2],
    [14.0, -40.0, -89.2],
    [25.0, -45.7, -82.4],
    [36.0, -48.0, -73.8],
    [47.0, -45.7, -64.0],
    [58.0, -40.0, -50.7],
    # 27-: nose bridge, 30 = tip
    [0.0, -30.0, -96.6],
    [0.0, -19.0, -106.3],
    [0.0, -8.0, -114.7],
    [0.0, 4.0, -122.9],
    # 31-: nostril base
    [-15.0, 14.0, -100.1],
    [-8.0, 14.0, -104.5],
    [0.0, 14.0, -107.1],
    [8.0, 14.0, -104.5],
    [15.0, 14.0, -100.1],
    # 36-: eyes
    [-45.0, -20.0, -69.6],
    [-41.2, -23.5, -72.2],
    [-22.8, -23.5, -83.7],
    [-19.0, -20.0, -85.9],
    [-22.8, -16.5, -85.1],
    [-41.2, -16.5, -73.8],
    [19.0, -20.0, -85.9],
    [22.8, -23.5, -83.7],
    [41.2, -23.5, -72.2],
    [45.0, -20.0, -69.6],
    [41.2, -16.5, -73.8],
    [22.8, -16.5, -85.1],
    # 48-: outer lip
    [-25.0, 42.0, -83.2],
    [-21.7, 37.5, -86.7],
    [-12.5, 34.2, -90.9],
    [0.0, 33.0, -92.7],
    [12.5, 34.2, -90.9],
    [21.7, 37.5, -86.7],
    [25.0, 42.0, -83.2],
    [21.7, 47.8, -81.8],
    [12.5, 52.1, -82.5],
    [0.0, 53.7, -83.1],
    [-12.5, 52.1, -82.5],
    [-21.7, 47.8, -81.8],
    # 60-: inner lip
    [-16.0, 42.0, -85.8],
    [-11.3, 39.9, -87.9],
    [0.0, 39.0, -89.5],
    [11.3, 39.9, -87.9],
    [16.0, 42.0, -85.8],
    [11.3, 44.1, -86.0],
    [0.0, 45.0, -86.8],
    [-11.3, 44.1, -86.0],
])

# Nested corner-landmark subsets, each extending the previous one.
CORNER_INDICES = {
    9: (36, 39, 42, 45, 30, 48, 54, 8, 27),
    11: (36, 39, 42, 45, 30, 48, 54, 8, 27, 0, 16),
    13: (36, 39, 42, 45, 30, 48, 54, 8, 27, 0, 16, 17, 26),
    15: (36, 39, 42, 45, 30, 48, 54, 8, 27, 0, 16, 17, 26, 31, 35),
    17: (36, 39, 42, 45, 30, 48, 54, 8, 27, 0, 16, 17, 26, 31, 35, 4, 12),
}
DEFAULT_N = 13
VARIANCE_NS = (9, 11, 13, 15, 17)


class OffscreenError(GeometryError):
    """No hemisphere sample point lands in front of the camera."""


def reference_camera() -> CameraModel:
    """Frontal camera one metre in front of the reference head."""
    return CameraModel(1000.0, 1000.0, 0.0, 0.0, np.eye(3), np.array([0.0, 0.0, 1000.0]))


@dataclass(frozen=True)
class ReferenceHead:
    landmarks: np.ndarray = field(default_factory=lambda: REFERENCE_LANDMARKS.copy())
    camera: CameraModel = field(default_factory=reference_camera)
    corner_indices: dict = field(default_factory=lambda: dict(CORNER_INDICES))

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.ndim != 2 or lm.shape[1] != 3 or lm.shape[0] < 3:
            raise ValueError("reference landmarks must be (N, 3) with N >= 3")
        object.__setattr__(self, "landmarks", lm)
        for n, idx in self.corner_indices.items():
            if len(idx) != n:
                raise ValueError(f"corner list for n={n} has {len(idx)} entries")
            if min(idx) < 0 or max(idx) >= lm.shape[0]:
                raise ValueError(f"corner list for n={n} indexes outside [0, {lm.shape[0]})")

    @property
    def centroid(self) -> np.ndarray:
        return self.landmarks.mean(axis=0)

    @property
    def diameter(self) -> float:
        diff = self.landmarks[:, None, :] - self.landmarks[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1)).max())


@dataclass(frozen=True)
class HemisphereConfig:
    """Loose sphere of sample points around a head.

    Radius is ``kappa`` times the largest landmark-to-landmark distance of the
    reference head, centred on the reference landmark centroid.
    """

    kappa: float = 1.0
    subdivisions: int = 3  # 642 vertices


@dataclass(frozen=True)
class HeadLabel:
    box: tuple  # centre format (bx, by, bw, bh), pixels
    pose: EulerPose
    visibility: float
    transform: SimilarityTransform | None = None

    def corner_box(self) -> tuple:
        bx, by, bw, bh = self.box
        return (bx - bw / 2.0, by - bh / 2.0, bw, bh)


@lru_cache(maxsize=8)
def icosphere(subdivisions: int = 3):
    """Unit icosphere ``(vertices (V, 3), faces (F, 3))``; V = 10 * 4**k + 2."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts)
    f = np.array(faces, dtype=np.int64)
    v.setflags(write=False)
    f.setflags(write=False)
    return v, f


def select_corner_landmarks(head: np.ndarray, n: int, ref: ReferenceHead | None = None) -> np.ndarray:
    ref = ref or ReferenceHead()
    if n not in ref.corner_indices:
        raise ValueError(f"unsupported corner count n={n}; choose from {sorted(ref.corner_indices)}")
    head = np.asarray(head, dtype=np.float64)
    if head.shape != ref.landmarks.shape:
        raise ValueError(f"head must have shape {ref.landmarks.shape}, got {head.shape}")
    return head[list(ref.corner_indices[n])]


def head_pose_from_landmarks(real: np.ndarray, cam_real: CameraModel, ref: ReferenceHead | None = None,
                             n: int = DEFAULT_N) -> tuple[EulerPose, SimilarityTransform]:
    """Pose of an observed head in ``cam_real`` and the aligning transform ``M_c``.

    ``real`` are world-frame landmarks indexed like the reference head.
    """
    ref = ref or ReferenceHead()
    m_c = horn_align(select_corner_landmarks(ref.landmarks, n, ref), select_corner_landmarks(real, n, ref))
    # M_r = C_real M_c C_ref^-1, i.e. C_real C_cam^-1 with C_cam = C_ref M_c^-1
    m_r = cam_real.extrinsic() @ m_c.matrix() @ np.linalg.inv(ref.camera.extrinsic())
    return matrix_to_euler(m_r[:3, :3] / m_c.scale), m_c


def hemisphere_points(m_c: SimilarityTransform, cfg: HemisphereConfig = HemisphereConfig(),
                      ref: ReferenceHead | None = None) -> np.ndarray:
    ref = ref or ReferenceHead()
    unit, _ = icosphere(cfg.subdivisions)
    return m_c.apply(ref.centroid + cfg.kappa * ref.diameter * unit)


def head_box_from_hemisphere(m_c: SimilarityTransform, cam_real: CameraModel, image_size: tuple,
                             cfg: HemisphereConfig = HemisphereConfig(),
                             ref: ReferenceHead | None = None) -> tuple[tuple, float]:
    """Clipped centre-format box and the fraction of sample points on screen.

    Points behind the camera are ignored; if every point is behind it
    :class:`OffscreenError` is raised. The box may have zero area when the
    sphere projects entirely outside the image.
    """
    width, height = image_size
    pc = cam_real.to_camera(hemisphere_points(m_c, cfg, ref))
    front = pc[:, 2] > 1e-6
    if not front.any():
        raise OffscreenError("all hemisphere points are behind the camera")
    p = pc[front]
    u = cam_real.fx * p[:, 0] / p[:, 2] + cam_real.cx
    v = cam_real.fy * p[:, 1] / p[:, 2] + cam_real.cy
    inside = (u >= 0) & (u <= width) & (v >= 0) & (v <= height)
    visibility = float(inside.sum()) / pc.shape[0]
    x0, x1 = np.clip([u.min(), u.max()], 0, width)
    y0, y1 = np.clip([v.min(), v.max()], 0, height)
    box = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    return tuple(float(b) for b in box), visibility


def label_head(real: np.ndarray, cam_real: CameraModel, image_size: tuple, ref: ReferenceHead | None = None,
               n: int = DEFAULT_N, cfg: HemisphereConfig = HemisphereConfig()) -> HeadLabel:
    ref = ref or ReferenceHead()
    pose, m_c = head_pose_from_landmarks(real, cam_real, ref, n)
    box, vis = head_box_from_hemisphere(m_c, cam_real, image_size, cfg, ref)
    return HeadLabel(box, pose, vis, m_c)


@dataclass
class VarianceReport:
    pitch: float
    yaw: float
    roll: float
    avg: float
    heads_used: int
    heads_skipped: int

    def as_tuple(self) -> tuple:
        return (self.pitch, self.yaw, self.roll, self.avg)


def _circular_std(values: np.ndarray) -> float:
    # deviations from the first sample, wrapped, so yaw near +-180 is handled
    dev = wrap_angles(values - values[0])
    return float(np.std(dev))


def label_variance_study(heads, ref: ReferenceHead | None = None, ns=VARIANCE_NS) -> VarianceReport:
    """Spread of the recovered pose across corner-landmark counts.

    For every ``(landmarks, camera)`` pair the pose is computed once per
    ``n`` in ``ns``; the per-angle population standard deviation across ``n``
    is averaged over heads. Poses are compared at the dataset file precision
    (6 decimals) so that labels which would serialise identically report 0.
    Heads whose alignment fails are skipped and counted.
    """
    ref = ref or ReferenceHead()
    stds, skipped = [], 0
    for i, (landmarks, cam) in enumerate(heads):
        try:
            poses = np.array([head_pose_from_landmarks(landmarks, cam, ref, n)[0].as_array() for n in ns])
        except GeometryError as e:
            log.warning("head %d skipped in variance study: %s", i, e)
            skipped += 1
            continue
        poses = np.round(poses, datamodel.FLOAT_DECIMALS)
        stds.append([_circular_std(poses[:, k]) for k in range(3)])
    if not stds:
        raise ValueError(f"no usable heads ({skipped} skipped)")
    p, y, r = np.mean(stds, axis=0)
    return VarianceReport(float(p), float(y), float(r), float((p + y + r) / 3.0), len(stds), skipped)


class SceneFileError(ValueError):
    pass


def _parse_scene(obj) -> list:
    if not isinstance(obj, list):
        raise SceneFileError("scene file must be a JSON list of images")
    images = []
    for i, rec in enumerate(obj):
        where = f"record {i}"
        try:
            image_id = int(rec["image_id"])
            width, height = int(rec["width"]), int(rec["height"])
            cam = CameraModel.from_dict(rec["camera"])
            heads = []
            for k, h in enumerate(rec["heads"]):
                lm = np.asarray(h["landmarks"], dtype=np.float64)
                if lm.ndim != 2 or lm.shape[1] != 3:
                    raise SceneFileError(f"{where}: head {k} landmarks must be N x 3")
                heads.append((int(h.get("head_id", k)), lm))
        except SceneFileError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFileError(f"{where}: {type(e).__name__}: {e}") from e
        images.append({"image_id": image_id, "width": width, "height": height, "camera": cam,
                       "heads": heads, "file_name": rec.get("file_name", f"{image_id:06d}.png")})
    return images


def build_labels(scene, ref: ReferenceHead | None = None, n: int = DEFAULT_N,
                 cfg: HemisphereConfig = HemisphereConfig(), seed=None) -> datamodel.DatasetFile:
    """Dataset labels from a landmark-scene file path or an already parsed list.

    Heads whose box collapses after clipping (or that cannot be aligned) are
    dropped; images left without a head are discarded.
    """
    if isinstance(scene, (str, Path)):
        try:
            scene = json.loads(Path(scene).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise SceneFileError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    ref = ref or ReferenceHead()
    images, anns = [], []
    ann_id = 1
    for rec in sorted(_parse_scene(scene), key=lambda r: r["image_id"]):
        kept = []
        for head_id, lm in sorted(rec["heads"], key=lambda h: h[0]):
            try:
                lab = label_head(lm, rec["camera"], (rec["width"], rec["height"]), ref, n, cfg)
            except GeometryError as e:
                log.info("image %s head %s dropped: %s", rec["image_id"], head_id, e)
                continue
            if lab.box[2] <= 0 or lab.box[3] <= 0:
                continue
            kept.append(lab)
        if not kept:
            continue
        images.append(datamodel.ImageRecord(rec["image_id"], rec["file_name"], rec["width"], rec["height"]))
        for lab in kept:
            anns.append(datamodel.Annotation(ann_id, rec["image_id"], lab.corner_box(),
                                             tuple(lab.pose.as_array())))
            ann_id += 1
    return datamodel.DatasetFile(images, anns, {"generator": "mphpe.labelgen", "seed": seed,
                                                "corner_landmarks": n})


def pose_agreement(a: EulerPose, b: EulerPose) -> float:
    """Largest per-angle wrapped difference between two poses, degrees."""
    return float(np.max(angular_abs_diff(a.as_array(), b.as_array())))
