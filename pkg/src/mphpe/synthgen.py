"""Synthetic multi-person head images with exact labels.

Each head is a textured convex proxy (a deformed icosphere with a nose) whose
colouring is unique per orientation. Labels never come from the sampler: the
sampled placement is turned into world landmarks and pushed through the same
label pipeline used for real landmark files.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels, datamodel
from .geometry import CameraModel, EulerPose, SimilarityTransform, euler_to_matrix
from .labelgen import (
    HeadLabel,
    HemisphereConfig,
    ReferenceHead,
    head_box_from_hemisphere,
    icosphere,
    label_head,
)

log = logging.getLogger(__name__)

# Per-sector colours (head frame: x image-right, y down, z away from camera).
SECTOR_COLORS = {
    "front": (232, 182, 140),   # -z, the face
    "back": (62, 42, 30),       # +z, hair
    "left": (60, 160, 72),      # -x
    "right": (60, 92, 204),     # +x
    "top": (204, 60, 60),       # -y
    "bottom": (222, 210, 64),   # +y
    "nose_left": (224, 60, 204),
    "nose_right": (250, 250, 250),
}
_SECTOR_AXES = [("right", 0, 1.0), ("left", 0, -1.0), ("bottom", 1, 1.0), ("top", 1, -1.0),
                ("back", 2, 1.0), ("front", 2, -1.0)]
TEXTURE_DIM = 0.78

# Head proxy shape, millimetres, same frame as the reference landmarks.
HEAD_CENTER = np.array([0.0, 5.0, -35.0])
HEAD_RADII = np.array([70.0, 92.0, 85.0])
NOSE_DIRECTION = np.array([0.0, 0.12, -1.0]) / np.linalg.norm([0.0, 0.12, -1.0])
NOSE_HEIGHT = 32.0
NOSE_HALF_ANGLE = np.radians(22.0)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (320, 320)
    heads_per_image: tuple = (1, 3)
    yaw_range: tuple = (-180.0, 180.0)
    pitch_std: float = 20.0
    pitch_limit: float = 60.0
    roll_std: float = 15.0
    roll_limit: float = 50.0
    depth_range: tuple = (600.0, 1300.0)
    scale_range: tuple = (0.9, 1.1)
    focal_ratio: float = 0.9375  # focal length / image width
    max_overlap_iou: float = 0.6
    max_retries: int = 60
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.heads_per_image
        if lo < 1 or hi < lo:
            raise ValueError("heads_per_image must satisfy 1 <= min <= max")
        if not (self.pitch_limit < 90 and self.roll_limit < 90):
            raise ValueError("pitch/roll limits must stay inside (-90, 90)")
        if self.depth_range[0] <= 0 or self.depth_range[1] < self.depth_range[0]:
            raise ValueError("depth range must be positive and ordered")

    def camera(self) -> CameraModel:
        w, h = self.image_size
        f = self.focal_ratio * w
        return CameraModel(f, f, w / 2.0, h / 2.0)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = cls.__dataclass_fields__
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown scene spec keys: {unknown}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True)
class HeadPlacement:
    """Head pose in the camera frame plus the transform of the reference head into it."""

    pose: EulerPose
    scale: float
    anchor: np.ndarray  # camera-frame position of the reference landmark centroid

    def camera_transform(self, ref: ReferenceHead) -> SimilarityTransform:
        rot = euler_to_matrix(self.pose)
        return SimilarityTransform(self.scale, rot, self.anchor - self.scale * rot @ ref.centroid)

    def world_transform(self, cam: CameraModel, ref: ReferenceHead) -> SimilarityTransform:
        cam_to_world = SimilarityTransform(1.0, cam.rotation.T, -cam.rotation.T @ cam.translation)
        return cam_to_world.compose(self.camera_transform(ref))


def _truncnorm(rng: np.random.Generator, std: float, limit: float) -> float:
    while True:
        v = rng.normal(0.0, std)
        if abs(v) < limit:
            return float(v)


def _iou(a, b) -> float:
    return float(_kernels.box_iou_matrix(_corners(a), _corners(b))[0, 0])


def _corners(box) -> np.ndarray:
    bx, by, bw, bh = box
    return np.array([[bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2]])


def sample_scene(spec: SceneSpec, rng: np.random.Generator, cam: CameraModel | None = None,
                 ref: ReferenceHead | None = None) -> list:
    """Draw head placements; boxes of accepted heads overlap with IoU <= spec.max_overlap_iou."""
    ref = ref or ReferenceHead()
    cam = cam or spec.camera()
    w, h = spec.image_size
    count = int(rng.integers(spec.heads_per_image[0], spec.heads_per_image[1] + 1))
    placed, boxes = [], []
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            yaw = float(rng.uniform(*spec.yaw_range))
            if yaw <= -180.0:
                yaw = 180.0
            pose = EulerPose(_truncnorm(rng, spec.pitch_std, spec.pitch_limit), yaw,
                             _truncnorm(rng, spec.roll_std, spec.roll_limit))
            depth = float(rng.uniform(*spec.depth_range))
            u = float(rng.uniform(0.1 * w, 0.9 * w))
            v = float(rng.uniform(0.1 * h, 0.9 * h))
            scale = float(rng.uniform(*spec.scale_range))
            # anchor in camera frame from the pixel it should project to
            anchor = np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])
            cand = HeadPlacement(pose, scale, anchor)
            box = _placement_box(cand, cam, spec, ref)
            if box[2] <= 0 or box[3] <= 0:
                continue
            if all(_iou(box, b) <= spec.max_overlap_iou for b in boxes):
                placed.append(cand)
                boxes.append(box)
                break
        else:
            if len(placed) < spec.heads_per_image[0]:
                raise PlacementError(f"could not place {spec.heads_per_image[0]} heads "
                                     f"after {spec.max_retries} retries")
            break
    return placed


def _placement_box(p: HeadPlacement, cam: CameraModel, spec: SceneSpec, ref: ReferenceHead):
    return head_box_from_hemisphere(p.world_transform(cam, ref), cam, spec.image_size, HemisphereConfig(), ref)[0]


def _build_head_mesh(subdivisions: int = 3):
    unit, faces = icosphere(subdivisions)
    verts = HEAD_CENTER + unit * HEAD_RADII
    # nose: raised cap around NOSE_DIRECTION with cosine falloff
    ang = np.arccos(np.clip(unit @ NOSE_DIRECTION, -1.0, 1.0))
    bump = np.where(ang < NOSE_HALF_ANGLE, NOSE_HEIGHT * np.cos(ang / NOSE_HALF_ANGLE * np.pi / 2) ** 2, 0.0)
    verts = verts + bump[:, None] * NOSE_DIRECTION
    centre_dir = unit[faces].mean(axis=1)
    centre_dir /= np.linalg.norm(centre_dir, axis=1, keepdims=True)
    colors = np.zeros((faces.shape[0], 3), dtype=np.float64)
    sector = np.argmax(np.abs(centre_dir), axis=1)
    for name, axis, sign in _SECTOR_AXES:
        sel = (sector == axis) & (np.sign(centre_dir[:, axis]) == sign)
        colors[sel] = SECTOR_COLORS[name]
    on_nose = np.arccos(np.clip(centre_dir @ NOSE_DIRECTION, -1, 1)) < NOSE_HALF_ANGLE * 0.8
    colors[on_nose & (centre_dir[:, 0] < 0)] = SECTOR_COLORS["nose_left"]
    colors[on_nose & (centre_dir[:, 0] >= 0)] = SECTOR_COLORS["nose_right"]
    # banded texture fixed to the head so in-sector rotation stays visible
    lat = np.degrees(np.arcsin(np.clip(-centre_dir[:, 1], -1, 1)))
    lon = np.degrees(np.arctan2(centre_dir[:, 0], -centre_dir[:, 2]))
    band = (np.floor((lat + 90.0) / 22.5) + np.floor((lon + 180.0) / 30.0)) % 2 == 1
    colors[band & ~on_nose] *= TEXTURE_DIM
    return verts, np.asarray(faces), np.round(colors).astype(np.uint8)


_MESH = None


def head_mesh():
    """(vertices, faces, face colours) of the head proxy in the reference frame."""
    global _MESH
    if _MESH is None:
        _MESH = _build_head_mesh()
    return _MESH


def smooth_background(rng: np.random.Generator, size: tuple, cells: int = 4) -> np.ndarray:
    w, h = size
    coarse = rng.integers(30, 226, size=(cells, cells, 3), dtype=np.uint8)
    img = Image.fromarray(coarse, "RGB").resize((w, h), Image.BILINEAR)
    return np.array(img, dtype=np.uint8)


def render_heads(image: np.ndarray, transforms, cam: CameraModel, impl=None) -> None:
    """Draw head proxies into ``image`` (H, W, 3 uint8) in place, far to near."""
    verts, faces, colors = head_mesh()
    h, w = image.shape[:2]
    inv_depth = np.zeros((h, w), dtype=np.float64)
    items = []
    for m in transforms:
        pc = cam.to_camera(m.apply(verts))
        items.append((float(pc[:, 2].mean()), pc))
    for _, pc in sorted(items, key=lambda it: -it[0]):
        if np.any(pc[:, 2] <= 1e-3):
            continue
        uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
        tri = pc[faces]
        normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        facing = np.einsum("ij,ij->i", normal, tri.mean(axis=1)) < 0
        _kernels.rasterize_triangles(image, inv_depth, uv[faces[facing]], pc[:, 2][faces[facing]],
                                     colors[facing], impl=impl)


def render_scene(scene: list, cam: CameraModel, spec: SceneSpec, rng: np.random.Generator,
                 ref: ReferenceHead | None = None, impl=None) -> tuple[np.ndarray, list]:
    """Rasterise a sampled scene; labels go through the landmark pipeline."""
    ref = ref or ReferenceHead()
    image = smooth_background(rng, spec.image_size)
    transforms = [p.world_transform(cam, ref) for p in scene]
    render_heads(image, transforms, cam, impl=impl)
    labels = [label_head(m.apply(ref.landmarks), cam, spec.image_size, ref) for m in transforms]
    return image, labels


def scene_seed(global_seed: int, split: str, index: int) -> np.random.SeedSequence:
    digest = hashlib.sha256(f"{global_seed}:{split}:{index}".encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:16], "little"))


@dataclass
class BenchmarkResult:
    root: Path
    train: Path
    val: Path
    scene_files: dict = field(default_factory=dict)


def _scene_record(image_id, spec, cam, transforms, ref, file_name):
    return {
        "image_id": image_id, "file_name": file_name,
        "width": spec.image_size[0], "height": spec.image_size[1],
        "camera": cam.to_dict(),
        "heads": [{"head_id": k, "landmarks": np.round(m.apply(ref.landmarks), 9).tolist()}
                  for k, m in enumerate(transforms)],
    }


def generate_split(spec: SceneSpec, split: str, count: int, out_dir: Path, ref: ReferenceHead | None = None,
                   impl=None, first_id: int = 1) -> tuple[datamodel.DatasetFile, list]:
    ref = ref or ReferenceHead()
    cam = spec.camera()
    img_dir = out_dir / "images" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    images, anns, scene_records = [], [], []
    ann_id = 1
    for i in range(count):
        image_id = first_id + i
        rng = np.random.default_rng(scene_seed(spec.seed, split, i))
        scene = sample_scene(spec, rng, cam, ref)
        image, labels = render_scene(scene, cam, spec, rng, ref, impl=impl)
        rel = f"images/{split}/{image_id:06d}.png"
        try:
            Image.fromarray(image, "RGB").save(out_dir / rel, optimize=False)
        except OSError as e:
            raise OSError(f"failed to write {out_dir / rel}: {e}") from e
        transforms = [p.world_transform(cam, ref) for p in scene]
        scene_records.append(_scene_record(image_id, spec, cam, transforms, ref, rel))
        kept = [lab for lab in labels if lab.box[2] > 0 and lab.box[3] > 0]
        if not kept:
            continue
        images.append(datamodel.ImageRecord(image_id, rel, spec.image_size[0], spec.image_size[1]))
        for lab in kept:
            anns.append(datamodel.Annotation(ann_id, image_id, lab.corner_box(), tuple(lab.pose.as_array())))
            ann_id += 1
    meta = {"generator": "mphpe.synthgen", "seed": spec.seed, "split": split, "scene_spec": spec.to_dict()}
    return datamodel.DatasetFile(images, anns, meta), scene_records


def generate_benchmark(spec: SceneSpec, counts: tuple, out_dir, impl=None) -> BenchmarkResult:
    """Write train/val PNGs, DatasetFiles and landmark-scene files under ``out_dir``.

    The two splits draw from disjoint seed streams; output is a pure function of
    ``(spec, counts)``.
    """
    n_train, n_val = counts
    if n_train < 1 or n_val < 1:
        raise ValueError("counts must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = BenchmarkResult(out, out / "train.json", out / "val.json")
    for split, n, first in (("train", n_train, 1), ("val", n_val, 1)):
        ds, scene = generate_split(spec, split, n, out, impl=impl, first_id=first)
        datamodel.save(ds, out / f"{split}.json")
        scene_path = out / f"{split}_scene.json"
        scene_path.write_text(json.dumps(scene, sort_keys=True) + "\n", encoding="utf-8")
        result.scene_files[split] = scene_path
        log.info("%s: %d images, %d heads", split, len(ds.images), len(ds.annotations))
    return result


def label_from_placement(p: HeadPlacement, cam: CameraModel, spec: SceneSpec,
                         ref: ReferenceHead | None = None) -> HeadLabel:
    ref = ref or ReferenceHead()
    return label_head(p.world_transform(cam, ref).apply(ref.landmarks), cam, spec.image_size, ref)
