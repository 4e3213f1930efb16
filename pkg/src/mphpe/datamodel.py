"""COCO-style dataset files with a per-annotation ``pose`` extension.

Layout::

    {"images": [{"id", "file_name", "width", "height"}],
     "annotations": [{"id", "image_id", "bbox": [x, y, w, h], "pose": [pitch, yaw, roll],
                      "category_id": 1, "area", "iscrowd": 0, ("score")}],
     "categories": [{"id": 1, "name": "head"}],
     "meta": {"schema_version", "generator", "seed"}}

``id`` is used rather than ``image_id``/``ann_id`` on the records themselves so
that pycocotools and other COCO readers accept the file unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
FLOAT_DECIMALS = 6
BOUNDS_TOL = 1e-6


class DatasetError(ValueError):
    """Parse or validation failure; the message names the offending record."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    ann_id: int
    image_id: int
    bbox: tuple  # corner format (x, y, w, h), pixels
    pose: tuple  # (pitch, yaw, roll), degrees
    score: float | None = None


@dataclass
class DatasetFile:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def image_index(self) -> dict:
        return {im.image_id: im for im in self.images}

    def annotations_by_image(self) -> dict:
        out = {im.image_id: [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out

    @property
    def is_prediction(self) -> bool:
        return any(a.score is not None for a in self.annotations)

    def canonical(self) -> "DatasetFile":
        """Copy with records sorted by id and values rounded to file precision."""
        images = sorted(self.images, key=lambda r: r.image_id)
        anns = sorted(self.annotations, key=lambda a: (a.image_id, a.ann_id))
        anns = [
            Annotation(a.ann_id, a.image_id, tuple(_q(v) for v in a.bbox), _q_pose(a.pose),
                       None if a.score is None else _q(a.score))
            for a in anns
        ]
        return DatasetFile(images, anns, dict(self.meta))

    def to_json_obj(self) -> dict:
        ds = self.canonical()
        anns = []
        for a in ds.annotations:
            rec = {
                "id": a.ann_id, "image_id": a.image_id, "category_id": 1, "iscrowd": 0,
                "bbox": list(a.bbox), "area": _q(a.bbox[2] * a.bbox[3]), "pose": list(a.pose),
            }
            if a.score is not None:
                rec["score"] = a.score
            anns.append(rec)
        meta = {"schema_version": SCHEMA_VERSION, "generator": "mphpe", "seed": None}
        meta.update(ds.meta)
        return {
            "images": [{"id": r.image_id, "file_name": r.file_name, "width": r.width, "height": r.height}
                       for r in ds.images],
            "annotations": anns,
            "categories": [{"id": 1, "name": "head"}],
            "meta": meta,
        }


def _q(v: float) -> float:
    v = round(float(v), FLOAT_DECIMALS)
    return 0.0 if v == 0 else v


def _q_pose(pose) -> tuple:
    p, y, r = (_q(v) for v in pose)
    # rounding can land on the open end of the yaw range
    return (p, 180.0 if y == -180.0 else y, r)


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(obj[k], indent, level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise DatasetError(f"non-finite float {obj} cannot be serialised")
        s = f"{obj:.{FLOAT_DECIMALS}f}"
        return "0.000000" if s == "-0.000000" else s
    return json.dumps(obj)


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, floats with fixed 6 decimals."""
    return _encode(obj, 1, 0) + "\n"


def save(ds: DatasetFile, path) -> None:
    validate(ds)
    Path(path).write_text(dumps(ds.to_json_obj()), encoding="utf-8")


def _require(rec: dict, key: str, where: str):
    if key not in rec:
        raise DatasetError(f"{where}: missing field '{key}'")
    return rec[key]


def from_json_obj(obj) -> DatasetFile:
    if not isinstance(obj, dict):
        raise DatasetError("top level must be an object")
    images, anns = [], []
    for i, rec in enumerate(_require(obj, "images", "dataset")):
        where = f"images[{i}]"
        if not isinstance(rec, dict):
            raise DatasetError(f"{where}: expected an object")
        image_id = rec.get("id", rec.get("image_id"))
        if image_id is None:
            raise DatasetError(f"{where}: missing field 'id'")
        images.append(ImageRecord(int(image_id), str(_require(rec, "file_name", where)),
                                  int(_require(rec, "width", where)), int(_require(rec, "height", where))))
    for i, rec in enumerate(_require(obj, "annotations", "dataset")):
        where = f"annotations[{i}]"
        if not isinstance(rec, dict):
            raise DatasetError(f"{where}: expected an object")
        ann_id = rec.get("id", rec.get("ann_id"))
        if ann_id is None:
            raise DatasetError(f"{where}: missing field 'id'")
        where = f"annotation id={ann_id}"
        bbox = _require(rec, "bbox", where)
        pose = _require(rec, "pose", where)
        if len(bbox) != 4 or len(pose) != 3:
            raise DatasetError(f"{where}: bbox needs 4 values and pose 3")
        score = rec.get("score")
        anns.append(Annotation(int(ann_id), int(_require(rec, "image_id", where)),
                               tuple(float(v) for v in bbox), tuple(float(v) for v in pose),
                               None if score is None else float(score)))
    ds = DatasetFile(images, anns, dict(obj.get("meta", {})))
    validate(ds)
    return ds


def load(path) -> DatasetFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    return from_json_obj(obj)


def validate(ds: DatasetFile) -> None:
    """Raise :class:`DatasetError` naming the first record breaking an invariant."""
    images = {}
    for im in ds.images:
        if im.image_id in images:
            raise DatasetError(f"image id={im.image_id}: duplicate image id")
        if im.width <= 0 or im.height <= 0:
            raise DatasetError(f"image id={im.image_id}: non-positive size")
        images[im.image_id] = im
    seen = set()
    for a in ds.annotations:
        where = f"annotation id={a.ann_id}"
        if a.ann_id in seen:
            raise DatasetError(f"{where}: duplicate ann_id")
        seen.add(a.ann_id)
        im = images.get(a.image_id)
        if im is None:
            raise DatasetError(f"{where}: image_id {a.image_id} not found")
        x, y, w, h = a.bbox
        if not all(math.isfinite(v) for v in a.bbox) or not (w > 0 and h > 0):
            raise DatasetError(f"{where}: bbox width and height must be positive")
        if x < -BOUNDS_TOL or y < -BOUNDS_TOL or x + w > im.width + BOUNDS_TOL or y + h > im.height + BOUNDS_TOL:
            raise DatasetError(f"{where}: bbox {list(a.bbox)} outside image {im.width}x{im.height}")
        pitch, yaw, roll = a.pose
        if not all(math.isfinite(v) for v in a.pose):
            raise DatasetError(f"{where}: pose must be finite")
        if not (-90 < pitch < 90 and -90 < roll < 90 and -180 < yaw <= 180):
            raise DatasetError(f"{where}: pose {list(a.pose)} out of range")
        if a.score is not None and not 0.0 <= a.score <= 1.0:
            raise DatasetError(f"{where}: score {a.score} outside [0, 1]")
