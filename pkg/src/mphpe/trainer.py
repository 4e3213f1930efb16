"""Training loop, checkpointing, prediction and parameter sweeps."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import datamodel
from .infer_eval import (CONF_FLOOR, TAU_CONF, TAU_IOU, Detection, Letterbox, decode_detections, evaluate,
                         letterbox_geometry, nms)
from .losses import LossWeights, TrainingDivergenceError, compute_loss
from .net import AnchorConfig, HeadPoseNet, ModelConfig, build_targets, kmeans_anchors

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_SCHEMA_VERSION = 1
NORMALIZATION = "rgb_div255"
PAD_VALUE = 114
MAX_CANDIDATES = 3000
MAX_DETECTIONS = 100
# geometric augmentation keys from common detector configs; rejected by name
_AFFINE_KEYS = {"degrees", "rotate", "rotation", "translate", "scale", "shear", "perspective", "mosaic",
                "mixup", "affine", "random_affine", "flipud"}


class ConfigValidationError(ValueError):
    pass


@dataclass
class AugmentConfig:
    """Photometric jitter; ``fliplr`` is opt-in and mirrors yaw and roll."""

    hsv_v: float = 0.3      # brightness factor drawn from [1 - v, 1 + v]
    hsv_s: float = 0.5      # saturation factor drawn from [1 - s, 1 + s]
    fliplr: bool = False

    def __post_init__(self):
        if not (0 <= self.hsv_v < 1 and 0 <= self.hsv_s < 1):
            raise ConfigValidationError("hsv_v and hsv_s must lie in [0, 1)")


@dataclass
class TrainConfig:
    train: str = ""
    val: str = ""
    out: str = "runs/train"
    input_size: int = 320
    epochs: int = 60
    batch_size: int = 16
    lr0: float = 0.01
    lrf: float = 0.01           # final lr as a fraction of lr0
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: float = 3.0
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    loss: LossWeights = field(default_factory=LossWeights)
    wrapped: bool = False
    neighbours: str = "two"
    anchors: str | list = "default"   # "default" | "auto" | explicit per-stride list
    model_width: float = 1.0
    model_depth: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    threads: int = 1
    eval_every: int = 1
    tau_conf: float = TAU_CONF
    tau_iou: float = TAU_IOU
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**{k: v for k, v in self.loss.items()})
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.input_size % 64 or self.input_size <= 0:
            raise ConfigValidationError("input_size must be a positive multiple of 64")
        if self.epochs < 1 or self.batch_size < 1 or self.threads < 1 or self.eval_every < 1:
            raise ConfigValidationError("epochs, batch_size, threads and eval_every must be >= 1")
        if self.lr0 <= 0 or not 0 < self.lrf <= 1:
            raise ConfigValidationError("lr0 must be > 0 and lrf in (0, 1]")
        if self.neighbours not in ("two", "four"):
            raise ConfigValidationError("neighbours must be 'two' or 'four'")
        if isinstance(self.anchors, str) and self.anchors not in ("default", "auto"):
            raise ConfigValidationError("anchors must be 'default', 'auto' or an explicit list")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigValidationError(f"unsupported config schema_version {self.schema_version}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        _reject_unknown(d, cls, "config")
        if isinstance(d.get("augment"), dict):
            _reject_unknown(d["augment"], AugmentConfig, "augment")
        if isinstance(d.get("loss"), dict):
            _reject_unknown(d["loss"], LossWeights, "loss")
            if "stride_weights" in d["loss"]:
                d["loss"] = dict(d["loss"], stride_weights=tuple(d["loss"]["stride_weights"]))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigValidationError(str(e)) from e
        except ValueError as e:
            raise ConfigValidationError(str(e)) from e

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigValidationError(f"{path}: {e}") from e
        cfg = cls.from_dict(d)
        # dataset paths are relative to the config file
        base = Path(path).resolve().parent
        for key in ("train", "val"):
            v = getattr(cfg, key)
            if v and not Path(v).is_absolute():
                setattr(cfg, key, str(base / v))
        return cfg

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Apply flat ``a.b=value`` style overrides (values already parsed)."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigValidationError(f"unknown config key '{key}'")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigValidationError(f"unknown config key '{key}'")
            node[parts[-1]] = value
        return TrainConfig.from_dict(d)


def _reject_unknown(d: dict, cls, where: str) -> None:
    known = {f.name for f in fields(cls)}
    for k in d:
        if k in known:
            continue
        if k in _AFFINE_KEYS:
            raise ConfigValidationError(
                f"{where}: '{k}' is a geometric augmentation; only photometric jitter is supported "
                "because image-plane transforms do not map Euler labels consistently")
        raise ConfigValidationError(f"{where}: unknown key '{k}'")


# ---------------------------------------------------------------- data

def load_image(path, size: int) -> tuple[np.ndarray, Letterbox]:
    """Read an RGB image and letterbox it into a ``size`` square (uint8 HWC)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        lb = letterbox_geometry(im.width, im.height, size)
        nw, nh = round(im.width * lb.scale), round(im.height * lb.scale)
        if (nw, nh) != (im.width, im.height):
            im = im.resize((nw, nh), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    out = np.full((size, size, 3), PAD_VALUE, dtype=np.uint8)
    x0, y0 = int(round(lb.pad_x - 0.1)), int(round(lb.pad_y - 0.1))
    out[y0:y0 + nh, x0:x0 + nw] = arr
    return out, Letterbox(lb.scale, float(x0), float(y0), lb.width, lb.height)


class HeadDataset:
    """Images held in memory at network resolution with labels in network pixels."""

    def __init__(self, ds: datamodel.DatasetFile, root, size: int):
        self.ds = ds
        self.size = size
        self.image_ids = [im.image_id for im in sorted(ds.images, key=lambda r: r.image_id)]
        index = ds.image_index()
        by_image = ds.annotations_by_image()
        self.images, self.letterboxes, self.labels = [], [], []
        for img_id in self.image_ids:
            rec = index[img_id]
            path = Path(root) / rec.file_name
            if not path.is_file():
                raise FileNotFoundError(f"image id={img_id}: {path} not found")
            arr, lb = load_image(path, size)
            rows = []
            for a in by_image.get(img_id, []):
                x, y, w, h = a.bbox
                rows.append([lb.scale * (x + w / 2) + lb.pad_x, lb.scale * (y + h / 2) + lb.pad_y,
                             lb.scale * w, lb.scale * h, *a.pose])
            self.images.append(arr)
            self.letterboxes.append(lb)
            self.labels.append(np.array(rows, dtype=np.float64).reshape(-1, 7))

    @classmethod
    def from_file(cls, path, size: int) -> "HeadDataset":
        path = Path(path)
        return cls(datamodel.load(path), path.parent, size)

    def __len__(self):
        return len(self.image_ids)

    def box_sizes(self) -> np.ndarray:
        return np.concatenate([lab[:, 2:4] for lab in self.labels]) if self.labels else np.zeros((0, 2))


def photometric(img: np.ndarray, rng: np.random.Generator, aug: AugmentConfig) -> np.ndarray:
    x = img.astype(np.float32)
    if aug.hsv_s:
        gray = x @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        x = gray[..., None] + rng.uniform(1 - aug.hsv_s, 1 + aug.hsv_s) * (x - gray[..., None])
    if aug.hsv_v:
        x = x * rng.uniform(1 - aug.hsv_v, 1 + aug.hsv_v)
    return np.clip(x, 0, 255).astype(np.uint8)


def flip_labels(labels: np.ndarray, width: int) -> np.ndarray:
    """Mirror rows of ``(cx, cy, w, h, pitch, yaw, roll)`` about the vertical axis."""
    out = labels.copy()
    out[:, 0] = width - out[:, 0]
    out[:, 5] = -out[:, 5]
    out[:, 5][out[:, 5] == -180.0] = 180.0
    out[:, 6] = -out[:, 6]
    return out


def to_tensor(images) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def make_batch(ds: HeadDataset, idx, rng: np.random.Generator | None, aug: AugmentConfig | None):
    images, rows = [], []
    for b, i in enumerate(idx):
        img, lab = ds.images[i], ds.labels[i]
        if aug is not None:
            img = photometric(img, rng, aug)
            if aug.fliplr and rng.random() < 0.5:
                img = img[:, ::-1]
                lab = flip_labels(lab, ds.size)
        images.append(img)
        rows.append(np.concatenate([np.full((len(lab), 1), b), lab], axis=1))
    gts = np.concatenate(rows) if rows else np.zeros((0, 8))
    return to_tensor(images), gts


# ---------------------------------------------------------------- model and checkpoints

def resolve_anchors(cfg: TrainConfig, ds: HeadDataset | None) -> AnchorConfig:
    if isinstance(cfg.anchors, (list, tuple)):
        return AnchorConfig(tuple(tuple(tuple(a) for a in level) for level in cfg.anchors))
    if cfg.anchors == "auto" and ds is not None:
        return kmeans_anchors(ds.box_sizes(), seed=cfg.seed)
    return AnchorConfig()


def build_model(anchors: AnchorConfig, cfg: TrainConfig) -> HeadPoseNet:
    return HeadPoseNet(anchors, ModelConfig(cfg.model_width, cfg.model_depth))


def _atomic_save(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(path, model: HeadPoseNet, cfg: TrainConfig, epoch: int, optimizer=None, extra=None) -> None:
    obj = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "epoch": epoch,
        "model": model.state_dict(),
        "anchors": model.anchors.to_dict(),
        "model_cfg": asdict(model.cfg),
        "input_size": cfg.input_size,
        "normalization": NORMALIZATION,
        "config": cfg.to_dict(),
    }
    if optimizer is not None:
        obj["optimizer"] = optimizer.state_dict()
    if extra:
        obj.update(extra)
    _atomic_save(obj, Path(path))


def load_checkpoint(path) -> tuple[HeadPoseNet, dict]:
    try:
        ck = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise ConfigValidationError(f"cannot read checkpoint {path}: {e}") from e
    if ck.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigValidationError(f"{path}: unsupported checkpoint schema {ck.get('schema_version')}")
    if ck.get("normalization") != NORMALIZATION:
        raise ConfigValidationError(f"{path}: unknown input normalization {ck.get('normalization')}")
    mc = ck["model_cfg"]
    model = HeadPoseNet(AnchorConfig.from_dict(ck["anchors"]),
                        ModelConfig(mc["width"], mc["depth"], tuple(mc["base_channels"])))
    model.load_state_dict(ck["model"])
    model.eval()
    return model, ck


# ---------------------------------------------------------------- inference

@torch.no_grad()
def detect(model: HeadPoseNet, images: torch.Tensor, letterboxes, tau_iou: float = TAU_IOU,
           conf_floor: float = CONF_FLOOR, max_det: int = MAX_DETECTIONS) -> list:
    """Per-image NMS'd detections (confidence >= ``conf_floor``) in original pixels."""
    model.eval()
    grids = model(images)
    out = []
    for b, lb in enumerate(letterboxes):
        dets = decode_detections([g[b] for g in grids], model.anchors, lb, conf_floor)
        if len(dets) > MAX_CANDIDATES:
            dets = sorted(dets, key=lambda d: -d.confidence)[:MAX_CANDIDATES]
        out.append(nms(dets, conf_floor, tau_iou)[:max_det])
    return out


def detections_to_dataset(dets_by_image: dict, images: list, meta: dict | None = None) -> datamodel.DatasetFile:
    anns, k = [], 1
    for rec in images:
        for d in dets_by_image.get(rec.image_id, []):
            x0, y0, x1, y1 = d.box
            anns.append(datamodel.Annotation(k, rec.image_id, (x0, y0, x1 - x0, y1 - y0), d.pose,
                                             min(max(d.confidence, 0.0), 1.0)))
            k += 1
    ds = datamodel.DatasetFile(list(images), anns, dict(meta or {}))
    # rounding to file precision can collapse sub-micro boxes; drop those
    canon = ds.canonical()
    keep = {a.ann_id for a in canon.annotations if a.bbox[2] > 0 and a.bbox[3] > 0}
    ds.annotations = [a for a in anns if a.ann_id in keep]
    return ds


def predict_dataset(model: HeadPoseNet, data: HeadDataset, batch_size: int = 16, tau_iou: float = TAU_IOU,
                    conf_floor: float = CONF_FLOOR) -> datamodel.DatasetFile:
    dets = {}
    for s in range(0, len(data), batch_size):
        idx = list(range(s, min(s + batch_size, len(data))))
        x = to_tensor([data.images[i] for i in idx])
        for i, d in zip(idx, detect(model, x, [data.letterboxes[i] for i in idx], tau_iou, conf_floor)):
            dets[data.image_ids[i]] = d
    return detections_to_dataset(dets, sorted(data.ds.images, key=lambda r: r.image_id),
                                 {"generator": "mphpe.predict", "kind": "prediction"})


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def predict_images(weights, image_dir, batch_size: int = 16, tau_iou: float = TAU_IOU,
                   conf_floor: float = CONF_FLOOR, id_map: dict | None = None) -> datamodel.DatasetFile:
    """Run a checkpoint over every image in ``image_dir``.

    Image ids come from ``id_map`` (file name -> id) when given, else from
    numeric file stems, else from sorted order starting at 1.
    """
    model, ck = load_checkpoint(weights)
    size = ck["input_size"]
    root = Path(image_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {root} not found")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {root}")
    numeric = all(p.stem.isdigit() for p in files)
    records, arrays, lbs = [], [], []
    for k, p in enumerate(files, start=1):
        if id_map is not None:
            if p.name not in id_map:
                continue
            img_id = id_map[p.name]
        else:
            img_id = int(p.stem) if numeric else k
        arr, lb = load_image(p, size)
        records.append(datamodel.ImageRecord(img_id, p.name, lb.width, lb.height))
        arrays.append(arr)
        lbs.append(lb)
    dets = {}
    for s in range(0, len(records), batch_size):
        sl = slice(s, s + batch_size)
        for rec, d in zip(records[sl], detect(model, to_tensor(arrays[sl]), lbs[sl], tau_iou, conf_floor)):
            dets[rec.image_id] = d
    return detections_to_dataset(dets, records, {"generator": "mphpe.predict", "weights": str(weights)})


# ---------------------------------------------------------------- training

def lr_at(cfg: TrainConfig, epoch_float: float) -> float:
    """Cosine decay from ``lr0`` to ``lr0 * lrf`` over the run."""
    e = min(max(epoch_float / cfg.epochs, 0.0), 1.0)
    return cfg.lr0 * (cfg.lrf + (1 - cfg.lrf) * 0.5 * (1 + math.cos(math.pi * e)))


def _param_groups(model):
    decay, no_decay, bias = [], [], []
    for m in model.modules():
        if hasattr(m, "bias") and isinstance(m.bias, torch.nn.Parameter):
            bias.append(m.bias)
        if isinstance(m, torch.nn.BatchNorm2d):
            no_decay.append(m.weight)
        elif hasattr(m, "weight") and isinstance(m.weight, torch.nn.Parameter):
            decay.append(m.weight)
    return decay, no_decay, bias


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.SGD:
    decay, no_decay, bias = _param_groups(model)
    return torch.optim.SGD([
        {"params": no_decay, "weight_decay": 0.0, "kind": "weight"},
        {"params": decay, "weight_decay": cfg.weight_decay, "kind": "weight"},
        {"params": bias, "weight_decay": 0.0, "kind": "bias"},
    ], lr=cfg.lr0, momentum=cfg.momentum, nesterov=True)


def _set_schedule(opt, cfg: TrainConfig, it: int, n_warm: int, epoch_float: float) -> None:
    target = lr_at(cfg, epoch_float)
    for g in opt.param_groups:
        if it < n_warm:
            # linear warmup: bias lr falls from warmup_bias_lr, weights rise from 0
            start = cfg.warmup_bias_lr if g["kind"] == "bias" else 0.0
            g["lr"] = float(np.interp(it, [0, n_warm], [start, target]))
            g["momentum"] = float(np.interp(it, [0, n_warm], [cfg.warmup_momentum, cfg.momentum]))
        else:
            g["lr"] = target
            g["momentum"] = cfg.momentum


def configure_determinism(seed: int, threads: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics: list
    diverged: bool = False
    error: str | None = None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def validate_model(model, val: HeadDataset, cfg: TrainConfig, mode: str = "full"):
    pred = predict_dataset(model, val, cfg.batch_size, cfg.tau_iou)
    return evaluate(pred, val.ds, mode, cfg.tau_conf), pred


def _metrics_row(epoch: int, parts: dict, report) -> dict:
    row = {"epoch": epoch, "l_box": parts["l_box"], "l_obj": parts["l_obj"], "l_pose": parts["l_pose"],
           "loss": parts["loss"]}
    if report is not None:
        m = report.mae or {}
        for k in ("pitch", "yaw", "roll", "avg"):
            row[f"val_mae_{k}"] = m.get(k)
        row["val_ap"] = report.ap
        row["val_ap50"] = report.ap50
        row["p_m"] = report.p_m
    return row


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def train(cfg: TrainConfig, resume=None, train_data: HeadDataset | None = None,
          val_data: HeadDataset | None = None) -> TrainResult:
    """Train and checkpoint every epoch under ``cfg.out``.

    Writes ``last.pt`` (overwritten only after a finite epoch), ``metrics.jsonl``
    and ``config.json``. A non-finite loss stops the run and leaves the last
    good checkpoint in place.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    configure_determinism(cfg.seed, cfg.threads)
    train_data = train_data or HeadDataset.from_file(cfg.train, cfg.input_size)
    if val_data is None and cfg.val:
        val_data = HeadDataset.from_file(cfg.val, cfg.input_size)
    if len(train_data) == 0:
        raise ConfigValidationError("training set has no images")
    anchors = resolve_anchors(cfg, train_data)
    model = build_model(anchors, cfg)
    opt = make_optimizer(model, cfg)
    ckpt_path = out / "last.pt"
    log_path = out / "metrics.jsonl"
    history: list = []
    start_epoch = 0
    if resume:
        model, ck = load_checkpoint(resume)
        opt = make_optimizer(model, cfg)
        if "optimizer" in ck:
            opt.load_state_dict(ck["optimizer"])
        start_epoch = ck["epoch"]
        history = list(ck.get("history", []))
        torch.set_rng_state(ck["torch_rng"])
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))

    n = len(train_data)
    nb = math.ceil(n / cfg.batch_size)
    n_warm = max(round(cfg.warmup_epochs * nb), 100) if cfg.warmup_epochs > 0 else 0
    result = TrainResult(out, ckpt_path, history)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        rng = _epoch_rng(cfg.seed, epoch)
        perm = rng.permutation(n)
        sums = {"l_box": 0.0, "l_obj": 0.0, "l_pose": 0.0, "loss": 0.0}
        try:
            for bi in range(nb):
                idx = perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                it = epoch * nb + bi
                _set_schedule(opt, cfg, it, n_warm, epoch + bi / nb)
                x, gts = make_batch(train_data, idx, rng, cfg.augment)
                preds = model(x)
                targets = build_targets(gts, anchors, [p.shape[-2:] for p in preds], neighbours=cfg.neighbours)
                parts = compute_loss(preds, targets, cfg.loss, cfg.wrapped)
                opt.zero_grad(set_to_none=True)
                parts.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), 10.0)
                opt.step()
                for k, v in parts.as_floats().items():
                    sums[k] += v / nb
        except TrainingDivergenceError as e:
            log.error("epoch %d diverged: %s; keeping %s", epoch + 1, e, ckpt_path)
            result.diverged, result.error = True, str(e)
            return result
        report = None
        if val_data is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            report, _ = validate_model(model, val_data, cfg)
        row = {k: _clean(v) for k, v in _metrics_row(epoch + 1, sums, report).items()}
        history.append(row)
        with log_path.open("a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
        save_checkpoint(ckpt_path, model, cfg, epoch + 1, opt,
                        {"history": history, "torch_rng": torch.get_rng_state()})
        log.info("epoch %d/%d %.1fs loss %.4f%s", epoch + 1, cfg.epochs, time.perf_counter() - t0, sums["loss"],
                 "" if report is None else " | " + report.summary())
    return result


def read_metrics(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- sweeps

SWEEP_KEYS = ("loss.tau", "loss.gamma", "wrapped")


def expand_grid(grid: dict) -> list:
    """``{"loss.tau": [..], "wrapped": [..]}`` -> list of override dicts (cartesian product)."""
    if not grid:
        raise ConfigValidationError("sweep grid is empty")
    for k, vals in grid.items():
        if k not in SWEEP_KEYS:
            raise ConfigValidationError(f"sweep key '{k}' not one of {SWEEP_KEYS}")
        if not isinstance(vals, list) or not vals:
            raise ConfigValidationError(f"sweep values for '{k}' must be a non-empty list")
    settings = [{}]
    for k in sorted(grid):
        settings = [dict(s, **{k: v}) for s in settings for v in grid[k]]
    return settings


def _setting_name(setting: dict) -> str:
    return "_".join(f"{k.split('.')[-1]}={v}" for k, v in sorted(setting.items()))


def ablation_sweep(cfg: TrainConfig, grid: dict, out_dir=None) -> list:
    """One run per grid setting with identical seeds; failures are recorded as rows."""
    settings = expand_grid(grid)
    root = Path(out_dir or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    train_data = HeadDataset.from_file(cfg.train, cfg.input_size)
    val_data = HeadDataset.from_file(cfg.val, cfg.input_size) if cfg.val else None
    rows = []
    for setting in settings:
        name = _setting_name(setting)
        row = {"setting": setting, "name": name, "status": "ok"}
        try:
            run_cfg = cfg.with_overrides(dict(setting, out=str(root / name)))
            res = train(run_cfg, train_data=train_data, val_data=val_data)
            if res.diverged:
                row["status"], row["error"] = "diverged", res.error
            last = res.metrics[-1] if res.metrics else {}
            for k in ("val_mae_pitch", "val_mae_yaw", "val_mae_roll", "val_mae_avg", "val_ap", "val_ap50", "p_m"):
                row[k] = last.get(k)
        except Exception as e:  # noqa: BLE001 - a failed run must not stop the sweep
            log.exception("sweep setting %s failed", name)
            row["status"], row["error"] = "failed", f"{type(e).__name__}: {e}"
        rows.append(row)
    (root / "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return rows


def config_copy(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(copy.deepcopy(cfg), **changes)


__all__ = [
    "AugmentConfig", "ConfigValidationError", "Detection", "HeadDataset", "TrainConfig", "TrainResult",
    "ablation_sweep", "detect", "expand_grid", "load_checkpoint", "predict_dataset", "predict_images",
    "read_metrics", "save_checkpoint", "train",
]
