"""Class-incremental task streams built from synthetic shapes or an image folder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .errors import ConfigError, MasksUnavailableError

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")

DEFAULT_COLORS = (
    (0.90, 0.10, 0.10),
    (0.10, 0.75, 0.15),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
)

# area of each shape in units of r**2, r being the half-width of its bounding box
_AREA_COEF = {
    "disk": math.pi,
    "square": 4.0,
    "triangle": 2.0,
    "cross": 2.56,
    "ring": 0.75 * math.pi,
    "diamond": 2.0,
}


@dataclass(frozen=True)
class SyntheticParams:
    shape_vocabulary: tuple[str, ...] = ("disk", "square", "triangle", "cross", "ring")
    color_vocabulary: tuple[tuple[float, float, float], ...] = DEFAULT_COLORS
    background_level: tuple[float, float] = (0.35, 0.65)
    background_noise: float = 0.06
    background_gradient: float = 0.15
    object_noise: float = 0.03
    object_scale_range: tuple[float, float] = (0.10, 0.40)

    @property
    def num_classes(self) -> int:
        return len(self.shape_vocabulary) * len(self.color_vocabulary)

    def class_appearance(self, class_id: int) -> tuple[str, tuple[float, float, float]]:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(
                f"class {class_id} outside synthetic vocabulary of {self.num_classes} classes")
        n_colors = len(self.color_vocabulary)
        return self.shape_vocabulary[class_id // n_colors], tuple(self.color_vocabulary[class_id % n_colors])


@dataclass(frozen=True)
class ScenarioSpec:
    total_classes: int
    num_tasks: int
    base_classes: int = 0
    shots_per_class: int | Literal["all"] = "all"
    ways_per_task: int | None = None
    image_size: tuple[int, int] = (32, 32)
    seed: int = 0
    source: Literal["synthetic", "folder"] = "synthetic"
    folder: str | None = None
    train_per_class: int = 50
    test_per_class: int = 20
    test_fraction: float = 0.3
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)

    @property
    def ways(self) -> int:
        if self.ways_per_task is not None:
            return self.ways_per_task
        if self.base_classes > 0:
            return (self.total_classes - self.base_classes) // max(self.num_tasks - 1, 1)
        return self.total_classes // self.num_tasks

    @property
    def few_shot(self) -> bool:
        return self.base_classes > 0

    def validate(self) -> None:
        T, b, C, n = self.num_tasks, self.base_classes, self.ways, self.total_classes
        if n < 1 or T < 1:
            raise ConfigError("total_classes and num_tasks must be positive")
        if b < 0:
            raise ConfigError("base_classes must be non-negative")
        if C < 1:
            raise ConfigError("ways_per_task must be positive")
        if b > 0:
            if b + (T - 1) * C != n:
                raise ConfigError(
                    f"b + (T-1)*C = total_classes violated: {b} + ({T}-1)*{C} != {n}")
        elif T * C != n:
            raise ConfigError(f"T*C = total_classes violated: {T}*{C} != {n}")
        if self.shots_per_class != "all" and int(self.shots_per_class) < 1:
            raise ConfigError("shots_per_class must be positive or 'all'")
        H, W = self.image_size
        if H < 1 or W < 1:
            raise ConfigError("image_size must be positive")
        if self.source == "synthetic":
            if self.synthetic.num_classes < n:
                raise ConfigError(
                    f"|shapes| x |colors| >= total_classes violated: "
                    f"{self.synthetic.num_classes} < {n}")
            unknown = set(self.synthetic.shape_vocabulary) - set(SHAPES)
            if unknown:
                raise ConfigError(f"unknown shapes {sorted(unknown)}; known: {SHAPES}")
            if self.shots_per_class != "all" and self.shots_per_class > self.train_per_class:
                raise ConfigError("shots_per_class exceeds train_per_class")
            lo, hi = self.synthetic.object_scale_range
            if not 0 < lo <= hi < 1:
                raise ConfigError("object_scale_range must satisfy 0 < lo <= hi < 1")
        elif self.source == "folder":
            if not self.folder:
                raise ConfigError("source 'folder' requires a folder path")
        else:
            raise ConfigError(f"unknown source {self.source!r}")


class Split:
    """Immutable (image, label, mask) collection stored as stacked arrays.

    Images are N x H x W x 3 float32 in [0, 1]; masks are N x H x W bool or None.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, masks: np.ndarray | None):
        if masks is not None and len(masks) and not masks.reshape(len(masks), -1).any(axis=1).all():
            raise ValueError("every mask must contain at least one object pixel")
        self.images = images
        self.labels = labels.astype(np.int64)
        self.masks = masks
        for a in (self.images, self.labels, self.masks):
            if a is not None:
                a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        mask = None if self.masks is None else self.masks[i]
        return self.images[i], int(self.labels[i]), mask

    @property
    def has_masks(self) -> bool:
        return self.masks is not None

    def image_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Images as an N x 3 x H x W tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.images.transpose(0, 3, 1, 2))).to(dtype)

    def label_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.labels.copy())

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        masks = None if self.masks is None else self.masks[idx]
        return Split(self.images[idx], self.labels[idx], masks)


@dataclass(frozen=True)
class TaskData:
    task_id: int
    class_ids: tuple[int, ...]
    train: Split
    test: Split


def _shape_mask(shape: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        w = 0.4 * r
        return (((np.abs(dx) <= w) & (np.abs(dy) <= r))
                | ((np.abs(dy) <= w) & (np.abs(dx) <= r)))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= 0.25 * r * r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def generate_synthetic_sample(class_id: int, params: SyntheticParams, rng: np.random.Generator,
                              image_size: tuple[int, int] = (32, 32)) -> tuple[np.ndarray, np.ndarray]:
    """Render one shape of the class's (shape, color) on a textured background.

    Returns an H x W x 3 float32 image and the H x W boolean mask of the
    shape's pixels. The mask covers a fraction of the image inside
    ``params.object_scale_range``.
    """
    shape, color = params.class_appearance(class_id)
    H, W = image_size
    lo, hi = params.object_scale_range
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    for _ in range(100):
        frac = rng.uniform(lo, hi)
        r = min(math.sqrt(frac * H * W / _AREA_COEF[shape]), min(H, W) / 2)
        cy = rng.uniform(r, H - r)
        cx = rng.uniform(r, W - r)
        mask = _shape_mask(shape, yy, xx, cy, cx, r)
        area = mask.mean()
        if lo <= area <= hi and 0 < mask.sum() < H * W:
            break
    else:
        raise RuntimeError(f"could not place a {shape} within scale range {lo}-{hi} at {H}x{W}")

    level = rng.uniform(*params.background_level)
    gy, gx = rng.uniform(-1, 1, size=2) * params.background_gradient
    bg = level + gy * (yy / H - 0.5) + gx * (xx / W - 0.5)
    img = np.repeat(bg[..., None], 3, axis=2)
    img += rng.normal(0.0, params.background_noise, size=img.shape)
    obj = np.asarray(color)[None, None, :] + rng.normal(0.0, params.object_noise, size=img.shape)
    img = np.where(mask[..., None], obj, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _task_classes(spec: ScenarioSpec) -> list[list[int]]:
    perm = np.random.default_rng([spec.seed, 0xC1A55]).permutation(spec.total_classes)
    if spec.few_shot:
        chunks = [perm[:spec.base_classes]]
        rest = perm[spec.base_classes:]
        chunks += [rest[i * spec.ways:(i + 1) * spec.ways] for i in range(spec.num_tasks - 1)]
    else:
        chunks = [perm[i * spec.ways:(i + 1) * spec.ways] for i in range(spec.num_tasks)]
    return [sorted(int(c) for c in ch) for ch in chunks]


def _synthetic_class_data(spec: ScenarioSpec, class_id: int, split: int, count: int):
    imgs = np.empty((count, *spec.image_size, 3), dtype=np.float32)
    masks = np.empty((count, *spec.image_size), dtype=bool)
    for j in range(count):
        rng = np.random.default_rng([spec.seed, class_id, split, j])
        imgs[j], masks[j] = generate_synthetic_sample(class_id, spec.synthetic, rng, spec.image_size)
    return imgs, masks


def _load_png(path: Path, size: tuple[int, int], mask: bool = False) -> np.ndarray:
    from PIL import Image

    H, W = size
    with Image.open(path) as im:
        if mask:
            im = im.convert("L").resize((W, H), Image.NEAREST)
            return np.asarray(im) > 127
        im = im.convert("RGB").resize((W, H), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _folder_class_data(spec: ScenarioSpec, class_dir: Path):
    files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() == ".png" and p.is_file())
    if not files:
        raise ConfigError(f"class directory {class_dir} contains no .png images")
    imgs = np.stack([_load_png(p, spec.image_size) for p in files])
    mask_dir = class_dir / "masks"
    masks = None
    if mask_dir.is_dir() and all((mask_dir / p.name).is_file() for p in files):
        masks = np.stack([_load_png(mask_dir / p.name, spec.image_size, mask=True) for p in files])
    return imgs, masks


def _split_indices(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = min(max(1, int(round(frac * n))), n - 1) if n >= 2 else 0
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def build_scenario(spec: ScenarioSpec, require_masks: bool = False) -> list[TaskData]:
    """Build the ordered list of class-incremental tasks described by ``spec``.

    Class-to-task assignment is a seeded permutation. In the few-shot
    protocol the first task holds the ``base_classes`` with all their
    training data, and every later class keeps exactly ``shots_per_class``
    randomly chosen training samples; test sets are never subsampled.
    """
    spec.validate()
    class_dirs = None
    if spec.source == "folder":
        root = Path(spec.folder)
        if not root.is_dir():
            raise ConfigError(f"dataset folder {root} does not exist")
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if len(class_dirs) < spec.total_classes:
            raise ConfigError(
                f"{root} holds {len(class_dirs)} class directories, need {spec.total_classes}")

    shot_rng = np.random.default_rng([spec.seed, 0x5407])
    tasks = []
    for k, classes in enumerate(_task_classes(spec), start=1):
        parts = {"train": [], "test": []}
        for c in classes:
            if spec.source == "synthetic":
                tr_img, tr_mask = _synthetic_class_data(spec, c, 0, spec.train_per_class)
                te_img, te_mask = _synthetic_class_data(spec, c, 1, spec.test_per_class)
            else:
                imgs, masks = _folder_class_data(spec, class_dirs[c])
                tr, te = _split_indices(len(imgs), spec.test_fraction,
                                        np.random.default_rng([spec.seed, c, 0x7E57]))
                tr_img, te_img = imgs[tr], imgs[te]
                tr_mask = None if masks is None else masks[tr]
                te_mask = None if masks is None else masks[te]
            limit_shots = spec.shots_per_class != "all" and (not spec.few_shot or k > 1)
            if limit_shots:
                K = int(spec.shots_per_class)
                if K > len(tr_img):
                    raise ConfigError(f"class {c} has {len(tr_img)} training images, fewer than K={K}")
                keep = np.sort(shot_rng.choice(len(tr_img), size=K, replace=False))
                tr_img = tr_img[keep]
                tr_mask = None if tr_mask is None else tr_mask[keep]
            parts["train"].append((tr_img, c, tr_mask))
            parts["test"].append((te_img, c, te_mask))

        splits = {}
        for name, items in parts.items():
            imgs = np.concatenate([it[0] for it in items])
            labels = np.concatenate([np.full(len(it[0]), it[1]) for it in items])
            if any(it[2] is None for it in items):
                masks = None
            else:
                masks = np.concatenate([it[2] for it in items])
            splits[name] = Split(imgs, labels, masks)
        if require_masks and not (splits["train"].has_masks and splits["test"].has_masks):
            raise MasksUnavailableError(
                f"masks unavailable for task {k}: pointing-game evaluation needs "
                f"<class>/masks/<image>.png for every image")
        tasks.append(TaskData(k, tuple(classes), splits["train"], splits["test"]))
    return tasks
