"""Deterministic generator of soccer-like synthetic scenes with exact ground truth.

Scenes are textured green fields with frequent medium "players", occasional
"referees", rare small "balls", and unannotated distractor blobs that reuse
class colors at reduced saturation.  Distractors are what make a trained
detector produce genuine mid-confidence false positives, which is the regime
where the doubt-band policies differ from plain thresholding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .annotations import Annotation, BoundingBox, ClassCatalog, Dataset, ImageRecord
from .errors import ValidationError
from .raster import write_raster

GAME_BLOCK = 50  # consecutive images sharing one game id

SHAPE_ELLIPSE = "ellipse"
SHAPE_RECT = "rect"


@dataclass(frozen=True)
class ObjectClassSpec:
    """Appearance and placement parameters for one synthetic class."""

    name: str
    frequency: float          # expected objects per image (Poisson mean)
    w_range: tuple[float, float]
    h_range: tuple[float, float]
    color: tuple[float, float, float]
    color_jitter: float
    shape: str = SHAPE_ELLIPSE

    def __post_init__(self):
        if self.frequency < 0:
            raise ValidationError(f"{self.name}: negative frequency")
        if self.w_range[0] <= 0 or self.h_range[0] <= 0:
            raise ValidationError(f"{self.name}: size ranges must be positive")
        if self.shape not in (SHAPE_ELLIPSE, SHAPE_RECT):
            raise ValidationError(f"{self.name}: unknown shape {self.shape!r}")


def _default_classes() -> tuple[ObjectClassSpec, ...]:
    # sizes are large relative to the anchor stride so that offset duplicate
    # detections overlap the best box enough for suppression to remove them,
    # and narrow per class so color implies scale
    return (
        ObjectClassSpec("player", 6.0, (18.0, 26.0), (26.0, 36.0), (190.0, 40.0, 45.0), 22.0),
        ObjectClassSpec("referee", 0.8, (15.0, 21.0), (20.0, 28.0), (230.0, 205.0, 40.0), 20.0,
                        shape=SHAPE_RECT),
        ObjectClassSpec("ball", 0.7, (5.0, 8.0), (5.0, 8.0), (235.0, 235.0, 235.0), 14.0),
    )


@dataclass(frozen=True)
class WorldConfig:
    width: int = 128
    height: int = 128
    classes: tuple[ObjectClassSpec, ...] = field(default_factory=_default_classes)
    background: tuple[float, float, float] = (45.0, 120.0, 55.0)
    texture_amplitude: float = 10.0
    occlusion_allowance: float = 0.3
    clutter_rate: float = 1.5
    distractor_saturation: tuple[float, float] = (0.3, 0.7)

    def __post_init__(self):
        if not (0.0 <= self.occlusion_allowance < 1.0):
            raise ValidationError(f"occlusion_allowance {self.occlusion_allowance} outside [0, 1)")
        if self.clutter_rate < 0:
            raise ValidationError("clutter_rate must be >= 0")

    @property
    def catalog(self) -> ClassCatalog:
        return ClassCatalog.from_names([c.name for c in self.classes])

    def to_json_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "background": list(self.background),
            "texture_amplitude": self.texture_amplitude,
            "occlusion_allowance": self.occlusion_allowance,
            "clutter_rate": self.clutter_rate,
            "distractor_saturation": list(self.distractor_saturation),
            "classes": [
                {
                    "name": c.name,
                    "frequency": c.frequency,
                    "w_range": list(c.w_range),
                    "h_range": list(c.h_range),
                    "color": list(c.color),
                    "color_jitter": c.color_jitter,
                    "shape": c.shape,
                }
                for c in self.classes
            ],
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "WorldConfig":
        kwargs = {k: v for k, v in raw.items() if k in (
            "width", "height", "texture_amplitude", "occlusion_allowance", "clutter_rate")}
        if "background" in raw:
            kwargs["background"] = tuple(raw["background"])
        if "distractor_saturation" in raw:
            kwargs["distractor_saturation"] = tuple(raw["distractor_saturation"])
        if "classes" in raw:
            kwargs["classes"] = tuple(
                ObjectClassSpec(
                    name=c["name"],
                    frequency=c["frequency"],
                    w_range=tuple(c["w_range"]),
                    h_range=tuple(c["h_range"]),
                    color=tuple(c["color"]),
                    color_jitter=c["color_jitter"],
                    shape=c.get("shape", SHAPE_ELLIPSE),
                )
                for c in raw["classes"]
            )
        return cls(**kwargs)


def object_mask(shape: str, box: tuple[float, float, float, float],
                width: int, height: int) -> np.ndarray:
    """Boolean footprint of an object over the pixel grid.

    A pixel belongs to the object when its center lies inside the continuous
    shape, so the rendered extent tracks the box to within half a pixel.
    """
    x, y, w, h = box
    mask = np.zeros((height, width), dtype=bool)
    x0, x1 = max(int(math.floor(x)), 0), min(int(math.ceil(x + w)), width)
    y0, y1 = max(int(math.floor(y)), 0), min(int(math.ceil(y + h)), height)
    if x1 <= x0 or y1 <= y0:
        return mask
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    if shape == SHAPE_RECT:
        inside_x = (xs >= x) & (xs <= x + w)
        inside_y = (ys >= y) & (ys <= y + h)
        mask[y0:y1, x0:x1] = inside_y[:, None] & inside_x[None, :]
    else:
        cx, cy = x + w / 2.0, y + h / 2.0
        a, b = w / 2.0, h / 2.0
        nx = (xs - cx) / a
        ny = (ys - cy) / b
        mask[y0:y1, x0:x1] = (nx[None, :] ** 2 + ny[:, None] ** 2) <= 1.0
    return mask


def _sample_color(rng: np.random.Generator, base: tuple[float, float, float],
                  jitter: float) -> np.ndarray:
    c = np.asarray(base) + rng.uniform(-jitter, jitter, size=3)
    return np.clip(c, 0.0, 255.0)


def _paint(pixels: np.ndarray, mask: np.ndarray, color: np.ndarray,
           rng: np.random.Generator) -> None:
    n = int(mask.sum())
    if n == 0:
        return
    noise = rng.uniform(-6.0, 6.0, size=(n, 3))
    pixels[mask] = np.clip(color[None, :] + noise, 0.0, 255.0).astype(np.uint8)


_SHELL = 2.5  # object shell thickness in pixels


def _paint_object(pixels: np.ndarray, shape: str, box: tuple[float, float, float, float],
                  color: np.ndarray, base: np.ndarray, rng: np.random.Generator) -> None:
    """Draw one object as a colored shell with a faintly tinted interior.

    Hollow bodies keep box statistics monotone in how much of the object a
    box covers: a tight box sees the whole shell, while a crop from the
    interior sees mostly background-like fill.  With filled shapes, interior
    crops look like purer instances of the class than the true box does, and
    no box-level color statistic can rank them below it.
    """
    x, y, w, h = box
    height, width = pixels.shape[:2]
    mask = object_mask(shape, box, width, height)
    if w > 2 * _SHELL + 2 and h > 2 * _SHELL + 2:
        inner = object_mask(
            shape, (x + _SHELL, y + _SHELL, w - 2 * _SHELL, h - 2 * _SHELL), width, height)
        _paint(pixels, mask & ~inner, color, rng)
        _paint(pixels, inner, 0.25 * color + 0.75 * base, rng)
    else:
        _paint(pixels, mask, color, rng)


def _box_iou_xywh(a: tuple, b: tuple) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def generate_scene(cfg: WorldConfig, seed: int) -> tuple[np.ndarray, list[Annotation]]:
    """Render one scene; identical (cfg, seed) yields bit-identical output.

    Returned annotations carry image_id 0; dataset assembly re-keys them.
    """
    rng = np.random.default_rng(seed)
    W, H = cfg.width, cfg.height

    # textured background: coarse blotches plus fine per-pixel noise
    base = np.asarray(cfg.background)
    coarse = rng.uniform(-cfg.texture_amplitude, cfg.texture_amplitude,
                         size=((H + 15) // 16, (W + 15) // 16, 1))
    coarse = np.kron(coarse, np.ones((16, 16, 1)))[:H, :W]
    fine = rng.uniform(-4.0, 4.0, size=(H, W, 3))
    pixels = np.clip(base[None, None, :] + coarse + fine, 0.0, 255.0).astype(np.uint8)

    # distractor blobs first, so annotated objects paint over them
    n_clutter = rng.poisson(cfg.clutter_rate)
    for _ in range(n_clutter):
        spec = cfg.classes[rng.integers(len(cfg.classes))] if cfg.classes else None
        if spec is None:
            break
        scale = rng.uniform(0.7, 1.3)
        w = rng.uniform(*spec.w_range) * scale
        h = rng.uniform(*spec.h_range) * scale
        if w >= W or h >= H:
            continue
        x = rng.uniform(0.0, W - w)
        y = rng.uniform(0.0, H - h)
        color = _sample_color(rng, spec.color, spec.color_jitter)
        gray = color.mean()
        sat = rng.uniform(*cfg.distractor_saturation)
        color = gray + (color - gray) * sat
        shape = SHAPE_ELLIPSE if rng.random() < 0.5 else SHAPE_RECT
        _paint_object(pixels, shape, (x, y, w, h), color, base, rng)

    annotations: list[Annotation] = []
    placed: list[tuple[float, float, float, float]] = []
    ann_id = 1
    for class_id, spec in enumerate(cfg.classes, start=1):
        count = rng.poisson(spec.frequency)
        for _ in range(count):
            for _attempt in range(50):
                w = rng.uniform(*spec.w_range)
                h = rng.uniform(*spec.h_range)
                if w >= W or h >= H:
                    continue
                x = rng.uniform(0.0, W - w)
                y = rng.uniform(0.0, H - h)
                box = (x, y, w, h)
                if all(_box_iou_xywh(box, other) <= cfg.occlusion_allowance for other in placed):
                    break
            else:
                continue  # crowded scene: skip this object
            placed.append(box)
            color = _sample_color(rng, spec.color, spec.color_jitter)
            _paint_object(pixels, spec.shape, box, color, base, rng)
            annotations.append(Annotation(
                ann_id=ann_id,
                image_id=0,
                class_id=class_id,
                box=BoundingBox(*(round(v, 6) for v in box)),
            ))
            ann_id += 1
    return pixels, annotations


def scene_seed(dataset_seed: int, image_index: int) -> int:
    """Stable per-image seed so generation order never matters."""
    ss = np.random.SeedSequence([int(dataset_seed), int(image_index)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(cfg: WorldConfig, n_images: int, seed: int, out_dir: str | Path,
                     prefix: str = "img") -> Dataset:
    """Generate scenes, write raster files under ``out_dir``, return the dataset.

    Game ids are assigned in blocks of 50 consecutive images to give the
    match-level split something real to act on.
    """
    if n_images < 1:
        raise ValidationError("n_images must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    next_ann = 1
    for i in range(n_images):
        pixels, anns = generate_scene(cfg, scene_seed(seed, i))
        fname = f"{prefix}_{i:05d}.ras"
        write_raster(out_dir / fname, pixels)
        image_id = i + 1
        images.append(ImageRecord(
            image_id=image_id,
            file=fname,
            width=cfg.width,
            height=cfg.height,
            game_id=f"game_{i // GAME_BLOCK:03d}",
        ))
        for a in anns:
            annotations.append(replace(a, ann_id=next_ann, image_id=image_id))
            next_ann += 1
    return Dataset("labeled", cfg.catalog, tuple(images), tuple(annotations), base_dir=out_dir)


def without_annotations(d: Dataset) -> Dataset:
    """Image list only, as fed to pseudo-label generation."""
    return Dataset("labeled", d.catalog, d.images, (), d.base_dir)
