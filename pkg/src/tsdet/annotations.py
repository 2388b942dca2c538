"""Data model for images and annotations, manifest file I/O, and dataset operations.

A manifest is a JSON file with a fixed canonical serialization (stable field
order, one record per line, floats with 6 decimal digits) so that written
files are byte-reproducible and diff-friendly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ManifestError, ValidationError

MANIFEST_VERSION = "1.0"

KIND_LABELED = "labeled"
KIND_PSEUDO = "pseudo"
KIND_DETECTIONS = "detections"
_KINDS = (KIND_LABELED, KIND_PSEUDO, KIND_DETECTIONS)

STATUS_KEEP = "keep"
STATUS_IGNORE = "ignore"
STATUS_DROP = "drop"
_STATUSES = (STATUS_KEEP, STATUS_IGNORE, STATUS_DROP)

ORIGIN_LABELED = "labeled"
ORIGIN_PSEUDO = "pseudo"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box stored as top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box must have positive size, got w={self.w}, h={self.h}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner form used by the geometry kernels."""
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered foreground classes; id 0 is reserved for background."""

    classes: tuple[tuple[int, str], ...]

    def __post_init__(self):
        ids = [cid for cid, _ in self.classes]
        names = [name for _, name in self.classes]
        if ids != list(range(1, len(ids) + 1)):
            raise ValidationError(f"class ids must be contiguous starting at 1, got {ids}")
        if len(set(names)) != len(names):
            raise ValidationError(f"class names must be unique, got {names}")

    @classmethod
    def from_names(cls, names: list[str] | tuple[str, ...]) -> "ClassCatalog":
        return cls(tuple((i + 1, n) for i, n in enumerate(names)))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _ in self.classes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.classes)

    def name_of(self, class_id: int) -> str:
        for cid, name in self.classes:
            if cid == class_id:
                return name
        raise KeyError(class_id)

    def __contains__(self, class_id: int) -> bool:
        return 1 <= class_id <= len(self.classes)

    def __len__(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    file: str
    width: int
    height: int
    game_id: str

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    """Ground-truth or pseudo-label annotation.

    ``score`` is the teacher confidence (pseudo labels only).  ``status`` and
    ``weight`` are assigned by a weight policy: keep annotations carry the
    loss weight, ignore/drop annotations carry none.
    """

    ann_id: int
    image_id: int
    class_id: int
    box: BoundingBox
    score: float | None = None
    status: str | None = None
    weight: float | None = None

    def __post_init__(self):
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"annotation {self.ann_id}: score {self.score} outside [0, 1]")
        if self.status is not None and self.status not in _STATUSES:
            raise ValidationError(f"annotation {self.ann_id}: unknown status {self.status!r}")
        if self.status == STATUS_KEEP:
            if self.weight is None:
                raise ValidationError(f"annotation {self.ann_id}: keep status requires a weight")
            if not (0.0 < self.weight <= 1.0):
                raise ValidationError(f"annotation {self.ann_id}: keep weight {self.weight} outside (0, 1]")
        elif self.status in (STATUS_IGNORE, STATUS_DROP):
            if self.weight not in (None, 0.0):
                raise ValidationError(
                    f"annotation {self.ann_id}: status {self.status} must not carry weight {self.weight}"
                )

    @property
    def countable(self) -> bool:
        """True unless the annotation is ignored or dropped by a policy."""
        return self.status not in (STATUS_IGNORE, STATUS_DROP)


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of images plus their annotations.

    ``base_dir`` locates image files relative to the manifest; it is set on
    load/generation and never serialized.
    """

    kind: str
    catalog: ClassCatalog
    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown dataset kind {self.kind!r}")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids in dataset")
        known = set(ids)
        for ann in self.annotations:
            if ann.image_id not in known:
                raise ValidationError(f"annotation {ann.ann_id}: dangling image_id {ann.image_id}")
            if ann.class_id not in self.catalog:
                raise ValidationError(f"annotation {ann.ann_id}: class_id {ann.class_id} not in catalog")
            if self.kind == KIND_LABELED and ann.score is not None:
                raise ValidationError(f"annotation {ann.ann_id}: labeled dataset must not carry scores")
            if self.kind in (KIND_PSEUDO, KIND_DETECTIONS) and ann.score is None:
                raise ValidationError(f"annotation {ann.ann_id}: {self.kind} dataset requires scores")

    def __len__(self) -> int:
        return len(self.images)

    def annotations_of(self, image_id: int) -> tuple[Annotation, ...]:
        return tuple(a for a in self.annotations if a.image_id == image_id)

    def image_path(self, image: ImageRecord) -> Path:
        base = self.base_dir if self.base_dir is not None else Path(".")
        return base / image.file

    def replace_annotations(self, annotations: tuple[Annotation, ...], kind: str | None = None) -> "Dataset":
        return Dataset(kind or self.kind, self.catalog, self.images, annotations, self.base_dir)


@dataclass(frozen=True)
class MixedSample:
    """One training sample of a concatenated dataset, tagged with its origin."""

    image: ImageRecord
    annotations: tuple[Annotation, ...]
    origin: str
    path: Path


@dataclass(frozen=True)
class MixedDataset:
    catalog: ClassCatalog
    samples: tuple[MixedSample, ...]
    id_map: dict[tuple[str, int], int] = field(compare=False)

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Manifest serialization
# ---------------------------------------------------------------------------

def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValidationError(f"non-finite value {v} cannot be serialized")
    if v == 0.0:
        v = 0.0  # normalize -0.0
    return f"{v:.6f}"


def _category_line(cid: int, name: str) -> str:
    return f'{{"id": {cid}, "name": {json.dumps(name)}}}'


def _image_line(im: ImageRecord) -> str:
    return (
        f'{{"id": {im.image_id}, "file": {json.dumps(im.file)}, "width": {im.width}, '
        f'"height": {im.height}, "game_id": {json.dumps(im.game_id)}}}'
    )


def _annotation_line(a: Annotation) -> str:
    bbox = ", ".join(_fmt_float(v) for v in (a.box.x, a.box.y, a.box.w, a.box.h))
    parts = [f'"id": {a.ann_id}', f'"image_id": {a.image_id}', f'"category_id": {a.class_id}',
             f'"bbox": [{bbox}]']
    if a.score is not None:
        parts.append(f'"score": {_fmt_float(a.score)}')
    if a.status is not None:
        parts.append(f'"status": {json.dumps(a.status)}')
    if a.weight is not None:
        parts.append(f'"weight": {_fmt_float(a.weight)}')
    return "{" + ", ".join(parts) + "}"


def _block(lines: list[str]) -> str:
    if not lines:
        return "[]"
    return "[\n" + ",\n".join(lines) + "\n]"


def dumps_manifest(d: Dataset) -> str:
    """Canonical text form: fixed field order, one record per line, 6-decimal floats."""
    cats = _block([_category_line(cid, name) for cid, name in d.catalog.classes])
    images = _block([_image_line(im) for im in d.images])
    anns = _block([_annotation_line(a) for a in d.annotations])
    return (
        "{\n"
        f'"version": {json.dumps(MANIFEST_VERSION)},\n'
        f'"kind": {json.dumps(d.kind)},\n'
        f'"categories": {cats},\n'
        f'"images": {images},\n'
        f'"annotations": {anns}\n'
        "}\n"
    )


def save_manifest(d: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(d), encoding="utf-8")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    return obj[key]


def loads_manifest(text: str, base_dir: Path | None = None) -> Dataset:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest: {e.msg} at line {e.lineno} column {e.colno}") from e
    if not isinstance(raw, dict):
        raise ManifestError("manifest root must be an object")
    version = _require(raw, "version", "manifest")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version!r}")
    kind = _require(raw, "kind", "manifest")
    if kind not in _KINDS:
        raise ManifestError(f"manifest: unknown kind {kind!r}")

    cats = []
    for i, c in enumerate(_require(raw, "categories", "manifest")):
        cats.append((int(_require(c, "id", f"categories[{i}]")), str(_require(c, "name", f"categories[{i}]"))))
    images = []
    for i, im in enumerate(_require(raw, "images", "manifest")):
        where = f"images[{i}]"
        images.append(ImageRecord(
            image_id=int(_require(im, "id", where)),
            file=str(_require(im, "file", where)),
            width=int(_require(im, "width", where)),
            height=int(_require(im, "height", where)),
            game_id=str(_require(im, "game_id", where)),
        ))
    anns = []
    for i, a in enumerate(_require(raw, "annotations", "manifest")):
        where = f"annotations[{i}]"
        bbox = _require(a, "bbox", where)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise ManifestError(f"{where}: bbox must be a 4-element array")
        try:
            box = BoundingBox(*[float(v) for v in bbox])
            ann = Annotation(
                ann_id=int(_require(a, "id", where)),
                image_id=int(_require(a, "image_id", where)),
                class_id=int(_require(a, "category_id", where)),
                box=box,
                score=None if a.get("score") is None else float(a["score"]),
                status=a.get("status"),
                weight=None if a.get("weight") is None else float(a["weight"]),
            )
        except ValidationError as e:
            raise ManifestError(f"{where}: {e}") from e
        anns.append(ann)

    try:
        catalog = ClassCatalog(tuple(cats))
        return Dataset(kind, catalog, tuple(images), tuple(anns), base_dir=base_dir)
    except ValidationError as e:
        raise ManifestError(str(e)) from e


def load_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    return loads_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------------------
# Dataset operations
# ---------------------------------------------------------------------------

def rebase_dataset(d: Dataset, new_dir: str | Path) -> Dataset:
    """Rewrite image file paths relative to ``new_dir``.

    Use before saving a manifest into a directory other than the one its
    image paths are relative to, so the written file resolves on reload.
    """
    import os

    new_dir = Path(new_dir)
    base = d.base_dir if d.base_dir is not None else Path(".")
    images = tuple(
        replace(im, file=os.path.relpath(base / im.file, new_dir)) for im in d.images
    )
    return Dataset(d.kind, d.catalog, images, d.annotations, new_dir)


def split_by_game(d: Dataset, labeled_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition a labeled dataset by game so no game spans both sides.

    The first side receives ceil(fraction * n_games) games, chosen by a seeded
    shuffle of the lexicographically sorted game ids.
    """
    if d.kind != KIND_LABELED:
        raise ValidationError(f"can only split a labeled dataset, got kind {d.kind!r}")
    if not (0.0 < labeled_fraction <= 1.0):
        raise ValidationError(f"labeled_fraction {labeled_fraction} outside (0, 1]")
    games = sorted({im.game_id for im in d.images})
    if len(games) == 1 and labeled_fraction < 1.0:
        raise ValidationError("cannot split one game")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(games))
    n_first = math.ceil(labeled_fraction * len(games))
    first_games = {games[i] for i in order[:n_first]}

    def side(selected: bool) -> Dataset:
        imgs = tuple(im for im in d.images if (im.game_id in first_games) == selected)
        keep_ids = {im.image_id for im in imgs}
        anns = tuple(a for a in d.annotations if a.image_id in keep_ids)
        return Dataset(d.kind, d.catalog, imgs, anns, d.base_dir)

    return side(True), side(False)


def class_distribution(d: Dataset) -> dict[int, int]:
    """Countable annotations per class; classes absent from the data map to 0."""
    counts = {cid: 0 for cid in d.catalog.ids}
    for a in d.annotations:
        if a.countable:
            counts[a.class_id] += 1
    return counts


def concat(labeled: Dataset, pseudo: Dataset) -> MixedDataset:
    """Concatenate a labeled and a pseudo dataset into one sample sequence.

    Image ids are re-keyed to be globally unique; the (origin, old_id) -> new_id
    mapping is recorded on the result.
    """
    if labeled.catalog != pseudo.catalog:
        raise ValidationError("catalog mismatch between labeled and pseudo datasets")
    samples: list[MixedSample] = []
    id_map: dict[tuple[str, int], int] = {}
    next_id = 1
    for origin, ds in ((ORIGIN_LABELED, labeled), (ORIGIN_PSEUDO, pseudo)):
        by_image: dict[int, list[Annotation]] = {im.image_id: [] for im in ds.images}
        for a in ds.annotations:
            by_image[a.image_id].append(a)
        for im in ds.images:
            new_id = next_id
            next_id += 1
            id_map[(origin, im.image_id)] = new_id
            anns = tuple(replace(a, image_id=new_id) for a in by_image[im.image_id])
            samples.append(MixedSample(
                image=replace(im, image_id=new_id),
                annotations=anns,
                origin=origin,
                path=ds.image_path(im),
            ))
    return MixedDataset(labeled.catalog, tuple(samples), id_map)
