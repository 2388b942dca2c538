"""Reference one-stage detector: dense anchors, hand-crafted features, linear heads.

The model is a (K+1)-way linear softmax classifier (class 0 = background)
plus a class-agnostic linear box regressor over the 22-dim features, trained
with SGD.  Everything is exact and auditable: the loss has closed-form
gradients, checked against finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import Annotation, ClassCatalog, STATUS_IGNORE, STATUS_KEEP
from .errors import ValidationError
from .features import FEATURE_DIM, ImageFeatures
from .geometry import Detection, clip_xyxy, iou_matrix_xyxy, nms_indices_xyxy
from .annotations import BoundingBox

ROLE_NEGATIVE = 0
ROLE_POSITIVE = 1
ROLE_IGNORED = 2

_DELTA_CLAMP = 4.0  # max |dw|, |dh| at decode time

CKPT_MAGIC = b"TSDM"
CKPT_VERSION = 1


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 8
    sizes: tuple[float, ...] = (8.0, 16.0, 32.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    positive_iou: float = 0.5
    negative_iou: float = 0.3

    def __post_init__(self):
        if self.positive_iou <= self.negative_iou:
            raise ValidationError("positive_iou must exceed negative_iou")

    def anchors_per_cell(self) -> int:
        return len(self.sizes) * len(self.aspect_ratios)


def anchor_grid(width: int, height: int, cfg: AnchorConfig) -> np.ndarray:
    """Corner-form anchor array, clipped to the image.

    Order is row-major over centers (y outer, x inner), then size, then
    aspect ratio; aspect ratio is height/width at constant area.
    """
    if width <= cfg.stride or height <= cfg.stride:
        raise ValidationError("image smaller than anchor stride")
    nx, ny = width // cfg.stride, height // cfg.stride
    cx = cfg.stride / 2.0 + np.arange(nx) * cfg.stride
    cy = cfg.stride / 2.0 + np.arange(ny) * cfg.stride
    shapes = []
    for size in cfg.sizes:
        for ratio in cfg.aspect_ratios:
            w = size / np.sqrt(ratio)
            h = size * np.sqrt(ratio)
            shapes.append((w, h))
    shapes = np.array(shapes)  # (S, 2)
    centers = np.stack(np.meshgrid(cy, cx, indexing="ij"), axis=-1).reshape(-1, 2)  # (ny*nx, [cy,cx])
    cyx = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1))
    boxes = np.empty((len(cyx), 4))
    boxes[:, 0] = cyx[:, 1] - wh[:, 0] / 2.0
    boxes[:, 1] = cyx[:, 0] - wh[:, 1] / 2.0
    boxes[:, 2] = cyx[:, 1] + wh[:, 0] / 2.0
    boxes[:, 3] = cyx[:, 0] + wh[:, 1] / 2.0
    return clip_xyxy(boxes, width, height)


def box_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression targets (dx, dy, dw, dh) from corner-form anchor/target boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + tw / 2.0
    tcy = targets[:, 1] + th / 2.0
    out = np.empty_like(anchors)
    out[:, 0] = (tcx - acx) / aw
    out[:, 1] = (tcy - acy) / ah
    out[:, 2] = np.log(tw / aw)
    out[:, 3] = np.log(th / ah)
    return out


def apply_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Decode predicted deltas back to corner-form boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -_DELTA_CLAMP, _DELTA_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -_DELTA_CLAMP, _DELTA_CLAMP))
    out = np.empty_like(deltas)
    out[:, 0] = cx - w / 2.0
    out[:, 1] = cy - h / 2.0
    out[:, 2] = cx + w / 2.0
    out[:, 3] = cy + h / 2.0
    return out


@dataclass
class DetectorModel:
    """Linear classification and regression heads plus their anchor layout."""

    catalog: ClassCatalog
    anchor_cfg: AnchorConfig
    w_cls: np.ndarray  # (K+1, d)
    b_cls: np.ndarray  # (K+1,)
    w_reg: np.ndarray  # (4, d)
    b_reg: np.ndarray  # (4,)
    epochs_trained: int = 0
    seed: int = 0

    @classmethod
    def new(cls, catalog: ClassCatalog, anchor_cfg: AnchorConfig | None = None) -> "DetectorModel":
        k = len(catalog)
        return cls(
            catalog=catalog,
            anchor_cfg=anchor_cfg or AnchorConfig(),
            w_cls=np.zeros((k + 1, FEATURE_DIM)),
            b_cls=np.zeros(k + 1),
            w_reg=np.zeros((4, FEATURE_DIM)),
            b_reg=np.zeros(4),
        )

    @property
    def n_classes(self) -> int:
        return len(self.catalog)

    def copy_weights(self) -> tuple[np.ndarray, ...]:
        return (self.w_cls.copy(), self.b_cls.copy(), self.w_reg.copy(), self.b_reg.copy())

    def set_weights(self, weights: tuple[np.ndarray, ...]) -> None:
        self.w_cls, self.b_cls, self.w_reg, self.b_reg = [w.copy() for w in weights]

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w_cls, self.b_cls, self.w_reg, self.b_reg):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def validate_finite(self) -> None:
        for name, arr in (("w_cls", self.w_cls), ("b_cls", self.b_cls),
                          ("w_reg", self.w_reg), ("b_reg", self.b_reg)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")

    # -- checkpoint format: header, catalog, metadata, then LE float64 arrays --

    def save(self, path: str | Path) -> None:
        self.validate_finite()
        cfg = self.anchor_cfg
        parts = [struct.pack("<4sI", CKPT_MAGIC, CKPT_VERSION),
                 struct.pack("<II", FEATURE_DIM, self.n_classes),
                 struct.pack("<I", cfg.stride),
                 struct.pack("<I", len(cfg.sizes)), *(struct.pack("<d", s) for s in cfg.sizes),
                 struct.pack("<I", len(cfg.aspect_ratios)),
                 *(struct.pack("<d", r) for r in cfg.aspect_ratios),
                 struct.pack("<dd", cfg.positive_iou, cfg.negative_iou)]
        for cid, name in self.catalog.classes:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<II", cid, len(raw)) + raw)
        parts.append(struct.pack("<Iq", self.epochs_trained, self.seed))
        for arr in (self.w_cls, self.b_cls, self.w_reg, self.b_reg):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        data = Path(path).read_bytes()
        off = 0

        def take(fmt: str):
            nonlocal off
            s = struct.Struct(fmt)
            if off + s.size > len(data):
                raise ValidationError(f"{path}: truncated checkpoint")
            vals = s.unpack_from(data, off)
            off += s.size
            return vals

        magic, version = take("<4sI")
        if magic != CKPT_MAGIC:
            raise ValidationError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        d, k = take("<II")
        if d != FEATURE_DIM:
            raise ValidationError(f"{path}: feature dimension {d} does not match build ({FEATURE_DIM})")
        (stride,) = take("<I")
        (n_sizes,) = take("<I")
        sizes = tuple(take("<d")[0] for _ in range(n_sizes))
        (n_ratios,) = take("<I")
        ratios = tuple(take("<d")[0] for _ in range(n_ratios))
        pos_iou, neg_iou = take("<dd")
        classes = []
        for _ in range(k):
            cid, name_len = take("<II")
            raw = data[off:off + name_len]
            off += name_len
            classes.append((cid, raw.decode("utf-8")))
        epochs, seed = take("<Iq")

        def arr(shape):
            nonlocal off
            n = int(np.prod(shape))
            if off + n * 8 > len(data):
                raise ValidationError(f"{path}: truncated checkpoint")
            out = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += n * 8
            return out

        model = cls(
            catalog=ClassCatalog(tuple(classes)),
            anchor_cfg=AnchorConfig(stride, sizes, ratios, pos_iou, neg_iou),
            w_cls=arr((k + 1, d)),
            b_cls=arr((k + 1,)),
            w_reg=arr((4, d)),
            b_reg=arr((4,)),
            epochs_trained=epochs,
            seed=seed,
        )
        if off != len(data):
            raise ValidationError(f"{path}: {len(data) - off} trailing bytes in checkpoint")
        model.validate_finite()
        return model


@dataclass(frozen=True)
class AssignmentSet:
    """Vectorized per-anchor roles, targets, and loss weights for one image."""

    roles: np.ndarray         # (A,) int8
    cls_targets: np.ndarray   # (A,) int64; 0 = background
    weights: np.ndarray       # (A,) float64; 0 for ignored anchors
    reg_targets: np.ndarray   # (A, 4) float64; zero rows unless positive
    ann_index: np.ndarray     # (A,) int64; -1 unless positive
    near_negative: np.ndarray | None = None  # (A,) bool; negatives touching an object

    @property
    def n_cls(self) -> int:
        return int(np.count_nonzero(self.roles != ROLE_IGNORED))

    @property
    def n_reg(self) -> int:
        return int(np.count_nonzero(self.roles == ROLE_POSITIVE))

    def flipped(self) -> "AssignmentSet":
        """Targets for the horizontally flipped sample.

        For a mirror-symmetric anchor grid, flipping image and boxes is
        equivalent to negating the x-offset targets: the (feature, target)
        pairs are otherwise a permutation of the originals.
        """
        reg = self.reg_targets.copy()
        reg[:, 0] = -reg[:, 0]
        return AssignmentSet(self.roles, self.cls_targets, self.weights, reg, self.ann_index,
                             self.near_negative)


def match_anchors(
    anchors: np.ndarray,
    annotations: list[Annotation] | tuple[Annotation, ...],
    cfg: AnchorConfig,
    class_weights: dict[int, float] | None = None,
) -> AssignmentSet:
    """Assign a role to every anchor.

    Keep annotations (ground truth counts as keep with weight 1) attract
    positives at IoU >= positive_iou; ignore annotations shield their anchors
    from the loss; everything overlapping nothing above negative_iou is
    background.  Each keep annotation additionally forces its best anchor
    positive so small objects never lose all their positives.
    """
    a_count = len(anchors)
    roles = np.full(a_count, ROLE_NEGATIVE, dtype=np.int8)
    cls_targets = np.zeros(a_count, dtype=np.int64)
    weights = np.ones(a_count, dtype=np.float64)
    reg_targets = np.zeros((a_count, 4), dtype=np.float64)
    ann_index = np.full(a_count, -1, dtype=np.int64)

    keep = [a for a in annotations if a.status in (None, STATUS_KEEP)]
    ignored = [a for a in annotations if a.status == STATUS_IGNORE]
    # drop annotations vanish before matching; their region reverts to background

    if not keep and not ignored:
        return AssignmentSet(roles, cls_targets, weights, reg_targets, ann_index)

    def boxes_of(anns):
        return np.array([a.box.corners for a in anns]).reshape(-1, 4)

    iou_keep = iou_matrix_xyxy(anchors, boxes_of(keep)) if keep else np.zeros((a_count, 0))
    iou_ign = iou_matrix_xyxy(anchors, boxes_of(ignored)) if ignored else np.zeros((a_count, 0))

    max_keep = iou_keep.max(axis=1) if keep else np.zeros(a_count)
    max_ign = iou_ign.max(axis=1) if ignored else np.zeros(a_count)
    max_all = np.maximum(max_keep, max_ign)

    positive = max_keep >= cfg.positive_iou
    shielded = ~positive & (max_ign >= cfg.positive_iou)
    gray = ~positive & ~shielded & (max_all >= cfg.negative_iou)
    roles[positive] = ROLE_POSITIVE
    roles[shielded | gray] = ROLE_IGNORED

    if keep:
        best_ann = np.argmax(iou_keep, axis=1)
        # force the best anchor of each keep annotation positive; on a contested
        # anchor the higher-IoU annotation wins, ties to the earlier annotation
        forced: dict[int, int] = {}
        for j in range(len(keep)):
            anchor = int(np.argmax(iou_keep[:, j]))
            if iou_keep[anchor, j] <= 0.0:
                continue  # annotation overlaps no anchor at all
            if anchor in forced and iou_keep[anchor, forced[anchor]] >= iou_keep[anchor, j]:
                continue
            forced[anchor] = j
        for anchor, j in forced.items():
            roles[anchor] = ROLE_POSITIVE
            best_ann[anchor] = j

        pos = roles == ROLE_POSITIVE
        pos_idx = np.nonzero(pos)[0]
        chosen = best_ann[pos_idx]
        ann_index[pos_idx] = chosen
        cls_targets[pos_idx] = [keep[j].class_id for j in chosen]
        cw = class_weights or {}
        alpha_w = np.array([1.0 if keep[j].weight is None else keep[j].weight for j in chosen])
        class_w = np.array([cw.get(keep[j].class_id, 1.0) for j in chosen])
        weights[pos_idx] = alpha_w * class_w
        gt_boxes = boxes_of([keep[j] for j in chosen])
        reg_targets[pos_idx] = box_deltas(anchors[pos_idx], gt_boxes)

    weights[roles == ROLE_IGNORED] = 0.0
    near = (roles == ROLE_NEGATIVE) & (max_all > 0.0)
    return AssignmentSet(roles, cls_targets, weights, reg_targets, ann_index, near)


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_labeled: float
    l_unlabeled: float
    total: float


@dataclass
class Gradients:
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray


def _loss_core(w_cls, b_cls, w_reg, b_reg, x, cls_targets, cls_weights, pos_rows, reg_targets, reg_weights):
    """Weighted cross-entropy over all rows plus smooth L1 over positive rows.

    ``cls_weights`` already carries any normalization; ignored anchors get 0.
    Returns per-row weighted CE, per-positive weighted smooth L1, and the
    gradients of their sums.
    """
    logits = x @ w_cls.T + b_cls
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    ex = np.exp(shifted)
    z = ex.sum(axis=1, keepdims=True)
    rows = np.arange(len(x))
    ce = (np.log(z[:, 0]) - shifted[rows, cls_targets]) * cls_weights
    g_logits = ex / z * cls_weights[:, None]
    g_logits[rows, cls_targets] -= cls_weights
    g_w_cls = g_logits.T @ x
    g_b_cls = g_logits.sum(axis=0)

    xp = x[pos_rows]
    pred = xp @ w_reg.T + b_reg
    diff = pred - reg_targets
    absd = np.abs(diff)
    sl1 = np.where(absd < 1.0, 0.5 * diff * diff, absd - 0.5).sum(axis=1) * reg_weights
    g_diff = np.clip(diff, -1.0, 1.0) * reg_weights[:, None]
    g_w_reg = g_diff.T @ xp
    g_b_reg = g_diff.sum(axis=0)
    return ce, sl1, (g_w_cls, g_b_cls, g_w_reg, g_b_reg)


def compute_loss(
    model: DetectorModel,
    image: np.ndarray,
    assignments: AssignmentSet,
    origin: str = "labeled",
) -> tuple[LossBreakdown, Gradients]:
    """Loss and exact gradients for one image.

    ``image`` may be raw (h, w, 3) pixels or a precomputed (A, d) feature
    matrix.  Classification runs over positive and negative anchors, box
    regression over positives, each averaged by its contributing-anchor
    count; ignored anchors contribute nothing.
    """
    if image.ndim == 3:
        anchors = anchor_grid(image.shape[1], image.shape[0], model.anchor_cfg)
        x = ImageFeatures(image).for_boxes(anchors)
    else:
        x = np.asarray(image, dtype=np.float64)
    if len(x) != len(assignments.roles):
        raise ValidationError("assignments do not match anchor count")

    n_cls = assignments.n_cls
    n_reg = assignments.n_reg
    zero_grads = Gradients(np.zeros_like(model.w_cls), np.zeros_like(model.b_cls),
                           np.zeros_like(model.w_reg), np.zeros_like(model.b_reg))
    if n_cls == 0:
        zero = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
        return zero, zero_grads

    cls_w = assignments.weights / n_cls
    pos_rows = np.nonzero(assignments.roles == ROLE_POSITIVE)[0]
    reg_w = (assignments.weights[pos_rows] / n_reg) if n_reg else np.zeros(0)
    ce, sl1, grads = _loss_core(
        model.w_cls, model.b_cls, model.w_reg, model.b_reg,
        x, assignments.cls_targets, cls_w,
        pos_rows, assignments.reg_targets[pos_rows], reg_w,
    )
    l_cls = float(ce.sum())
    l_reg = float(sl1.sum())
    subtotal = l_cls + l_reg
    l_labeled, l_unlabeled = (subtotal, 0.0) if origin == "labeled" else (0.0, subtotal)
    breakdown = LossBreakdown(l_cls, l_reg, l_labeled, l_unlabeled, l_labeled + l_unlabeled)
    return breakdown, Gradients(*grads)


def predict_from_features(
    model: DetectorModel,
    x: np.ndarray,
    anchors: np.ndarray,
    width: int,
    height: int,
    score_floor: float,
    nms_iou: float,
) -> list[Detection]:
    logits = x @ model.w_cls.T + model.b_cls
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    probs = ex / ex.sum(axis=1, keepdims=True)
    fg = probs[:, 1:]
    scores = fg.max(axis=1)
    classes = fg.argmax(axis=1) + 1
    sel = np.nonzero(scores >= score_floor)[0]
    if len(sel) == 0:
        return []
    deltas = x[sel] @ model.w_reg.T + model.b_reg
    boxes = clip_xyxy(apply_deltas(anchors[sel], deltas), width, height)
    ok = (boxes[:, 2] - boxes[:, 0] > 0) & (boxes[:, 3] - boxes[:, 1] > 0)
    sel, boxes = sel[ok], boxes[ok]
    out: list[Detection] = []
    for cid in np.unique(classes[sel]):
        mask = classes[sel] == cid
        cls_boxes = boxes[mask]
        cls_scores = scores[sel][mask]
        for i in nms_indices_xyxy(cls_boxes, cls_scores, nms_iou):
            out.append(Detection(
                BoundingBox.from_corners(*cls_boxes[i]), int(cid), float(cls_scores[i])
            ))
    out.sort(key=lambda d: -d.score)
    return out


def predict(
    model: DetectorModel,
    pixels: np.ndarray,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """Score every anchor, decode boxes, clip, and suppress per class."""
    height, width = pixels.shape[:2]
    anchors = anchor_grid(width, height, model.anchor_cfg)
    x = ImageFeatures(pixels).for_boxes(anchors)
    return predict_from_features(model, x, anchors, width, height, score_floor, nms_iou)
