"""SGD training loop for the reference detector.

Per-sample losses follow the labeled/unlabeled split: the epoch total is the
sum of the two origin-bucketed means, recorded separately so their additivity
is checkable on every epoch.  Training is bit-reproducible for a fixed seed:
sample order, flip draws, and gradient reduction order are all deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .annotations import ORIGIN_LABELED, Dataset, MixedDataset
from .detector import (
    AnchorConfig,
    AssignmentSet,
    DetectorModel,
    ROLE_NEGATIVE,
    ROLE_POSITIVE,
    anchor_grid,
    match_anchors,
    predict_from_features,
)
from .errors import ValidationError
from .evaluation import EvalReport, map_50_95
from .features import ImageFeatures
from .geometry import Detection
from .raster import read_raster

FLIP_PROBABILITY = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    plateau_patience: int = 5
    lr_factor: float = 10.0
    stop_patience: int = 10
    max_epochs: int = 200
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be positive")
        if self.plateau_patience < 1 or self.stop_patience < 1:
            raise ValidationError("patiences must be >= 1")

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lr0", "momentum", "weight_decay", "plateau_patience", "lr_factor",
            "stop_patience", "max_epochs", "batch_size", "seed")}

    @classmethod
    def from_json_dict(cls, raw: dict) -> "TrainConfig":
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    l_cls: float
    l_reg: float
    l_labeled: float
    l_unlabeled: float
    total: float
    val_map: float
    lr: float

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epoch", "l_cls", "l_reg", "l_labeled", "l_unlabeled", "total", "val_map", "lr")}


class FeatureCache:
    """Anchor grids and per-image anchor features, keyed by image file path.

    Features are stored as float32; at roughly 200 kB per 128x128 image the
    cache holds a few thousand images comfortably.
    """

    def __init__(self, anchor_cfg: AnchorConfig):
        self.anchor_cfg = anchor_cfg
        self._anchors: dict[tuple[int, int], np.ndarray] = {}
        self._features: dict[str, np.ndarray] = {}

    def anchors(self, width: int, height: int) -> np.ndarray:
        key = (width, height)
        if key not in self._anchors:
            self._anchors[key] = anchor_grid(width, height, self.anchor_cfg)
        return self._anchors[key]

    def features(self, path: str | Path, width: int, height: int) -> np.ndarray:
        key = str(path)
        if key not in self._features:
            pixels = read_raster(path)
            if pixels.shape[:2] != (height, width):
                raise ValidationError(f"{path}: size {pixels.shape[:2]} does not match manifest")
            feats = ImageFeatures(pixels).for_boxes(self.anchors(width, height))
            self._features[key] = feats.astype(np.float32)
        return self._features[key]

    def clear(self) -> None:
        self._features.clear()


# Anchor subsampling per image and step: every positive, the currently
# hardest negatives (online hard example mining), and random negatives for
# coverage.  Without this the ~100:1 negative majority drives all foreground
# scores to zero and nothing trains within the epoch budget; without the
# mined half, duplicate-looking anchors inside objects are sampled too rarely
# to ever be suppressed.  The full-sum loss form stays available through
# detector.compute_loss.
NEGATIVE_RATIO = 3
MIN_NEGATIVES = 64


@dataclass
class _Prepared:
    x: np.ndarray            # (A, d) float32
    cls_targets: np.ndarray  # (A,) int64
    weights: np.ndarray      # (A,) float32, unnormalized per-anchor weights
    pos_rows: np.ndarray     # (P,) int64
    neg_rows: np.ndarray     # (N,) int64
    reg_t: np.ndarray        # (P, 4) float32
    reg_t_flip: np.ndarray   # (P, 4) float32, dx negated
    reg_w: np.ndarray        # (P,) float32, already divided by n_reg
    labeled: bool


def _prepare(sample, assignment: AssignmentSet, x: np.ndarray) -> _Prepared:
    n_reg = assignment.n_reg
    pos_rows = np.nonzero(assignment.roles == ROLE_POSITIVE)[0]
    reg_t = assignment.reg_targets[pos_rows]
    reg_t_flip = reg_t.copy()
    reg_t_flip[:, 0] = -reg_t_flip[:, 0]
    reg_w = assignment.weights[pos_rows] / n_reg if n_reg else np.zeros(0)
    return _Prepared(
        x=x,
        cls_targets=assignment.cls_targets,
        weights=assignment.weights.astype(np.float32),
        pos_rows=pos_rows,
        neg_rows=np.nonzero(assignment.roles == ROLE_NEGATIVE)[0],
        reg_t=reg_t.astype(np.float32),
        reg_t_flip=reg_t_flip.astype(np.float32),
        reg_w=reg_w.astype(np.float32),
        labeled=sample.origin == ORIGIN_LABELED,
    )


def _sample_rows(p: _Prepared, rng: np.random.Generator, w_cls, b_cls) -> np.ndarray:
    """Classification anchors for one step.

    All positives plus a bounded number of negatives: half mined as the
    negatives with the highest foreground logit margin under the current
    weights, half drawn at random for coverage.
    """
    budget = max(NEGATIVE_RATIO * len(p.pos_rows), MIN_NEGATIVES)
    if len(p.neg_rows) <= budget:
        return np.concatenate([p.pos_rows, p.neg_rows])
    n_hard = budget // 2
    logits = p.x[p.neg_rows] @ w_cls.T + b_cls
    hardness = logits[:, 1:].max(axis=1) - logits[:, 0]
    hard_local = np.argsort(-hardness, kind="stable")[:n_hard]
    remaining = np.setdiff1d(np.arange(len(p.neg_rows)), hard_local, assume_unique=False)
    rand_local = rng.choice(remaining, size=budget - n_hard, replace=False)
    return np.concatenate([p.pos_rows, p.neg_rows[hard_local], p.neg_rows[rand_local]])


def _batch_step(params32, batch: list[_Prepared], flips: np.ndarray, rng: np.random.Generator):
    """Forward/backward over one batch; returns per-image losses and summed grads."""
    w_cls, b_cls, w_reg, b_reg = params32
    xs, cls_ts, cls_ws, img_ids = [], [], [], []
    for i, p in enumerate(batch):
        rows = _sample_rows(p, rng, w_cls, b_cls)
        xs.append(p.x[rows])
        cls_ts.append(p.cls_targets[rows])
        cls_ws.append(p.weights[rows] / len(rows))
        img_ids.append(np.full(len(rows), i))
    x = np.concatenate(xs)
    cls_t = np.concatenate(cls_ts)
    cls_w = np.concatenate(cls_ws).astype(np.float32)
    img_of_row = np.concatenate(img_ids)

    logits = x @ w_cls.T + b_cls
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    ex = np.exp(shifted)
    z = ex.sum(axis=1, keepdims=True)
    rows = np.arange(len(x))
    ce = (np.log(z[:, 0]) - shifted[rows, cls_t]) * cls_w
    g_logits = ex / z * cls_w[:, None]
    g_logits[rows, cls_t] -= cls_w
    g_w_cls = g_logits.T @ x
    g_b_cls = g_logits.sum(axis=0)

    xp = np.concatenate([p.x[p.pos_rows] for p in batch])
    reg_t = np.concatenate([(p.reg_t_flip if flips[i] else p.reg_t) for i, p in enumerate(batch)])
    reg_w = np.concatenate([p.reg_w for p in batch])
    img_of_pos = np.repeat(np.arange(len(batch)), [len(p.pos_rows) for p in batch])
    pred = xp @ w_reg.T + b_reg
    diff = pred - reg_t
    absd = np.abs(diff)
    sl1 = np.where(absd < 1.0, 0.5 * diff * diff, absd - 0.5).sum(axis=1) * reg_w
    g_diff = np.clip(diff, -1.0, 1.0) * reg_w[:, None]
    g_w_reg = g_diff.T @ xp
    g_b_reg = g_diff.sum(axis=0)

    l_cls_img = np.bincount(img_of_row, weights=ce, minlength=len(batch))
    l_reg_img = np.bincount(img_of_pos, weights=sl1, minlength=len(batch))
    return l_cls_img, l_reg_img, (g_w_cls, g_b_cls, g_w_reg, g_b_reg)


def evaluate_model(
    model: DetectorModel,
    dataset: Dataset,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    cache: FeatureCache | None = None,
) -> EvalReport:
    """Predict every image of the dataset and score against its annotations."""
    cache = cache or FeatureCache(model.anchor_cfg)
    dets: dict[int, list[Detection]] = {}
    for im in dataset.images:
        x = cache.features(dataset.image_path(im), im.width, im.height)
        anchors = cache.anchors(im.width, im.height)
        dets[im.image_id] = predict_from_features(
            model, x, anchors, im.width, im.height, score_floor, nms_iou)
    return map_50_95(dets, dataset)


def train(
    model: DetectorModel,
    mixed: MixedDataset,
    cfg: TrainConfig,
    val: Dataset | None,
    *,
    class_weights: dict[int, float] | None = None,
    feature_cache: FeatureCache | None = None,
    val_metric: Callable[[DetectorModel, int], float] | None = None,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    initial_val: float | None = None,
) -> tuple[DetectorModel, list[EpochStats]]:
    """SGD with momentum, weight decay, mAP-plateau LR drops, and early stopping.

    The returned model carries the weights of the best validation epoch.
    When ``initial_val`` is given (warm starts), the incoming weights join
    checkpoint selection with that score, so training never returns a model
    that validates worse than its starting point.
    """
    if len(mixed) == 0:
        raise ValidationError("empty training dataset")
    if val is None and val_metric is None:
        raise ValidationError("provide a validation dataset or a val_metric")
    cache = feature_cache or FeatureCache(model.anchor_cfg)

    prepared: list[_Prepared] = []
    for s in mixed.samples:
        anchors = cache.anchors(s.image.width, s.image.height)
        asg = match_anchors(anchors, s.annotations, model.anchor_cfg, class_weights)
        x = cache.features(s.path, s.image.width, s.image.height)
        prepared.append(_prepare(s, asg, x))

    out = DetectorModel(
        catalog=model.catalog,
        anchor_cfg=model.anchor_cfg,
        w_cls=model.w_cls.astype(np.float64).copy(),
        b_cls=model.b_cls.astype(np.float64).copy(),
        w_reg=model.w_reg.astype(np.float64).copy(),
        b_reg=model.b_reg.astype(np.float64).copy(),
        seed=cfg.seed,
    )
    params = [out.w_cls, out.b_cls, out.w_reg, out.b_reg]
    velocity = [np.zeros_like(p) for p in params]

    rng = np.random.default_rng(cfg.seed)
    n = len(prepared)
    lr = cfg.lr0
    best_map = -np.inf if initial_val is None else float(initial_val)
    best_weights = out.copy_weights()
    stagnant = 0
    history: list[EpochStats] = []

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        flips = rng.random(n) < FLIP_PROBABILITY
        params32 = [p.astype(np.float32) for p in params]
        sums = {"cls": 0.0, "reg": 0.0, "lab": 0.0, "unlab": 0.0}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = [prepared[i] for i in idx]
            l_cls_img, l_reg_img, grads = _batch_step(
                params32, batch, flips[start:start + len(idx)], rng)
            total_img = l_cls_img + l_reg_img
            labeled_mask = np.array([p.labeled for p in batch])
            sums["cls"] += float(l_cls_img.sum())
            sums["reg"] += float(l_reg_img.sum())
            sums["lab"] += float(total_img[labeled_mask].sum())
            sums["unlab"] += float(total_img[~labeled_mask].sum())
            scale = 1.0 / len(idx)
            for p, v, g in zip(params, velocity, grads):
                g64 = g.astype(np.float64) * scale
                v *= cfg.momentum
                v -= lr * (g64 + cfg.weight_decay * p)
                p += v
            params32 = [p.astype(np.float32) for p in params]

        l_labeled = sums["lab"] / n
        l_unlabeled = sums["unlab"] / n
        total = l_labeled + l_unlabeled
        if not np.isfinite(total):
            raise RuntimeError(
                f"non-finite training loss at epoch {epoch} (lr={lr}); aborting")

        if val_metric is not None:
            val_map = float(val_metric(out, epoch))
        else:
            val_map = evaluate_model(out, val, score_floor, nms_iou, cache).map_50_95
        history.append(EpochStats(
            epoch=epoch,
            l_cls=sums["cls"] / n,
            l_reg=sums["reg"] / n,
            l_labeled=l_labeled,
            l_unlabeled=l_unlabeled,
            total=total,
            val_map=val_map,
            lr=lr,
        ))

        if val_map > best_map:
            best_map = val_map
            best_weights = out.copy_weights()
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= cfg.stop_patience:
                break
            if stagnant % cfg.plateau_patience == 0:
                lr /= cfg.lr_factor

    out.set_weights(best_weights)
    out.epochs_trained = len(history)
    return out, history
