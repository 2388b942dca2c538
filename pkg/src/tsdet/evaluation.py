"""Average precision per class and IoU threshold, and the AP 50:95 aggregate.

Matching follows the community convention for this metric: detections are
processed in descending score order, each consuming at most one unmatched
ground-truth box with the highest IoU above the threshold.  Detections whose
only match is an ignore-status box are neutral (neither TP nor FP).  The
precision-recall curve is summarized by interpolated precision at the 101
recall points 0.00, 0.01, ..., 1.00.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import STATUS_DROP, STATUS_IGNORE, Annotation, Dataset
from .errors import ValidationError
from .geometry import Detection, iou_matrix_xyxy

IOU_THRESHOLDS: tuple[float, ...] = tuple(0.5 + 0.05 * i for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

DetectionsByImage = dict[int, list[Detection]]


@dataclass(frozen=True)
class MatchResult:
    det_index: int
    gt_index: int | None
    neutral: bool = False


@dataclass(frozen=True)
class EvalReport:
    """AP per (class, IoU threshold), per-class means, and the overall mAP.

    ``None`` entries mark classes excluded from averaging (no ground truth
    and no detections).
    """

    iou_thresholds: tuple[float, ...]
    class_ids: tuple[int, ...]
    class_names: tuple[str, ...]
    ap: dict[tuple[int, float], float | None]
    per_class: dict[int, float | None]
    map_50_95: float

    def to_json_dict(self) -> dict:
        return {
            "iou_thresholds": [round(t, 2) for t in self.iou_thresholds],
            "classes": [
                {
                    "id": cid,
                    "name": name,
                    "ap_mean": self.per_class[cid],
                    "ap_by_iou": [self.ap[(cid, t)] for t in self.iou_thresholds],
                }
                for cid, name in zip(self.class_ids, self.class_names)
            ],
            "map_50_95": self.map_50_95,
        }

    def to_table(self) -> str:
        """Flat class x IoU table (tab-separated) for plotting."""
        header = "class\t" + "\t".join(f"AP@{t:.2f}" for t in self.iou_thresholds) + "\tmean"
        lines = [header]
        for cid, name in zip(self.class_ids, self.class_names):
            cells = ["-" if self.ap[(cid, t)] is None else f"{self.ap[(cid, t)]:.6f}"
                     for t in self.iou_thresholds]
            mean = self.per_class[cid]
            cells.append("-" if mean is None else f"{mean:.6f}")
            lines.append(name + "\t" + "\t".join(cells))
        lines.append(f"mAP\t{self.map_50_95:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2) + "\n", encoding="utf-8")
        path.with_suffix(path.suffix + ".tsv").write_text(self.to_table(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        thresholds = tuple(raw["iou_thresholds"])
        ap = {}
        per_class = {}
        ids, names = [], []
        for c in raw["classes"]:
            ids.append(c["id"])
            names.append(c["name"])
            per_class[c["id"]] = c["ap_mean"]
            for t, v in zip(thresholds, c["ap_by_iou"]):
                ap[(c["id"], t)] = v
        return cls(thresholds, tuple(ids), tuple(names), ap, per_class, raw["map_50_95"])


def _split_gts(gts: list[Annotation]) -> tuple[list[Annotation], list[Annotation]]:
    """Normal (matchable, counted) vs ignore ground truth; drop is excluded."""
    normal = [g for g in gts if g.status not in (STATUS_IGNORE, STATUS_DROP)]
    ignored = [g for g in gts if g.status == STATUS_IGNORE]
    return normal, ignored


def match_detections(dets: list[Detection], gts: list[Annotation], iou_thr: float) -> list[MatchResult]:
    """Greedy matching for one image and one class at a single IoU threshold.

    Returns one result per detection, in input order.
    """
    normal, ignored = _split_gts(gts)
    normal_idx = [i for i, g in enumerate(gts) if g.status not in (STATUS_IGNORE, STATUS_DROP)]
    ignore_idx = [i for i, g in enumerate(gts) if g.status == STATUS_IGNORE]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used_normal: set[int] = set()
    used_ignore: set[int] = set()
    results: dict[int, MatchResult] = {}
    for di in order:
        best_j, best_iou = None, 0.0
        for j, g in enumerate(normal):
            if j in used_normal:
                continue
            v = _iou_det_gt(dets[di], g)
            if v >= iou_thr and v > best_iou:
                best_j, best_iou = j, v
        if best_j is not None:
            used_normal.add(best_j)
            results[di] = MatchResult(di, normal_idx[best_j])
            continue
        best_j, best_iou = None, 0.0
        for j, g in enumerate(ignored):
            if j in used_ignore:
                continue
            v = _iou_det_gt(dets[di], g)
            if v >= iou_thr and v > best_iou:
                best_j, best_iou = j, v
        if best_j is not None:
            used_ignore.add(best_j)
            results[di] = MatchResult(di, ignore_idx[best_j], neutral=True)
        else:
            results[di] = MatchResult(di, None)
    return [results[i] for i in range(len(dets))]


def _iou_det_gt(det: Detection, gt: Annotation) -> float:
    m = iou_matrix_xyxy(
        np.array([det.box.corners]), np.array([gt.box.corners])
    )
    return float(m[0, 0])


def _canonical_det_order(entries: list[tuple[int, Detection]]) -> list[tuple[int, Detection]]:
    # order independent of input permutation: score desc, then image id and box
    return sorted(entries, key=lambda e: (-e[1].score, e[0], e[1].box.x, e[1].box.y,
                                          e[1].box.w, e[1].box.h))


def _match_class_all_thresholds(
    dets_by_image: DetectionsByImage,
    gt: Dataset,
    class_id: int,
    thresholds: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Pool one class over all images; match at every threshold at once.

    Returns (tp, neutral) flag arrays of shape (n_thresholds, n_dets) with
    detections in canonical global order, the normal-GT count, and the number
    of pooled detections.
    """
    entries = [(img_id, d) for img_id, dets in dets_by_image.items()
               for d in dets if d.class_id == class_id]
    entries = _canonical_det_order(entries)
    n_thr, n_det = len(thresholds), len(entries)
    tp = np.zeros((n_thr, n_det), dtype=bool)
    neutral = np.zeros((n_thr, n_det), dtype=bool)

    gts_by_image: dict[int, list[Annotation]] = {}
    n_gt = 0
    for a in gt.annotations:
        if a.class_id != class_id or a.status == STATUS_DROP:
            continue
        gts_by_image.setdefault(a.image_id, []).append(a)
        if a.status != STATUS_IGNORE:
            n_gt += 1

    by_image: dict[int, list[int]] = {}
    for pos, (img_id, _) in enumerate(entries):
        by_image.setdefault(img_id, []).append(pos)

    thr_min = thresholds.min()
    for img_id, positions in by_image.items():
        gts = gts_by_image.get(img_id, [])
        normal, ignored = _split_gts(gts)
        if not normal and not ignored:
            continue
        boxes = np.array([entries[p][1].box.corners for p in positions])
        iou_n = iou_matrix_xyxy(boxes, np.array([g.box.corners for g in normal])) if normal else None
        iou_i = iou_matrix_xyxy(boxes, np.array([g.box.corners for g in ignored])) if ignored else None
        # detections below the lowest threshold against every box are
        # unconditional false positives; only the rest need the greedy pass
        relevant = np.zeros(len(positions), dtype=bool)
        if iou_n is not None:
            relevant |= iou_n.max(axis=1) >= thr_min
        if iou_i is not None:
            relevant |= iou_i.max(axis=1) >= thr_min
        avail_n = np.ones((n_thr, len(normal)), dtype=bool)
        avail_i = np.ones((n_thr, len(ignored)), dtype=bool)
        for k in np.nonzero(relevant)[0]:
            pos = positions[k]
            matched = np.zeros(n_thr, dtype=bool)
            if iou_n is not None:
                row = iou_n[k]
                cand = avail_n & (row[None, :] >= thresholds[:, None])
                matched = cand.any(axis=1)
                if matched.any():
                    g = np.argmax(np.where(cand, row[None, :], -1.0), axis=1)
                    tp[matched, pos] = True
                    avail_n[matched, g[matched]] = False
            if iou_i is not None:
                row = iou_i[k]
                cand = avail_i & (row[None, :] >= thresholds[:, None]) & ~matched[:, None]
                hit = cand.any(axis=1)
                if hit.any():
                    g = np.argmax(np.where(cand, row[None, :], -1.0), axis=1)
                    neutral[hit, pos] = True
                    avail_i[hit, g[hit]] = False
    return tp, neutral, n_gt, n_det


def _ap_from_flags(tp: np.ndarray, neutral: np.ndarray, n_gt: int, n_det: int) -> float | None:
    if n_gt == 0:
        return None if n_det == 0 else 0.0
    valid = ~neutral
    tp_v = tp[valid]
    if tp_v.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp_v)
    cum_fp = np.cumsum(~tp_v)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope from the right, then sample at the fixed recall points
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(np.mean(sampled))


def average_precision(
    dets_by_image: DetectionsByImage, gt: Dataset, class_id: int, iou_thr: float
) -> float | None:
    """AP for one class at one IoU threshold, detections pooled over images."""
    tp, neutral, n_gt, n_det = _match_class_all_thresholds(
        dets_by_image, gt, class_id, np.array([iou_thr])
    )
    return _ap_from_flags(tp[0], neutral[0], n_gt, n_det)


def map_50_95(dets_by_image: DetectionsByImage, labeled_gt: Dataset) -> EvalReport:
    """AP per class per IoU in {0.50 .. 0.95}; classes absent everywhere are excluded."""
    for img_id, dets in dets_by_image.items():
        for d in dets:
            if d.class_id not in labeled_gt.catalog:
                raise ValidationError(f"detection class {d.class_id} outside catalog")
    thresholds = np.array(IOU_THRESHOLDS)
    ap: dict[tuple[int, float], float | None] = {}
    per_class: dict[int, float | None] = {}
    class_means = []
    for cid in labeled_gt.catalog.ids:
        tp, neutral, n_gt, n_det = _match_class_all_thresholds(
            dets_by_image, labeled_gt, cid, thresholds
        )
        values = []
        for t_i, thr in enumerate(IOU_THRESHOLDS):
            v = _ap_from_flags(tp[t_i], neutral[t_i], n_gt, n_det)
            ap[(cid, thr)] = v
            if v is not None:
                values.append(v)
        per_class[cid] = float(np.mean(values)) if values else None
        if per_class[cid] is not None:
            class_means.append(per_class[cid])
    overall = float(np.mean(class_means)) if class_means else 0.0
    return EvalReport(
        IOU_THRESHOLDS,
        labeled_gt.catalog.ids,
        labeled_gt.catalog.names,
        ap,
        per_class,
        overall,
    )


def detections_from_dataset(d: Dataset) -> DetectionsByImage:
    """View a detections/pseudo manifest as per-image detection lists."""
    out: DetectionsByImage = {im.image_id: [] for im in d.images}
    for a in d.annotations:
        if a.score is None:
            raise ValidationError(f"annotation {a.ann_id}: detections require scores")
        out[a.image_id].append(Detection(a.box, a.class_id, a.score))
    return out
