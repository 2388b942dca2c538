"""Per-class color-centroid detector.

Training fits one RGB centroid and a size prior per class from keep-status
annotations, weighted by the loss weights the engine shipped.  Prediction
thresholds color distance to each centroid and reports connected blobs with
scores derived from match similarity.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .formats import image_path, read_raster

_MAX_DIST = float(np.sqrt(3 * 255.0 ** 2))
_COLOR_GATE = 90.0  # color distance threshold for blob masks
_MIN_BLOB_PIXELS = 4


class CentroidModel:
    def __init__(self, categories: list[dict]):
        self.categories = categories
        self.centroids: dict[int, np.ndarray] = {}
        self.size_prior: dict[int, tuple[float, float]] = {}

    # -- training ----------------------------------------------------------

    def fit(self, manifests: list[dict]) -> None:
        sums: dict[int, np.ndarray] = {}
        size_sums: dict[int, np.ndarray] = {}
        weight_sums: dict[int, float] = {}
        for manifest in manifests:
            images = {im["id"]: im for im in manifest.get("images", [])}
            for ann in manifest.get("annotations", []):
                status = ann.get("status")
                if status not in (None, "keep"):
                    continue
                weight = float(ann.get("weight", 1.0) or 1.0)
                image = images.get(ann["image_id"])
                if image is None:
                    continue
                pixels = read_raster(image_path(manifest, image))
                x, y, w, h = ann["bbox"]
                x0, y0 = max(int(x), 0), max(int(y), 0)
                x1 = min(int(np.ceil(x + w)), image["width"])
                y1 = min(int(np.ceil(y + h)), image["height"])
                if x1 <= x0 or y1 <= y0:
                    continue
                mean = pixels[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
                cid = ann["category_id"]
                sums[cid] = sums.get(cid, 0.0) + weight * mean
                size_sums[cid] = size_sums.get(cid, 0.0) + weight * np.array([w, h])
                weight_sums[cid] = weight_sums.get(cid, 0.0) + weight
        for cid, total in sums.items():
            self.centroids[cid] = total / weight_sums[cid]
            sw, sh = size_sums[cid] / weight_sums[cid]
            self.size_prior[cid] = (float(sw), float(sh))

    # -- inference ---------------------------------------------------------

    def predict_image(self, pixels: np.ndarray, score_floor: float) -> list[dict]:
        dets: list[dict] = []
        flat = pixels.astype(np.float64)
        for cid, centroid in self.centroids.items():
            dist = np.sqrt(((flat - centroid[None, None, :]) ** 2).sum(axis=2))
            mask = dist < _COLOR_GATE
            labels, count = ndimage.label(mask)
            for slc in ndimage.find_objects(labels):
                if slc is None:
                    continue
                region = labels[slc] > 0
                if region.sum() < _MIN_BLOB_PIXELS:
                    continue
                y0, y1 = slc[0].start, slc[0].stop
                x0, x1 = slc[1].start, slc[1].stop
                mean_dist = float(dist[slc][region].mean())
                score = max(0.0, min(1.0, 1.0 - mean_dist / _MAX_DIST))
                if score < score_floor:
                    continue
                dets.append({
                    "category_id": cid,
                    "bbox": [float(x0), float(y0), float(x1 - x0), float(y1 - y0)],
                    "score": score,
                })
        return dets

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "categories": self.categories,
            "centroids": {str(c): list(v) for c, v in self.centroids.items()},
            "size_prior": {str(c): list(v) for c, v in self.size_prior.items()},
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CentroidModel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        model = cls(raw["categories"])
        model.centroids = {int(c): np.array(v) for c, v in raw["centroids"].items()}
        model.size_prior = {int(c): tuple(v) for c, v in raw["size_prior"].items()}
        return model


def _iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    if ix2 <= ix or iy2 <= iy:
        return 0.0
    inter = (ix2 - ix) * (iy2 - iy)
    return inter / (aw * ah + bw * bh - inter)


def quick_ap50(model: CentroidModel, manifest: dict, score_floor: float = 0.05) -> float:
    """Crude AP at IoU 0.5, mean over classes; the val metric for train_done.

    Every-point interpolation over the pooled detections of each class.  Not
    the engine's metric; a self-assessment a real backend would replace.
    """
    records: dict[int, list[tuple[float, bool]]] = {}
    gt_counts: dict[int, int] = {}
    for im in manifest.get("images", []):
        gts = [a for a in manifest.get("annotations", []) if a["image_id"] == im["id"]]
        for g in gts:
            gt_counts[g["category_id"]] = gt_counts.get(g["category_id"], 0) + 1
        try:
            pixels = read_raster(image_path(manifest, im))
        except (OSError, ValueError):
            continue
        dets = model.predict_image(pixels, score_floor)
        dets.sort(key=lambda d: -d["score"])
        used = set()
        for d in dets:
            best, best_iou = None, 0.5
            for j, g in enumerate(gts):
                if j in used or g["category_id"] != d["category_id"]:
                    continue
                v = _iou(d["bbox"], g["bbox"])
                if v >= best_iou:
                    best, best_iou = j, v
            if best is not None:
                used.add(best)
            records.setdefault(d["category_id"], []).append((d["score"], best is not None))
    aps = []
    for cid, n_gt in gt_counts.items():
        if n_gt == 0:
            continue
        recs = sorted(records.get(cid, []), key=lambda r: -r[0])
        tp = fp = 0
        best_prec_at = []
        for _score, is_tp in recs:
            tp += is_tp
            fp += not is_tp
            best_prec_at.append((tp / n_gt, tp / (tp + fp)))
        ap = 0.0
        prev_recall = 0.0
        for recall, precision in best_prec_at:
            peak = max((p for r, p in best_prec_at if r >= recall), default=0.0)
            ap += (recall - prev_recall) * peak
            prev_recall = recall
        aps.append(ap)
    return float(np.mean(aps)) if aps else 0.0
