"""Hand-crafted box features for the reference detector.

Fixed 22-dimensional layout per box:

  [0:3]    per-channel mean inside the box (pixel values scaled to [0, 1])
  [3:15]   per-channel 4-bin intensity histogram, normalized per channel
  [15:18]  log width, log height, log aspect (w/h) of the continuous box
  [18:21]  per-channel contrast: box mean minus the mean of a 2-px ring
  [21]     constant 1

All box statistics are computed from integral images, so per-box cost is
independent of box size.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

FEATURE_DIM = 22
_RING = 2  # ring width in pixels


class ImageFeatures:
    """Per-image integral tables; extracts feature rows for many boxes at once."""

    def __init__(self, pixels: np.ndarray):
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValidationError(f"expected (h, w, 3) pixels, got {pixels.shape}")
        self.height, self.width = pixels.shape[:2]
        scaled = pixels.astype(np.float64) / 255.0
        # channel sums and per-bin indicator sums, both with a zero border
        self._sum = np.zeros((self.height + 1, self.width + 1, 3))
        np.cumsum(np.cumsum(scaled, axis=0), axis=1, out=self._sum[1:, 1:])
        bins = np.minimum(pixels.astype(np.int64) >> 6, 3)  # 4 equal intensity bins
        onehot = (bins[..., None] == np.arange(4)).astype(np.float64)  # (h, w, 3, 4)
        self._bins = np.zeros((self.height + 1, self.width + 1, 3, 4))
        np.cumsum(np.cumsum(onehot, axis=0), axis=1, out=self._bins[1:, 1:])

    def _box_sums(self, table: np.ndarray, x0, y0, x1, y1) -> np.ndarray:
        return table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]

    def for_boxes(self, boxes_xyxy: np.ndarray) -> np.ndarray:
        """Feature matrix (n, 22) for corner-form boxes inside the image."""
        b = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
        n = len(b)
        x0 = np.clip(np.floor(b[:, 0]).astype(np.int64), 0, self.width)
        y0 = np.clip(np.floor(b[:, 1]).astype(np.int64), 0, self.height)
        x1 = np.clip(np.ceil(b[:, 2]).astype(np.int64), 0, self.width)
        y1 = np.clip(np.ceil(b[:, 3]).astype(np.int64), 0, self.height)
        if np.any(x1 <= x0) or np.any(y1 <= y0):
            raise ValidationError("degenerate box in feature extraction")
        count = ((x1 - x0) * (y1 - y0)).astype(np.float64)

        out = np.empty((n, FEATURE_DIM))
        mean = self._box_sums(self._sum, x0, y0, x1, y1) / count[:, None]
        out[:, 0:3] = mean
        hist = self._box_sums(self._bins, x0, y0, x1, y1) / count[:, None, None]
        out[:, 3:15] = hist.reshape(n, 12)

        w = b[:, 2] - b[:, 0]
        h = b[:, 3] - b[:, 1]
        out[:, 15] = np.log(w)
        out[:, 16] = np.log(h)
        out[:, 17] = np.log(w / h)

        rx0 = np.maximum(x0 - _RING, 0)
        ry0 = np.maximum(y0 - _RING, 0)
        rx1 = np.minimum(x1 + _RING, self.width)
        ry1 = np.minimum(y1 + _RING, self.height)
        outer_count = ((rx1 - rx0) * (ry1 - ry0)).astype(np.float64)
        ring_count = outer_count - count
        outer_sum = self._box_sums(self._sum, rx0, ry0, rx1, ry1)
        inner_sum = mean * count[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            ring_mean = (outer_sum - inner_sum) / ring_count[:, None]
        contrast = np.where(ring_count[:, None] > 0, mean - ring_mean, 0.0)
        out[:, 18:21] = contrast
        out[:, 21] = 1.0
        return out


def extract_features(pixels: np.ndarray, box_xyxy) -> np.ndarray:
    """Feature vector for a single corner-form box."""
    return ImageFeatures(pixels).for_boxes(np.asarray(box_xyxy).reshape(1, 4))[0]
