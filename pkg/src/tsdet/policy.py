"""Confidence-based loss-weight parametrizations for pseudo-labels.

Three variants govern how a pseudo-label with confidence ``s`` enters the
student loss:

* ``single``: keep at full weight above the high threshold, otherwise the
  region falls back to background.
* ``doubt``: same keep rule, but scores inside the band [tau_l, tau_h) are
  ignored entirely (weight zero, neither positive nor negative).
* ``progressive``: scores inside the band are kept with a weight that rises
  linearly from 0 at tau_l to 1 at tau_h.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .annotations import (
    KIND_PSEUDO,
    STATUS_DROP,
    STATUS_IGNORE,
    STATUS_KEEP,
    Dataset,
)
from .errors import ValidationError

SINGLE_THRESHOLD = "single"
DOUBT_BAND = "doubt"
PROGRESSIVE_DOUBT = "progressive"
VARIANTS = (SINGLE_THRESHOLD, DOUBT_BAND, PROGRESSIVE_DOUBT)


@dataclass(frozen=True)
class WeightPolicy:
    """Variant plus thresholds; ``tau_l`` is unused by the single variant."""

    variant: str
    tau_l: float
    tau_h: float

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown policy variant {self.variant!r}")
        if not (0.0 < self.tau_h <= 1.0):
            raise ValidationError(f"tau_h {self.tau_h} outside (0, 1]")
        if self.variant != SINGLE_THRESHOLD:
            if not (0.0 <= self.tau_l < self.tau_h):
                raise ValidationError(
                    f"band variants need 0 <= tau_l < tau_h, got tau_l={self.tau_l}, tau_h={self.tau_h}"
                )


@dataclass(frozen=True)
class LabelStatus:
    """Keep(weight) / Ignore / Drop outcome for one pseudo-label."""

    kind: str
    weight: float | None = None

    @classmethod
    def keep(cls, weight: float) -> "LabelStatus":
        return cls(STATUS_KEEP, weight)


IGNORE = LabelStatus(STATUS_IGNORE)
DROP = LabelStatus(STATUS_DROP)


def alpha(s: float, p: WeightPolicy) -> float:
    """Loss weight for confidence ``s`` under a band variant."""
    if p.variant == SINGLE_THRESHOLD:
        raise ValidationError("alpha undefined for the single-threshold variant; use assign_status")
    if not (0.0 <= s <= 1.0):
        raise ValidationError(f"score {s} outside [0, 1]")
    if p.tau_l <= s < p.tau_h:
        if p.variant == DOUBT_BAND:
            return 0.0
        return (s - p.tau_l) / (p.tau_h - p.tau_l)
    return 1.0


def alpha_array(s: np.ndarray, p: WeightPolicy) -> np.ndarray:
    """Vectorized :func:`alpha`; bit-identical to the scalar form per element."""
    if p.variant == SINGLE_THRESHOLD:
        raise ValidationError("alpha undefined for the single-threshold variant; use assign_status")
    s = np.asarray(s, dtype=np.float64)
    in_band = (p.tau_l <= s) & (s < p.tau_h)
    if p.variant == DOUBT_BAND:
        return np.where(in_band, 0.0, 1.0)
    return np.where(in_band, (s - p.tau_l) / (p.tau_h - p.tau_l), 1.0)


STATUS_CODES = {STATUS_DROP: 0, STATUS_IGNORE: 1, STATUS_KEEP: 2}


def assign_status_array(s: np.ndarray, p: WeightPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`assign_status`.

    Returns (codes, weights) with codes 0=drop, 1=ignore, 2=keep and weights
    NaN for non-keep entries; elementwise bit-identical to the scalar form.
    """
    s = np.asarray(s, dtype=np.float64)
    codes = np.empty(s.shape, dtype=np.int8)
    weights = np.full(s.shape, np.nan)
    if p.variant == SINGLE_THRESHOLD:
        keep = s >= p.tau_h
        codes[:] = np.where(keep, STATUS_CODES[STATUS_KEEP], STATUS_CODES[STATUS_DROP])
        weights[keep] = 1.0
        return codes, weights
    keep_full = s >= p.tau_h
    drop = s < p.tau_l
    band = ~keep_full & ~drop
    codes[keep_full] = STATUS_CODES[STATUS_KEEP]
    codes[drop] = STATUS_CODES[STATUS_DROP]
    weights[keep_full] = 1.0
    if p.variant == DOUBT_BAND:
        codes[band] = STATUS_CODES[STATUS_IGNORE]
    else:
        w = (s[band] - p.tau_l) / (p.tau_h - p.tau_l)
        keep_band = w != 0.0
        band_idx = np.nonzero(band)[0]
        codes[band_idx] = np.where(keep_band, STATUS_CODES[STATUS_KEEP],
                                   STATUS_CODES[STATUS_IGNORE])
        weights[band_idx[keep_band]] = w[keep_band]
    return codes, weights


def assign_status(s: float, p: WeightPolicy) -> LabelStatus:
    """Map a confidence score to keep/ignore/drop under the policy.

    For the progressive variant a score exactly at tau_l would keep with
    weight 0; that is represented as Ignore so zero-weight positives never
    enter matching.
    """
    if not (0.0 <= s <= 1.0):
        raise ValidationError(f"score {s} outside [0, 1]")
    if p.variant == SINGLE_THRESHOLD:
        return LabelStatus.keep(1.0) if s >= p.tau_h else DROP
    if s >= p.tau_h:
        return LabelStatus.keep(1.0)
    if s < p.tau_l:
        return DROP
    if p.variant == DOUBT_BAND:
        return IGNORE
    w = alpha(s, p)
    return IGNORE if w == 0.0 else LabelStatus.keep(w)


def apply_policy(pseudo: Dataset, p: WeightPolicy) -> Dataset:
    """Assign a status (and keep weight) to every pseudo annotation."""
    if pseudo.kind != KIND_PSEUDO:
        raise ValidationError(f"apply_policy needs a pseudo dataset, got kind {pseudo.kind!r}")
    out = []
    for a in pseudo.annotations:
        if a.score is None:
            raise ValidationError(f"annotation {a.ann_id}: missing score")
        st = assign_status(a.score, p)
        out.append(replace(a, status=st.kind, weight=st.weight))
    return pseudo.replace_annotations(tuple(out))


def class_balance_weights(dist: dict[int, int]) -> dict[int, float]:
    """Inverse-frequency class weights, normalized to mean 1 over present classes.

    Classes with zero count receive the maximum computed weight so that rare
    classes never vanish from the loss.
    """
    if not dist or all(c == 0 for c in dist.values()):
        raise ValidationError("class distribution is all zero")
    raw = {cid: 1.0 / max(count, 1) for cid, count in dist.items()}
    present = [cid for cid, count in dist.items() if count > 0]
    mean_present = sum(raw[cid] for cid in present) / len(present)
    weights = {cid: raw[cid] / mean_present for cid in present}
    if len(present) < len(dist):
        top = max(weights.values())
        for cid, count in dist.items():
            if count == 0:
                weights[cid] = top
    return weights
