"""Orchestration: teacher, pseudo-labels, student, fine-tuning, rounds, grid search.

Every stage both returns in-memory results and (in the round runner) writes
its artifacts to a round directory, so a run can be audited file by file and
resumed from any completed round.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .annotations import (
    Annotation,
    Dataset,
    KIND_PSEUDO,
    STATUS_KEEP,
    STATUS_IGNORE,
    class_distribution,
    concat,
    load_manifest,
    rebase_dataset,
    save_manifest,
)
from .detector import AnchorConfig, DetectorModel
from .errors import ValidationError
from .evaluation import EvalReport
from .policy import WeightPolicy, apply_policy, class_balance_weights
from .trainer import EpochStats, FeatureCache, TrainConfig, evaluate_model, train

logger = logging.getLogger("tsdet")


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from a tuple of integers; fits in a signed 64-bit field."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a full run needs besides the datasets themselves."""

    work_dir: Path
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: WeightPolicy | None = None
    anchor_cfg: AnchorConfig = field(default_factory=AnchorConfig)
    score_floor: float = 0.05
    nms_iou: float = 0.5

    def to_json_dict(self) -> dict:
        return {
            "train": self.train.to_json_dict(),
            "policy": None if self.policy is None else {
                "variant": self.policy.variant,
                "tau_l": self.policy.tau_l,
                "tau_h": self.policy.tau_h,
            },
            "anchors": {
                "stride": self.anchor_cfg.stride,
                "sizes": list(self.anchor_cfg.sizes),
                "aspect_ratios": list(self.anchor_cfg.aspect_ratios),
                "positive_iou": self.anchor_cfg.positive_iou,
                "negative_iou": self.anchor_cfg.negative_iou,
            },
            "score_floor": self.score_floor,
            "nms_iou": self.nms_iou,
        }

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_json_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class StageResult:
    model: DetectorModel
    report: EvalReport
    history: list[EpochStats]


def _class_weights(labeled: Dataset) -> dict[int, float]:
    return class_balance_weights(class_distribution(labeled))


def train_teacher(
    labeled: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    *,
    anchor_cfg: AnchorConfig | None = None,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    cache: FeatureCache | None = None,
) -> StageResult:
    """Supervised training on labeled data only; the report is the baseline."""
    if len(labeled) == 0:
        raise ValidationError("labeled dataset is empty")
    model = DetectorModel.new(labeled.catalog, anchor_cfg)
    empty_pseudo = Dataset(KIND_PSEUDO, labeled.catalog, (), (), labeled.base_dir)
    mixed = concat(labeled, empty_pseudo)
    model, history = train(
        model, mixed, cfg, val,
        class_weights=_class_weights(labeled),
        feature_cache=cache, score_floor=score_floor, nms_iou=nms_iou,
    )
    report = evaluate_model(model, val, score_floor, nms_iou, cache)
    return StageResult(model, report, history)


def generate_pseudo_labels(
    model: DetectorModel,
    unlabeled: Dataset,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    cache: FeatureCache | None = None,
) -> tuple[Dataset, list[str]]:
    """Run the teacher over every unlabeled image and record all detections.

    No confidence thresholding happens here beyond the low floor: one
    generation pass serves a whole threshold grid.  Unreadable images are
    skipped and reported in the returned error list.
    """
    if unlabeled.annotations:
        raise ValidationError("unlabeled manifest must not contain annotations")
    cache = cache or FeatureCache(model.anchor_cfg)
    annotations: list[Annotation] = []
    errors: list[str] = []
    next_id = 1
    kept_images = []
    for im in unlabeled.images:
        try:
            x = cache.features(unlabeled.image_path(im), im.width, im.height)
        except (OSError, ValidationError) as e:
            errors.append(f"{im.file}: {e}")
            continue
        kept_images.append(im)
        dets = _predict_cached(model, cache, im, x, score_floor, nms_iou)
        for d in dets:
            annotations.append(Annotation(
                ann_id=next_id, image_id=im.image_id, class_id=d.class_id,
                box=d.box, score=d.score,
            ))
            next_id += 1
    pseudo = Dataset(KIND_PSEUDO, unlabeled.catalog, tuple(kept_images),
                     tuple(annotations), unlabeled.base_dir)
    if errors:
        logger.warning("pseudo-label generation skipped %d unreadable image(s)", len(errors))
    return pseudo, errors


def _predict_cached(model, cache, im, x, score_floor, nms_iou):
    from .detector import predict_from_features
    anchors = cache.anchors(im.width, im.height)
    return predict_from_features(model, x, anchors, im.width, im.height, score_floor, nms_iou)


def train_student(
    labeled: Dataset,
    pseudo: Dataset,
    policy: WeightPolicy | None,
    val: Dataset,
    cfg: TrainConfig,
    *,
    anchor_cfg: AnchorConfig | None = None,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    cache: FeatureCache | None = None,
) -> StageResult:
    """Student training on the concatenated labeled + policy-weighted pseudo data."""
    if policy is not None:
        pseudo = apply_policy(pseudo, policy)
    elif any(a.status is None for a in pseudo.annotations):
        raise ValidationError("pseudo dataset is not policy-applied and no policy was given")
    n_keep = sum(1 for a in pseudo.annotations if a.status == STATUS_KEEP)
    n_ignore = sum(1 for a in pseudo.annotations if a.status == STATUS_IGNORE)
    if n_keep == 0 and n_ignore == 0:
        logger.warning(
            "policy dropped every pseudo-label; student degenerates to teacher "
            "retraining with extra background images")
    model = DetectorModel.new(labeled.catalog, anchor_cfg)
    mixed = concat(labeled, pseudo)
    model, history = train(
        model, mixed, cfg, val,
        class_weights=_class_weights(labeled),
        feature_cache=cache, score_floor=score_floor, nms_iou=nms_iou,
    )
    report = evaluate_model(model, val, score_floor, nms_iou, cache)
    return StageResult(model, report, history)


@dataclass
class FinetuneResult:
    model: DetectorModel
    before: EvalReport
    after: EvalReport
    history: list[EpochStats]

    def arrow(self) -> str:
        return f"{self.before.map_50_95:.4f} -> {self.after.map_50_95:.4f}"


def finetune(
    student: DetectorModel,
    labeled: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    *,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    cache: FeatureCache | None = None,
) -> FinetuneResult:
    """Continue training on labeled data only, from the student weights.

    Uses a fresh schedule starting at lr0/10 so the warm-started weights are
    refined rather than blown away.
    """
    before = evaluate_model(student, val, score_floor, nms_iou, cache)
    ft_cfg = replace(cfg, lr0=cfg.lr0 / 10.0)
    empty_pseudo = Dataset(KIND_PSEUDO, labeled.catalog, (), (), labeled.base_dir)
    mixed = concat(labeled, empty_pseudo)
    model, history = train(
        student, mixed, ft_cfg, val,
        class_weights=_class_weights(labeled),
        feature_cache=cache, score_floor=score_floor, nms_iou=nms_iou,
        initial_val=before.map_50_95,
    )
    after = evaluate_model(model, val, score_floor, nms_iou, cache)
    return FinetuneResult(model, before, after, history)


# ---------------------------------------------------------------------------
# Round-based iteration with on-disk artifacts
# ---------------------------------------------------------------------------

@dataclass
class PipelineState:
    iteration: int
    teacher_ckpt: Path
    config_digest: str
    round_maps: dict[int, dict[str, float]] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        payload = {
            "iteration": self.iteration,
            "teacher_ckpt": str(self.teacher_ckpt),
            "config_digest": self.config_digest,
            "round_maps": {str(k): v for k, v in self.round_maps.items()},
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "PipelineState":
        raw = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            iteration=raw["iteration"],
            teacher_ckpt=Path(raw["teacher_ckpt"]),
            config_digest=raw["config_digest"],
            round_maps={int(k): v for k, v in raw["round_maps"].items()},
        )


_ROUND_ARTIFACTS = ("pseudo.manifest", "student.ckpt", "student_ft.ckpt",
                    "eval_teacher.report", "eval_student.report", "eval_student_ft.report")


def _round_dir(work_dir: Path, k: int) -> Path:
    return work_dir / f"round_{k}"


def _round_complete(rd: Path) -> bool:
    done = rd / "round.done"
    if not done.exists():
        return False
    recorded = json.loads(done.read_text(encoding="utf-8"))
    for name, digest in recorded["hashes"].items():
        target = rd / name
        if not target.exists() or file_sha256(target) != digest:
            raise RuntimeError(
                f"round directory {rd} is corrupted: {name} missing or modified; "
                f"delete the directory to re-run this round")
    return True


def iterate(
    labeled: Dataset,
    unlabeled: Dataset,
    val: Dataset,
    rounds: int,
    cfg: PipelineConfig,
    *,
    cache: FeatureCache | None = None,
) -> PipelineState:
    """Run teacher -> pseudo -> student -> fine-tune for ``rounds`` rounds.

    The fine-tuned student of round k becomes the teacher of round k+1 (by
    path, not by copy).  Completed rounds are skipped on resume; a round
    directory without its completion marker is refused.
    """
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    if cfg.policy is None:
        raise ValidationError("iterate requires a weight policy")
    work_dir = Path(cfg.work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    cache = cache or FeatureCache(cfg.anchor_cfg)
    state_path = work_dir / "state.json"
    digest = cfg.digest()

    state: PipelineState | None = None
    if state_path.exists():
        state = PipelineState.load(state_path)
        if state.config_digest != digest:
            raise RuntimeError(
                f"work dir {work_dir} was produced with a different configuration; "
                f"refusing to resume")

    global_seed = cfg.train.seed
    for k in range(1, rounds + 1):
        rd = _round_dir(work_dir, k)
        if rd.exists():
            if _round_complete(rd):
                maps = json.loads((rd / "round.done").read_text(encoding="utf-8"))["maps"]
                state = PipelineState(k, rd / "student_ft.ckpt", digest,
                                      {**(state.round_maps if state else {}), k: maps})
                logger.info("round %d already complete, skipping", k)
                continue
            raise RuntimeError(
                f"round directory {rd} exists but has no completion marker "
                f"(crashed or partial run); delete it to re-run the round")
        rd.mkdir(parents=True)

        round_seed = derive_seed(global_seed, k)
        if k == 1:
            teacher_cfg = replace(cfg.train, seed=derive_seed(round_seed, 0))
            result = train_teacher(
                labeled, val, teacher_cfg, anchor_cfg=cfg.anchor_cfg,
                score_floor=cfg.score_floor, nms_iou=cfg.nms_iou, cache=cache)
            teacher = result.model
            teacher_path = rd / "teacher.ckpt"
            teacher.save(teacher_path)
            teacher_report = result.report
        else:
            teacher_path = _round_dir(work_dir, k - 1) / "student_ft.ckpt"
            teacher = DetectorModel.load(teacher_path)
            teacher_report = evaluate_model(teacher, val, cfg.score_floor, cfg.nms_iou, cache)
        teacher_report.save(rd / "eval_teacher.report")

        pseudo, errors = generate_pseudo_labels(
            teacher, unlabeled, cfg.score_floor, cfg.nms_iou, cache)
        save_manifest(rebase_dataset(pseudo, rd), rd / "pseudo.manifest")
        pseudo = load_manifest(rd / "pseudo.manifest")  # quantized, as any backend would see it

        student_cfg = replace(cfg.train, seed=derive_seed(round_seed, 1))
        student = train_student(
            labeled, pseudo, cfg.policy, val, student_cfg, anchor_cfg=cfg.anchor_cfg,
            score_floor=cfg.score_floor, nms_iou=cfg.nms_iou, cache=cache)
        student.model.save(rd / "student.ckpt")
        student.report.save(rd / "eval_student.report")

        ft_cfg = replace(cfg.train, seed=derive_seed(round_seed, 2))
        ft = finetune(student.model, labeled, val, ft_cfg,
                      score_floor=cfg.score_floor, nms_iou=cfg.nms_iou, cache=cache)
        ft.model.save(rd / "student_ft.ckpt")
        ft.after.save(rd / "eval_student_ft.report")

        maps = {
            "teacher": teacher_report.map_50_95,
            "student": student.report.map_50_95,
            "student_ft": ft.after.map_50_95,
        }
        hashes = {name: file_sha256(rd / name) for name in _ROUND_ARTIFACTS}
        if k == 1:
            hashes["teacher.ckpt"] = file_sha256(rd / "teacher.ckpt")
        (rd / "round.done").write_text(
            json.dumps({"hashes": hashes, "maps": maps}, indent=2) + "\n", encoding="utf-8")

        state = PipelineState(k, rd / "student_ft.ckpt", digest,
                              {**(state.round_maps if state else {}), k: maps})
        state.save(state_path)
        if errors:
            logger.warning("round %d: %d unreadable unlabeled image(s)", k, len(errors))
    assert state is not None
    state.save(state_path)
    return state


# ---------------------------------------------------------------------------
# Threshold grid search
# ---------------------------------------------------------------------------

@dataclass
class GridRow:
    policy: WeightPolicy
    val_map: float | None
    error: str | None = None


@dataclass
class GridResult:
    rows: list[GridRow]
    best: WeightPolicy

    def to_table(self) -> str:
        lines = ["variant\ttau_l\ttau_h\tmAP"]
        for row in self.rows:
            p = row.policy
            tau_l = "-" if p.variant == "single" else f"{p.tau_l:.6f}"
            val = "failed" if row.val_map is None else f"{row.val_map:.6f}"
            lines.append(f"{p.variant}\t{tau_l}\t{p.tau_h:.6f}\t{val}")
        return "\n".join(lines) + "\n"


def grid_search(
    labeled: Dataset,
    pseudo_raw: Dataset,
    val: Dataset,
    grid: list[WeightPolicy],
    cfg: TrainConfig,
    *,
    with_finetune: bool = False,
    anchor_cfg: AnchorConfig | None = None,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    cache: FeatureCache | None = None,
) -> GridResult:
    """Train one student per grid point from the same teacher's pseudo-labels.

    Rows are ranked by validation mAP, ties broken by smaller tau_h then
    smaller tau_l.  A failing grid point is recorded and the search continues.
    """
    if not grid:
        raise ValidationError("policy grid is empty")
    rows: list[GridRow] = []
    for p in grid:
        try:
            result = train_student(
                labeled, pseudo_raw, p, val, cfg, anchor_cfg=anchor_cfg,
                score_floor=score_floor, nms_iou=nms_iou, cache=cache)
            if with_finetune:
                ft = finetune(result.model, labeled, val, cfg,
                              score_floor=score_floor, nms_iou=nms_iou, cache=cache)
                rows.append(GridRow(p, ft.after.map_50_95))
            else:
                rows.append(GridRow(p, result.report.map_50_95))
        except Exception as e:  # record and continue with the rest of the grid
            logger.warning("grid point %s failed: %s", p, e)
            rows.append(GridRow(p, None, str(e)))
    ranked = sorted(rows, key=lambda r: (
        -(r.val_map if r.val_map is not None else -np.inf),
        r.policy.tau_h, r.policy.tau_l, r.policy.variant))
    if ranked[0].val_map is None:
        raise RuntimeError("every grid point failed")
    return GridResult(ranked, ranked[0].policy)
