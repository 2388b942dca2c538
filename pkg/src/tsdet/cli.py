"""Command-line surface: gen, teacher, pseudo, student, finetune, eval, iterate, grid.

Config files use the same JSON conventions as manifests; flags override
config-file values, and every run echoes its full effective configuration to
the work dir for provenance.  Exit codes: 0 success, 1 validation/usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import backend as backend_mod
from . import pipeline, world
from .annotations import load_manifest, rebase_dataset, save_manifest
from .detector import AnchorConfig, DetectorModel
from .errors import ValidationError
from .evaluation import detections_from_dataset, map_50_95
from .pipeline import PipelineConfig
from .policy import VARIANTS, WeightPolicy, apply_policy
from .trainer import FeatureCache, TrainConfig, evaluate_model
from .world import WorldConfig

logger = logging.getLogger("tsdet")


@dataclass
class RunConfig:
    work_dir: Path
    seed: int = 0
    policy_variant: str | None = None
    tau_l: float | None = None
    tau_h: float | None = None
    nms_iou: float = 0.5
    score_floor: float = 0.05
    rounds: int = 1
    detector: str = "reference"
    backend_cmd: str | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def policy(self) -> WeightPolicy | None:
        if self.policy_variant is None:
            return None
        tau_h = 1.0 if self.tau_h is None else self.tau_h
        tau_l = 0.0 if self.tau_l is None else self.tau_l
        return WeightPolicy(self.policy_variant, tau_l, tau_h)

    def to_json_dict(self) -> dict:
        return {
            "work_dir": str(self.work_dir),
            "seed": self.seed,
            "policy": None if self.policy_variant is None else {
                "variant": self.policy_variant, "tau_l": self.tau_l, "tau_h": self.tau_h},
            "nms_iou": self.nms_iou,
            "score_floor": self.score_floor,
            "rounds": self.rounds,
            "detector": self.detector,
            "backend_cmd": self.backend_cmd,
            "world": self.world.to_json_dict(),
            "train": self.train.to_json_dict(),
            "anchors": {
                "stride": self.anchors.stride,
                "sizes": list(self.anchors.sizes),
                "aspect_ratios": list(self.anchors.aspect_ratios),
                "positive_iou": self.anchors.positive_iou,
                "negative_iou": self.anchors.negative_iou,
            },
        }

    def echo(self) -> Path:
        self.work_dir.mkdir(parents=True, exist_ok=True)
        out = self.work_dir / "effective_config.json"
        out.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems are validation errors (exit 1)
        raise ValidationError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="tsdet", description="Teacher-student semi-supervised detection engine")
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--work-dir", type=Path, help="directory for artifacts and reports")
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", choices=list(VARIANTS))
    p.add_argument("--tau-l", type=float, dest="tau_l")
    p.add_argument("--tau-h", type=float, dest="tau_h")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--score-floor", type=float, dest="score_floor")
    p.add_argument("--rounds", type=int)
    p.add_argument("--backend-cmd", dest="backend_cmd")
    p.add_argument("--detector", choices=["reference", "backend"])

    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--images", type=int, required=True)
    gen.add_argument("--subdir", default="data")
    gen.add_argument("--unlabeled", action="store_true",
                     help="write an images-only manifest (no annotations)")

    teacher = sub.add_parser("teacher", help="train the supervised baseline")
    teacher.add_argument("--labeled", type=Path, required=True)
    teacher.add_argument("--val", type=Path, required=True)

    pseudo = sub.add_parser("pseudo", help="generate pseudo-labels with a trained model")
    pseudo.add_argument("--model", type=Path, required=True)
    pseudo.add_argument("--unlabeled", type=Path, required=True)
    pseudo.add_argument("--out", type=Path)

    student = sub.add_parser("student", help="train a student on labeled + pseudo data")
    student.add_argument("--labeled", type=Path, required=True)
    student.add_argument("--pseudo", type=Path, required=True)
    student.add_argument("--val", type=Path, required=True)

    ft = sub.add_parser("finetune", help="fine-tune a student on labeled data")
    ft.add_argument("--model", type=Path, required=True)
    ft.add_argument("--labeled", type=Path, required=True)
    ft.add_argument("--val", type=Path, required=True)

    ev = sub.add_parser("eval", help="evaluate a model or a detections manifest")
    ev.add_argument("--model", type=Path)
    ev.add_argument("--detections", type=Path)
    ev.add_argument("--manifest", type=Path, required=True)

    it = sub.add_parser("iterate", help="run teacher/pseudo/student/finetune rounds")
    it.add_argument("--labeled", type=Path, required=True)
    it.add_argument("--unlabeled", type=Path, required=True)
    it.add_argument("--val", type=Path, required=True)

    grid = sub.add_parser("grid", help="grid-search policy thresholds")
    grid.add_argument("--labeled", type=Path, required=True)
    grid.add_argument("--pseudo", type=Path, required=True)
    grid.add_argument("--val", type=Path, required=True)
    grid.add_argument("--grid", required=True,
                      help="semicolon-separated points, e.g. 'single::0.9;doubt:0.5:0.9'")
    grid.add_argument("--finetune", action="store_true")
    return p


def _load_config_file(path: Path) -> dict:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ValidationError(f"cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path}: {e.msg} at line {e.lineno}")
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return raw


def parse_and_validate(argv: list[str]) -> tuple[RunConfig, argparse.Namespace]:
    args = build_parser().parse_args(argv)
    raw = _load_config_file(args.config) if args.config else {}

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return raw.get(key, default)

    policy_raw = raw.get("policy") or {}
    work_dir = pick(args.work_dir, "work_dir", None)
    if work_dir is None:
        raise ValidationError("--work-dir (or work_dir in the config file) is required")
    seed = int(pick(args.seed, "seed", 0))
    train_raw = dict(raw.get("train", {}))
    train_raw.setdefault("seed", seed)
    if args.seed is not None:
        train_raw["seed"] = args.seed
    cfg = RunConfig(
        work_dir=Path(work_dir),
        seed=seed,
        policy_variant=pick(args.policy, "", policy_raw.get("variant")),
        tau_l=pick(args.tau_l, "", policy_raw.get("tau_l")),
        tau_h=pick(args.tau_h, "", policy_raw.get("tau_h")),
        nms_iou=float(pick(args.nms_iou, "nms_iou", 0.5)),
        score_floor=float(pick(args.score_floor, "score_floor", 0.05)),
        rounds=int(pick(args.rounds, "rounds", 1)),
        detector=pick(args.detector, "detector", None) or
                 ("backend" if pick(args.backend_cmd, "backend_cmd", None) else "reference"),
        backend_cmd=pick(args.backend_cmd, "backend_cmd", None),
        world=WorldConfig.from_json_dict(raw.get("world", {})),
        train=TrainConfig.from_json_dict(train_raw),
        anchors=_anchors_from_dict(raw.get("anchors", {})),
    )
    if cfg.detector == "backend" and not cfg.backend_cmd:
        raise ValidationError("detector 'backend' requires --backend-cmd")
    if cfg.detector == "reference" and cfg.backend_cmd:
        raise ValidationError("conflicting detector sources: --backend-cmd given but "
                              "detector is 'reference'")
    cfg.policy()  # validates variant/threshold combination early
    return cfg, args


def _anchors_from_dict(raw: dict) -> AnchorConfig:
    kwargs = {}
    if "stride" in raw:
        kwargs["stride"] = int(raw["stride"])
    for key in ("sizes", "aspect_ratios"):
        if key in raw:
            kwargs[key] = tuple(raw[key])
    for key in ("positive_iou", "negative_iou"):
        if key in raw:
            kwargs[key] = float(raw[key])
    return AnchorConfig(**kwargs)


def parse_grid_spec(spec: str) -> list[WeightPolicy]:
    points = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid point {chunk!r} must be variant:tau_l:tau_h")
        variant, tau_l, tau_h = parts
        points.append(WeightPolicy(
            variant, float(tau_l) if tau_l else 0.0, float(tau_h)))
    if not points:
        raise ValidationError("empty grid specification")
    return points


def _require_reference(cfg: RunConfig, command: str) -> None:
    if cfg.detector != "reference":
        raise ValidationError(
            f"the {command} command supports only the reference detector; the "
            f"backend protocol has no warm-start message in version 1")


def _backend_handle(cfg: RunConfig) -> backend_mod.BackendHandle:
    return backend_mod.spawn_backend(cfg.backend_cmd)


def run(args: argparse.Namespace, cfg: RunConfig) -> int:
    cfg.echo()
    cache = FeatureCache(cfg.anchors)
    command = args.command

    if command == "gen":
        out_dir = cfg.work_dir / args.subdir
        d = world.generate_dataset(cfg.world, args.images, cfg.seed, out_dir)
        if args.unlabeled:
            d = world.without_annotations(d)
        save_manifest(d, out_dir / "manifest.json")
        print(f"wrote {len(d)} images and {out_dir / 'manifest.json'}")
        return 0

    if command == "teacher":
        labeled = load_manifest(args.labeled)
        val = load_manifest(args.val)
        if cfg.detector == "backend":
            with _backend_handle(cfg) as h:
                reply = backend_mod.request_train(
                    h, args.labeled, None,
                    {"seed": cfg.seed, "val_manifest": str(args.val)},
                    cfg.work_dir / "teacher.backend_model")
            print(f"backend model {reply['model_ref']} val mAP {reply['val_map']}")
            return 0
        result = pipeline.train_teacher(
            labeled, val, cfg.train, anchor_cfg=cfg.anchors,
            score_floor=cfg.score_floor, nms_iou=cfg.nms_iou, cache=cache)
        result.model.save(cfg.work_dir / "teacher.ckpt")
        result.report.save(cfg.work_dir / "eval_teacher.report")
        _save_history(cfg.work_dir / "teacher_history.json", result.history)
        print(f"teacher val mAP {result.report.map_50_95:.4f}")
        return 0

    if command == "pseudo":
        out = args.out or (cfg.work_dir / "pseudo.manifest")
        unlabeled = load_manifest(args.unlabeled)
        if cfg.detector == "backend":
            with _backend_handle(cfg) as h:
                backend_mod.request_predict(
                    h, args.unlabeled, out, cfg.score_floor, apply_nms=True,
                    nms_iou=cfg.nms_iou, model_ref=str(args.model))
            print(f"wrote {out}")
            return 0
        model = DetectorModel.load(args.model)
        pseudo, errors = pipeline.generate_pseudo_labels(
            model, unlabeled, cfg.score_floor, cfg.nms_iou, cache)
        save_manifest(rebase_dataset(pseudo, out.parent), out)
        print(f"wrote {out} with {len(pseudo.annotations)} pseudo-labels")
        if errors:
            for e in errors:
                print(f"skipped: {e}", file=sys.stderr)
            return 2
        return 0

    if command == "student":
        labeled = load_manifest(args.labeled)
        pseudo = load_manifest(args.pseudo)
        val = load_manifest(args.val)
        policy = cfg.policy()
        if policy is None and any(a.status is None for a in pseudo.annotations):
            raise ValidationError("student training needs --policy or a policy-applied "
                                  "pseudo manifest")
        if cfg.detector == "backend":
            applied_path = cfg.work_dir / "pseudo_applied.manifest"
            applied = apply_policy(pseudo, policy) if policy else pseudo
            save_manifest(rebase_dataset(applied, cfg.work_dir), applied_path)
            with _backend_handle(cfg) as h:
                reply = backend_mod.request_train(
                    h, args.labeled, applied_path,
                    {"seed": cfg.seed, "val_manifest": str(args.val)},
                    cfg.work_dir / "student.backend_model")
            print(f"backend model {reply['model_ref']} val mAP {reply['val_map']}")
            return 0
        result = pipeline.train_student(
            labeled, pseudo, policy, val, cfg.train, anchor_cfg=cfg.anchors,
            score_floor=cfg.score_floor, nms_iou=cfg.nms_iou, cache=cache)
        result.model.save(cfg.work_dir / "student.ckpt")
        result.report.save(cfg.work_dir / "eval_student.report")
        _save_history(cfg.work_dir / "student_history.json", result.history)
        print(f"student val mAP {result.report.map_50_95:.4f}")
        return 0

    if command == "finetune":
        _require_reference(cfg, "finetune")
        model = DetectorModel.load(args.model)
        labeled = load_manifest(args.labeled)
        val = load_manifest(args.val)
        result = pipeline.finetune(
            model, labeled, val, cfg.train,
            score_floor=cfg.score_floor, nms_iou=cfg.nms_iou, cache=cache)
        result.model.save(cfg.work_dir / "student_ft.ckpt")
        result.after.save(cfg.work_dir / "eval_student_ft.report")
        (cfg.work_dir / "finetune_arrow.txt").write_text(result.arrow() + "\n", encoding="utf-8")
        print(f"fine-tune {result.arrow()}")
        return 0

    if command == "eval":
        gt = load_manifest(args.manifest)
        if (args.model is None) == (args.detections is None):
            raise ValidationError("eval needs exactly one of --model or --detections")
        if args.model is not None:
            model = DetectorModel.load(args.model)
            if model.catalog != gt.catalog:
                raise ValidationError("model catalog does not match ground-truth catalog")
            report = evaluate_model(model, gt, cfg.score_floor, cfg.nms_iou, cache)
        else:
            dets = load_manifest(args.detections)
            if dets.catalog != gt.catalog:
                raise ValidationError("detections catalog does not match ground-truth catalog")
            report = map_50_95(detections_from_dataset(dets), gt)
        report.save(cfg.work_dir / "eval.report")
        print(f"mAP {report.map_50_95:.4f}")
        return 0

    if command == "iterate":
        _require_reference(cfg, "iterate")
        policy = cfg.policy()
        if policy is None:
            raise ValidationError("iterate requires --policy")
        labeled = load_manifest(args.labeled)
        unlabeled = load_manifest(args.unlabeled)
        val = load_manifest(args.val)
        pcfg = PipelineConfig(
            work_dir=cfg.work_dir, train=cfg.train, policy=policy,
            anchor_cfg=cfg.anchors, score_floor=cfg.score_floor, nms_iou=cfg.nms_iou)
        state = pipeline.iterate(labeled, unlabeled, val, cfg.rounds, pcfg, cache=cache)
        for k in sorted(state.round_maps):
            maps = state.round_maps[k]
            print(f"round {k}: teacher {maps['teacher']:.4f} student {maps['student']:.4f} "
                  f"fine-tuned {maps['student_ft']:.4f}")
        return 0

    if command == "grid":
        _require_reference(cfg, "grid")
        labeled = load_manifest(args.labeled)
        pseudo = load_manifest(args.pseudo)
        val = load_manifest(args.val)
        grid = parse_grid_spec(args.grid)
        result = pipeline.grid_search(
            labeled, pseudo, val, grid, cfg.train, with_finetune=args.finetune,
            anchor_cfg=cfg.anchors, score_floor=cfg.score_floor, nms_iou=cfg.nms_iou,
            cache=cache)
        table_path = cfg.work_dir / "grid_results.tsv"
        table_path.write_text(result.to_table(), encoding="utf-8")
        best = result.best
        print(result.to_table(), end="")
        print(f"best: {best.variant} tau_l={best.tau_l} tau_h={best.tau_h}")
        return 0

    raise ValidationError(f"unknown command {command!r}")


def _save_history(path: Path, history) -> None:
    payload = [h.to_json_dict() for h in history]
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, args = parse_and_validate(sys.argv[1:] if argv is None else argv)
        return run(args, cfg)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
