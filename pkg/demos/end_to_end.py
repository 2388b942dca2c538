"""A complete teacher -> pseudo-labels -> student -> fine-tune run at a scale
where the teacher's confidence scores carry signal; takes a few minutes.

Run: python3 demos/end_to_end.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from tsdet.detector import AnchorConfig
from tsdet.pipeline import finetune, generate_pseudo_labels, train_student, train_teacher
from tsdet.policy import WeightPolicy
from tsdet.trainer import FeatureCache, TrainConfig
from tsdet.world import WorldConfig, generate_dataset, without_annotations


def main():
    work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="tsdet_demo_"))
    world = WorldConfig()
    print(f"writing datasets under {work}")
    labeled = generate_dataset(world, 120, seed=1, out_dir=work / "labeled")
    unlabeled = without_annotations(generate_dataset(world, 400, seed=2, out_dir=work / "unlabeled"))
    val = generate_dataset(world, 80, seed=3, out_dir=work / "val")

    cache = FeatureCache(AnchorConfig())
    cfg = TrainConfig(max_epochs=60, seed=0)

    teacher = train_teacher(labeled, val, cfg, cache=cache)
    print(f"teacher baseline: val mAP {teacher.report.map_50_95:.4f} "
          f"({len(teacher.history)} epochs)")

    pseudo, _ = generate_pseudo_labels(teacher.model, unlabeled, cache=cache)
    print(f"pseudo-labels: {len(pseudo.annotations)} detections over {len(pseudo)} images")

    # place the doubt band against the teacher's actual score distribution:
    # keep the top ~5%, ignore the ambiguous middle, drop only clear junk, so
    # real-but-unsure objects are shielded instead of trained as background
    scores = np.array([a.score for a in pseudo.annotations])
    policy = WeightPolicy("doubt", float(np.quantile(scores, 0.70)),
                          float(np.quantile(scores, 0.95)))
    student = train_student(labeled, pseudo, policy, val, cfg, cache=cache)
    print(f"student ({policy.variant}, tau_l={policy.tau_l}, tau_h={policy.tau_h}): "
          f"val mAP {student.report.map_50_95:.4f}")

    ft = finetune(student.model, labeled, val, cfg, cache=cache)
    print(f"fine-tuning on real ground truth: {ft.arrow()}")
    print(f"teacher {teacher.report.map_50_95:.4f} -> fine-tuned student "
          f"{ft.after.map_50_95:.4f}")


if __name__ == "__main__":
    main()
