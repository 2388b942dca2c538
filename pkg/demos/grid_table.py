"""Grid-search the confidence thresholds on a small synthetic split.

Run: python3 demos/grid_table.py
"""

import tempfile
from pathlib import Path

from tsdet.detector import AnchorConfig
from tsdet.pipeline import generate_pseudo_labels, grid_search, train_teacher
from tsdet.policy import WeightPolicy
from tsdet.trainer import FeatureCache, TrainConfig
from tsdet.world import WorldConfig, generate_dataset, without_annotations


def main():
    work = Path(tempfile.mkdtemp(prefix="tsdet_grid_"))
    world = WorldConfig()
    labeled = generate_dataset(world, 120, seed=1, out_dir=work / "labeled")
    unlabeled = without_annotations(generate_dataset(world, 300, seed=2, out_dir=work / "unl"))
    val = generate_dataset(world, 60, seed=3, out_dir=work / "val")

    cache = FeatureCache(AnchorConfig())
    cfg = TrainConfig(max_epochs=60, seed=0)
    teacher = train_teacher(labeled, val, cfg, cache=cache)
    pseudo, _ = generate_pseudo_labels(teacher.model, unlabeled, cache=cache)
    print(f"teacher val mAP {teacher.report.map_50_95:.4f}; "
          f"{len(pseudo.annotations)} pseudo-labels\n")

    import numpy as np
    scores = np.array([a.score for a in pseudo.annotations])
    q = lambda p: float(np.quantile(scores, p))
    grid = [
        WeightPolicy("single", 0.0, q(0.97)),
        WeightPolicy("doubt", q(0.7), q(0.95)),
        WeightPolicy("progressive", q(0.95), 1.0),
    ]
    result = grid_search(labeled, pseudo, val, grid, cfg, cache=cache)
    print(result.to_table())
    best = result.best
    print(f"winner: {best.variant} (tau_l={best.tau_l}, tau_h={best.tau_h})")


if __name__ == "__main__":
    main()
