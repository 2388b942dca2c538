"""Show how the three loss parametrizations weight a pseudo-label by confidence.

Run: python3 demos/weight_curves.py
"""

import numpy as np

from tsdet.policy import WeightPolicy, assign_status

POLICIES = [
    ("single threshold", WeightPolicy("single", 0.0, 0.9)),
    ("doubt band", WeightPolicy("doubt", 0.5, 0.9)),
    ("progressive doubt", WeightPolicy("progressive", 0.5, 0.9)),
]


def effective_weight(score: float, policy: WeightPolicy) -> float:
    """Loss weight a kept label contributes; 0 covers both ignore and drop."""
    st = assign_status(score, policy)
    return st.weight if st.kind == "keep" else 0.0


def main():
    scores = np.linspace(0.0, 1.0, 21)
    header = "score   " + "".join(f"{name:>20s}" for name, _ in POLICIES)
    print(header)
    print("-" * len(header))
    for s in scores:
        cells = []
        for _name, policy in POLICIES:
            st = assign_status(float(s), policy)
            label = {"keep": f"keep({effective_weight(float(s), policy):.2f})",
                     "ignore": "ignore",
                     "drop": "drop"}[st.kind]
            cells.append(f"{label:>20s}")
        print(f"{s:5.2f}  " + "".join(cells))
    print("\nBelow tau_l the band policies drop the label (the region becomes "
          "background);\ninside [tau_l, tau_h) doubt ignores it entirely while "
          "progressive keeps it with a\nlinearly growing weight; at or above "
          "tau_h everyone keeps it at full weight.")


if __name__ == "__main__":
    main()
