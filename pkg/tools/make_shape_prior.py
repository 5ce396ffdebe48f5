#!/usr/bin/env python3
"""Regenerate the bundled 17-joint shape prior asset.

The prior is a joint-level linear body model with adult proportions.
Shape modes are built as bone-stretch patterns: each mode lengthens a
set of bones along their axes, rigidly carrying the downstream subtree,
so a mode's first-order effect on bone lengths equals its stretch
pattern exactly. Patterns are orthogonalized so shape coefficients stay
identifiable next to the global scene scale.

Run from the repository root:

    python3 tools/make_shape_prior.py
"""

import json
from pathlib import Path

import numpy as np

NAMES = [
    "pelvis", "spine", "neck", "head", "head_top",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]

MEAN = np.array([
    [0.00, 0.00, 0.95],   # pelvis
    [0.00, 0.00, 1.20],   # spine
    [0.00, 0.00, 1.45],   # neck
    [0.02, 0.00, 1.60],   # head
    [0.03, 0.00, 1.72],   # head_top
    [0.00, 0.20, 1.42],   # l_shoulder
    [0.00, 0.47, 1.38],   # l_elbow
    [0.00, 0.72, 1.34],   # l_wrist
    [0.00, -0.20, 1.42],  # r_shoulder
    [0.00, -0.47, 1.38],  # r_elbow
    [0.00, -0.72, 1.34],  # r_wrist
    [0.00, 0.10, 0.92],   # l_hip
    [0.01, 0.12, 0.50],   # l_knee
    [0.02, 0.13, 0.08],   # l_ankle
    [0.00, -0.10, 0.92],  # r_hip
    [0.01, -0.12, 0.50],  # r_knee
    [0.02, -0.13, 0.08],  # r_ankle
])

# (parent, child) pairs forming a tree rooted at the pelvis
BONES = [
    [0, 1], [1, 2], [2, 3], [3, 4],
    [2, 5], [5, 6], [6, 7],
    [2, 8], [8, 9], [9, 10],
    [0, 11], [11, 12], [12, 13],
    [0, 14], [14, 15], [15, 16],
]

# bone-stretch patterns (meters of extra length per unit coefficient),
# indexed by bone position in BONES
RAW_PATTERNS = {
    "stature": {0: 0.020, 1: 0.020, 11: 0.030, 12: 0.030, 14: 0.030, 15: 0.030},
    "arm_length": {5: 0.030, 6: 0.030, 8: 0.030, 9: 0.030},
    "torso_vs_legs": {0: 0.030, 1: 0.030, 11: -0.015, 12: -0.015, 14: -0.015, 15: -0.015},
    "shoulder_width": {4: 0.025, 7: 0.025},
    "hip_width": {10: 0.020, 13: 0.020},
    "head_size": {2: 0.020, 3: 0.020},
    "forearm_share": {6: 0.025, 5: -0.012, 9: 0.025, 8: -0.012},
    "shin_share": {12: 0.025, 11: -0.012, 15: 0.025, 14: -0.012},
    "upper_arm": {5: 0.020, 8: 0.020},
    "neck_length": {1: 0.015, 2: 0.010},
}


def subtree(joint: int) -> list[int]:
    children = {}
    for p, c in BONES:
        children.setdefault(p, []).append(c)
    out, stack = [], [joint]
    while stack:
        j = stack.pop()
        out.append(j)
        stack.extend(children.get(j, []))
    return out


def stretch_to_displacement(pattern: np.ndarray) -> np.ndarray:
    """Joint displacement field whose bone-length effect equals `pattern`.

    Processing bones root-to-leaf, lengthening bone (p, c) by s moves c
    and its whole subtree by s along the bone axis; downstream bone
    lengths are untouched because the subtree moves rigidly.
    """
    disp = np.zeros((len(NAMES), 3))
    for b, (p, c) in enumerate(BONES):
        s = pattern[b]
        if s == 0.0:
            continue
        axis = MEAN[c] - MEAN[p]
        axis = axis / np.linalg.norm(axis)
        for j in subtree(c):
            disp[j] += s * axis
    return disp


def build_basis() -> np.ndarray:
    raw = np.zeros((16, len(RAW_PATTERNS)))
    for k, pattern in enumerate(RAW_PATTERNS.values()):
        for b, v in pattern.items():
            raw[b, k] = v
    # uniform scaling belongs to the scene scale, not the shape space:
    # remove each pattern's component along the mean bone lengths, then
    # orthogonalize the signatures, keeping each column's scale
    mean_lengths = np.array(
        [np.linalg.norm(MEAN[c] - MEAN[p]) for p, c in BONES]
    )
    unit = mean_lengths / np.linalg.norm(mean_lengths)
    norms = np.linalg.norm(raw, axis=0)
    raw = raw - np.outer(unit, unit @ raw)
    q, _ = np.linalg.qr(raw)
    patterns = q * norms
    basis = np.zeros((len(NAMES), 3, patterns.shape[1]))
    for k in range(patterns.shape[1]):
        basis[:, :, k] = stretch_to_displacement(patterns[:, k])
    return basis


def main():
    basis = build_basis()
    payload = {
        "names": NAMES,
        "bones": BONES,
        "mean": [[round(v, 6) for v in row] for row in MEAN.tolist()],
        "basis": [
            [[round(v, 8) for v in col] for col in rows]
            for rows in basis.tolist()
        ],
    }
    out = Path(__file__).resolve().parents[1] / "src" / "camocap" / "assets" / "shape_prior_17.json"
    out.write_text(json.dumps(payload) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
