"""The evaluation metrics and their edge-case conventions.

Run from the repository root:  python3 demos/metrics_walkthrough.py
"""

import numpy as np

from mcads.metrics import (EmptyMaskError, boundary_pixels, confusion,
                           pixel_metrics, report, surface_metrics, threshold)

# Two 4x4 masks with every confusion cell populated.
pred = np.array([[1, 1, 0, 0],
                 [1, 0, 0, 0],
                 [0, 0, 0, 0],
                 [0, 0, 0, 1]], dtype=np.float32)
gt = np.array([[1, 0, 0, 0],
               [1, 1, 0, 0],
               [0, 0, 0, 0],
               [0, 0, 0, 1]], dtype=np.float32)
c = confusion(pred, gt)
print(f"tp {c.tp}  fp {c.fp}  fn {c.fn}  tn {c.tn}")
for name, value in pixel_metrics(pred, gt).items():
    print(f"  {name:<10} {value:.4f}")

# Conventions when a mask is empty: agreement on nothing scores 1.0, a miss
# against an empty truth zeroes precision, and FOR falls back to 0 when no
# pixel was predicted background.
empty = np.zeros((4, 4), np.float32)
print("both empty:", pixel_metrics(empty, empty))
print("pred only: ", pixel_metrics(pred, empty))

# Thresholding sends ties to foreground, so a 0.5 probability is a vote
# for nucleus rather than background.
probs = np.array([[0.49, 0.50], [0.51, 0.10]], dtype=np.float32)
print("threshold(0.5):", threshold(probs, 0.5).tolist())

# Surface distances work on boundary pixels: foreground with a 4-neighbor
# that is background, counting beyond-the-border as background.
ring = np.ones((3, 3), np.float32)
ring[1, 1] = 0
print("ring boundary pixels:", len(boundary_pixels(ring)))

# Shift a box by one pixel: no boundary point is farther than one pixel
# from the other contour, so HD95 reads 1; the overlapping side walls sit
# at distance 0, which pulls the average down to 0.5. Spacing is linear.
a = np.zeros((8, 8), np.float32)
b = np.zeros((8, 8), np.float32)
a[2:5, 2:5] = 1
b[3:6, 2:5] = 1
print("one-pixel shift:", surface_metrics(a, b))
print("same at 0.25um: ", surface_metrics(a, b, spacing=0.25))

try:
    surface_metrics(a, np.zeros((8, 8), np.float32))
except EmptyMaskError as e:
    print("empty mask ->", e)

# report() bundles everything per image and aggregates the defined values;
# pairs without a surface (an empty mask) are counted, not averaged in.
entries = [("img0", pred, gt), ("img1", empty, empty)]
out = report(entries)
print("\naggregate:", {k: round(v, 4) for k, v in out["aggregate"].items()})
print("skipped surface pairs:", out["skipped_surface"])
