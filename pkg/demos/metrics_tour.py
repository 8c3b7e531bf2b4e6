"""How the six segmentation scores react to typical prediction errors.

    python3 demos/metrics_tour.py
"""
import numpy as np
from scipy import ndimage

from misnet.metrics import METRIC_NAMES, all_metrics

yy, xx = np.mgrid[0:96, 0:96]
gt = (yy - 48) ** 2 / 20 ** 2 + (xx - 44) ** 2 / 28 ** 2 <= 1

soft = ndimage.gaussian_filter(gt.astype(float), 3)
cases = {
    "perfect": gt.astype(float),
    "blurred edges": soft,
    "shifted 6px": np.roll(gt, 6, axis=1).astype(float),
    "eroded": ndimage.binary_erosion(gt, iterations=4).astype(float),
    "low confidence": 0.4 * gt,
    "all background": np.zeros_like(soft),
}

print(f"{'case':<16}" + "".join(f"{m:>8}" for m in METRIC_NAMES))
for name, pred in cases.items():
    scores = all_metrics(pred, gt)
    print(f"{name:<16}" + "".join(f"{scores[m]:8.3f}" for m in METRIC_NAMES))

# A 0.4-confidence map fails the 0.5 threshold, so Dice drops to zero while
# the structure-aware S-measure still credits the correct shape.
