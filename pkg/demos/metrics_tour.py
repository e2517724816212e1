"""The mask-quality metric suite on small hand-built masks: mIoU, thin-band
boundary F1, calibration error, and the three structural scores.
"""

import numpy as np

from crispdec.metrics import boundary_f1, compactness, ece, edge_regularity, \
    miou, tv_smoothness

gt = np.zeros((32, 32), dtype=np.int64)
gt[4:16, 4:16] = 1
gt[18:28, 18:28] = 2

# a prediction that misses part of class 2
pred = gt.copy()
pred[18:28, 24:28] = 0

iou, mean_iou = miou(pred, gt, k=3)
print("per-class IoU:", np.round(iou, 4), " mean:", round(mean_iou, 4))

print("\nboundary F1, identical masks:", boundary_f1(gt, gt))
print("boundary F1, 1-px shift:     ", boundary_f1(np.roll(gt, 1, axis=1), gt))
print("boundary F1, 3-px shift:     ", boundary_f1(np.roll(gt, 3, axis=1), gt))

# calibration: confidences that track accuracy score near zero,
# uniformly overconfident predictions do not
rng = np.random.default_rng(0)
correct = rng.random(4000) < 0.7
print("\nECE, well calibrated (conf 0.7):  ",
      round(ece(np.full(4000, 0.7), correct), 4))
print("ECE, overconfident (conf 0.99):   ",
      round(ece(np.full(4000, 0.99), correct), 4))

# structural scores on a square vs. a jagged comb
square = np.zeros((32, 32), dtype=bool)
square[8:24, 8:24] = True
comb = square.copy()
comb[8:24:2, 24] = True  # teeth
print("\nsquare: tv=%.4f compact=%.4f edge_reg=%.4f" % (
    tv_smoothness(square), compactness(square), edge_regularity(square)))
print("comb:   tv=%.4f compact=%.4f edge_reg=%.4f" % (
    tv_smoothness(comb), compactness(comb), edge_regularity(comb)))
print("square compactness is exactly pi/4:",
      np.isclose(compactness(square), np.pi / 4))
