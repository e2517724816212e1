"""Mask-quality metrics: mIoU, thin-band Boundary-F1, expected calibration
error, and structural scores (TV-smoothness, compactness, edge regularity).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fileio import IGNORE, read_ctsr, read_pgm
from .geometry import boundary_seeds


@dataclass
class MetricReport:
    miou: float
    boundary_f1: float
    ece: float | None
    tv_smooth: float
    compactness: float
    edge_regularity: float
    per_class_iou: np.ndarray = field(default=None)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """K x K counts, rows = ground truth, cols = prediction; IGNORE pixels
    in gt are excluded."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("pred/gt shape mismatch")
    keep = gt != IGNORE
    pred, gt = pred[keep], gt[keep]
    if np.any((pred < 0) | (pred >= k)) or np.any((gt < 0) | (gt >= k)):
        raise ValueError(f"labels out of range for K={k}")
    return np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def miou(pred: np.ndarray, gt: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where the class is absent from both maps) and the
    mean over the remaining classes."""
    cm = confusion_matrix(pred, gt, k)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    mean = float(np.mean(iou[present])) if present.any() else 1.0
    return iou, mean


def _chebyshev_hit(points: np.ndarray, targets: np.ndarray, band_px: int) -> np.ndarray:
    """For each True pixel in `points`, whether a True pixel of `targets`
    lies within Chebyshev distance < band_px."""
    r = band_px - 1
    if r > 0:
        struct = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
        targets = ndimage.binary_dilation(targets, structure=struct)
    return points & targets


def boundary_f1(pred: np.ndarray, gt: np.ndarray, band_px: int = 2) -> float:
    """F1 of class-agnostic boundary pixels under a Chebyshev tolerance band."""
    pb = boundary_seeds(np.asarray(pred))
    gb = boundary_seeds(np.asarray(gt))
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    precision = _chebyshev_hit(pb, gb, band_px).sum() / pb.sum()
    recall = _chebyshev_hit(gb, pb, band_px).sum() / gb.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def ece(confidences: np.ndarray, correct: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.shape != corr.shape:
        raise ValueError("confidence/correctness shape mismatch")
    if conf.size == 0:
        return 0.0
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0,1]")
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    total = conf.size
    score = 0.0
    for b in range(bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b == 0:
            continue
        score += (n_b / total) * abs(corr[sel].mean() - conf[sel].mean())
    return float(score)


def tv_smoothness(mask: np.ndarray) -> float:
    """1 - (4-neighbor transition count) / (2*H*W), clamped to [0,1]."""
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    transitions = int((m[:, 1:] != m[:, :-1]).sum() + (m[1:, :] != m[:-1, :]).sum())
    return float(np.clip(1.0 - transitions / (2.0 * h * w), 0.0, 1.0))


def _perimeter_edges(m: np.ndarray) -> int:
    """Count of foreground pixel sides exposed to background or the border."""
    per = int((m[:, 1:] != m[:, :-1]).sum() + (m[1:, :] != m[:-1, :]).sum())
    per += int(m[0, :].sum() + m[-1, :].sum() + m[:, 0].sum() + m[:, -1].sum())
    return per


def compactness(mask: np.ndarray) -> float:
    """Isoperimetric ratio 4*pi*area / perimeter^2, clamped to [0,1]."""
    m = np.asarray(mask).astype(bool)
    area = int(m.sum())
    if area == 0:
        return 0.0
    per = _perimeter_edges(m)  # >= 4 whenever area > 0
    return float(np.clip(4.0 * np.pi * area / per ** 2, 0.0, 1.0))


_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def _trace_boundary(comp: np.ndarray, start: tuple) -> list:
    """Moore-neighbor trace of one component's outer boundary, clockwise,
    Jacob's stopping criterion. Returns the closed pixel chain."""
    h, w = comp.shape

    def fg(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and comp[p]

    backtrack = (start[0], start[1] - 1)  # entered scanning from the west
    chain = [start]
    cur = start
    first_state = None
    for _ in range(8 * comp.sum() + 8):
        bdir = (backtrack[0] - cur[0], backtrack[1] - cur[1])
        k0 = _MOORE_INDEX[bdir]
        nxt = None
        for j in range(1, 9):
            d = _MOORE[(k0 + j) % 8]
            cand = (cur[0] + d[0], cur[1] + d[1])
            if fg(cand):
                nxt = cand
                break
            backtrack_cand = cand
        if nxt is None:
            return chain  # isolated pixel
        state = (cur, nxt)
        if first_state is None:
            first_state = state
        elif state == first_state:
            break
        backtrack = backtrack_cand if j > 1 else backtrack
        chain.append(nxt)
        cur = nxt
    return chain


def edge_regularity(mask: np.ndarray, curvature_threshold: float = np.pi / 4) -> float:
    """Fraction of boundary pixels whose chain direction turns by more than
    the threshold. Empty boundary gives 0."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return 0.0
    labeled, n_comp = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    flagged: set = set()
    boundary_pixels: set = set()
    for c in range(1, n_comp + 1):
        comp = labeled == c
        rows, cols = np.nonzero(comp)
        start = (int(rows[0]), int(cols[0]))
        chain = _trace_boundary(comp, start)
        boundary_pixels.update(chain)
        if len(chain) < 3:
            continue
        # closed chain: wrap directions around
        pts = chain[:-1] if chain[0] == chain[-1] else chain
        n = len(pts)
        for i in range(n):
            prev_p, p, next_p = pts[i - 1], pts[i], pts[(i + 1) % n]
            d_in = (p[0] - prev_p[0], p[1] - prev_p[1])
            d_out = (next_p[0] - p[0], next_p[1] - p[1])
            a_in = np.arctan2(d_in[0], d_in[1])
            a_out = np.arctan2(d_out[0], d_out[1])
            turn = abs((a_out - a_in + np.pi) % (2 * np.pi) - np.pi)
            if turn > curvature_threshold + 1e-9:
                flagged.add(p)
    if not boundary_pixels:
        return 0.0
    return float(len(flagged) / len(boundary_pixels))


def structural_scores(pred: np.ndarray, k: int) -> tuple[float, float, float]:
    """TV/compactness/edge-regularity of each foreground class's binary mask,
    area-weighted over classes present in the prediction."""
    pred = np.asarray(pred)
    tv = comp = edge = 0.0
    total_area = 0
    for c in range(1, k):
        m = pred == c
        area = int(m.sum())
        if area == 0:
            continue
        tv += area * tv_smoothness(m)
        comp += area * compactness(m)
        edge += area * edge_regularity(m)
        total_area += area
    if total_area == 0:
        return 1.0, 0.0, 0.0
    return tv / total_area, comp / total_area, edge / total_area


CSV_COLUMNS = ["image", "miou", "boundary_f1", "ece", "tv_smooth",
               "compactness", "edge_regularity"]


def evaluate(pred_dir, gt_dir, k: int, band_px: int = 2, bins: int = 10,
             conf_dir=None) -> tuple[MetricReport, list, list]:
    """Score every PGM pair under two directories.

    Returns (aggregate report, per-image CSV rows, error rows). Aggregates
    are means of the per-image values. Pairs that fail to load or mismatch
    in shape are recorded and skipped.
    """
    names = sorted(f for f in os.listdir(gt_dir) if f.endswith(".pgm"))
    rows, errors = [], []
    accum = {c: [] for c in CSV_COLUMNS[1:]}
    iou_vectors = []
    for name in names:
        try:
            gt = read_pgm(os.path.join(gt_dir, name))
            pred = read_pgm(os.path.join(pred_dir, name))
            if pred.shape != gt.shape:
                raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
            iou_vec, mean_iou = miou(pred, gt, k)
            bf1 = boundary_f1(pred, gt, band_px)
            tv, comp, edge = structural_scores(pred, k)
            e = ""
            if conf_dir is not None:
                conf = read_ctsr(os.path.join(conf_dir, name[:-4] + ".ctsr"))
                keep = gt != IGNORE
                e = ece(conf[keep], (pred == gt)[keep], bins)
                accum["ece"].append(e)
            iou_vectors.append(iou_vec)
            for key, val in (("miou", mean_iou), ("boundary_f1", bf1),
                             ("tv_smooth", tv), ("compactness", comp),
                             ("edge_regularity", edge)):
                accum[key].append(val)
            rows.append([name, mean_iou, bf1, e, tv, comp, edge])
        except Exception as exc:  # noqa: BLE001 - error rows keep the run going
            errors.append([name, str(exc)])
    if not accum["miou"]:
        report = MetricReport(miou=float("nan"), boundary_f1=float("nan"),
                              ece=None, tv_smooth=float("nan"),
                              compactness=float("nan"),
                              edge_regularity=float("nan"))
        return report, rows, errors
    mean_ece = float(np.mean(accum["ece"])) if accum["ece"] else None
    per_class = None
    if iou_vectors:
        stacked = np.stack(iou_vectors)
        seen = ~np.all(np.isnan(stacked), axis=0)
        per_class = np.full(stacked.shape[1], np.nan)
        per_class[seen] = np.nanmean(stacked[:, seen], axis=0)
    report = MetricReport(
        miou=float(np.mean(accum["miou"])),
        boundary_f1=float(np.mean(accum["boundary_f1"])),
        ece=mean_ece,
        tv_smooth=float(np.mean(accum["tv_smooth"])),
        compactness=float(np.mean(accum["compactness"])),
        edge_regularity=float(np.mean(accum["edge_regularity"])),
        per_class_iou=per_class,
    )
    return report, rows, errors


def write_csv(path, rows, aggregate: MetricReport | None = None) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row)
        if aggregate is not None:
            writer.writerow(["aggregate", aggregate.miou, aggregate.boundary_f1,
                             aggregate.ece if aggregate.ece is not None else "",
                             aggregate.tv_smooth, aggregate.compactness,
                             aggregate.edge_regularity])
