"""Boundary benchmark: edge NMS, tolerance matching, PR sweep, ODS/OIS.

F-measure conventions used throughout:

* precision is 0 when nothing is predicted (tp + fp == 0);
* an (image, threshold) pair whose ground truth is empty is left out of
  aggregation;
* F = 2PR / (P + R), and F = 0 when P + R == 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UsageError


@dataclass
class EvalConfig:
    thresholds: int = 99
    max_dist_fraction: float = 0.0075
    apply_nms: bool = False

    def __post_init__(self):
        if self.thresholds < 1:
            raise UsageError("thresholds: need at least one")
        if self.max_dist_fraction <= 0:
            raise UsageError("max_dist_fraction: must be positive")

    def threshold_values(self):
        k = np.arange(1, self.thresholds + 1)
        return k / (self.thresholds + 1.0)


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


def f_measure(tp, fp, fn):
    """(precision, recall, F) with the package's 0/0 conventions."""
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


# ---------------------------------------------------------------------------
# NMS


def _smooth(p, sigma=1.5, radius=4):
    return ndimage.gaussian_filter(p, sigma, mode="nearest", truncate=radius / sigma)


def ridge_normal(s):
    """Unit normal (ny, nx) across ridges of ``s``.

    Taken from the gradients of the gradient (the Hessian): the eigenvector
    of the most negative curvature.  First derivatives vanish on a ridge
    crest, so they cannot orient the crest pixels themselves.
    """
    gy, gx = np.gradient(s)
    hyy, hyx = np.gradient(gy)
    hxy, hxx = np.gradient(gx)
    phi = 0.5 * np.arctan2(hxy + hyx, hxx - hyy) + np.pi / 2
    return np.sin(phi), np.cos(phi)


def _nms_pass(p, sigma, radius, slack):
    s = _smooth(p, sigma, radius)
    ny, nx = ridge_normal(s)
    yy, xx = np.mgrid[0:p.shape[0], 0:p.shape[1]].astype(np.float64)
    keep = p > 0
    for sign in (1.0, -1.0):
        coords = [yy + sign * ny, xx + sign * nx]
        p_nb = ndimage.map_coordinates(p, coords, order=1, mode="nearest")
        s_nb = ndimage.map_coordinates(s, coords, order=1, mode="nearest")
        # a neighbour wins if clearly larger, or tied within the slack and larger once smoothed
        beaten = (slack * p_nb > p) | ((p_nb >= slack * p) & (s_nb > s))
        keep &= ~beaten
    return np.where(keep, p, 0.0)


def nms_thin(p, sigma=1.5, radius=4, slack=0.99, max_iter=20):
    """Thin an edge map to 1-px ridges along the edge normal.

    Orientation comes from a Gaussian-smoothed copy (sigma 1.5, radius 4).  A
    pixel is kept iff neither bilinear neighbour at +-1 px along the normal
    beats it: a neighbour beats it when its value exceeds ``p / slack``, or
    when the two are within the slack and the neighbour is higher in the
    smoothed copy (this is what collapses flat plateaus to their centre).
    The pass is repeated until the kept set stops changing, so the result is
    a fixed point and ``nms_thin(nms_thin(p)) == nms_thin(p)``.
    Survivors keep their original values.
    """
    out = np.asarray(p, dtype=np.float64)
    for _ in range(max_iter):
        nxt = _nms_pass(out, sigma, radius, slack)
        if np.array_equal(nxt > 0, out > 0):
            return nxt
        out = nxt
    return out


# ---------------------------------------------------------------------------
# matching


def candidate_pairs(pred_mask, gt_mask, max_dist):
    """All (pred, gt) pixel pairs within ``max_dist``, in greedy processing order.

    Returns arrays (pred_index, gt_index, pred_linear, gt_linear).  Order is
    ascending distance, then fewest competing candidates (pred degree + gt
    degree), then the unordered pair of linear pixel indices.  Every key is
    symmetric, so swapping the roles of pred and gt does not reorder pairs.
    """
    w = pred_mask.shape[1]
    pc = np.argwhere(pred_mask)
    gc = np.argwhere(gt_mask)
    empty = np.zeros(0, dtype=np.int64)
    if len(pc) == 0 or len(gc) == 0:
        return empty, empty, empty, empty
    sdm = cKDTree(pc).sparse_distance_matrix(cKDTree(gc), max_dist, output_type="ndarray")
    i, j, d = sdm["i"].astype(np.int64), sdm["j"].astype(np.int64), sdm["v"]
    plin, glin = pc[i, 0] * w + pc[i, 1], gc[j, 0] * w + gc[j, 1]
    deg = np.bincount(i, minlength=len(pc))[i] + np.bincount(j, minlength=len(gc))[j]
    lo, hi = np.minimum(plin, glin), np.maximum(plin, glin)
    order = np.lexsort((hi, lo, deg, d))
    return i[order], j[order], plin[order], glin[order]


def _greedy(pi, gj, n_pred, n_gt):
    used_p = np.zeros(n_pred, dtype=bool)
    used_g = np.zeros(n_gt, dtype=bool)
    tp = 0
    for a, b in zip(pi.tolist(), gj.tolist()):
        if not used_p[a] and not used_g[b]:
            used_p[a] = used_g[b] = True
            tp += 1
    return tp


def match_boundaries(pred, gt, max_dist):
    """Greedy one-to-one matching of predicted and GT pixels within ``max_dist`` px."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction dims {pred.shape} != ground-truth dims {gt.shape}")
    if max_dist <= 0:
        raise UsageError("max_dist must be positive")
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    pi, gj, _, _ = candidate_pairs(pred, gt, max_dist)
    tp = _greedy(pi, gj, n_pred, n_gt)
    return MatchCounts(tp, n_pred - tp, n_gt - tp)


def max_dist_px(shape, fraction):
    return fraction * math.hypot(*shape[:2])


def _sweep_image(p, gt, thresholds, max_dist):
    """Counts (K, 3) for one image over all thresholds.

    Candidate pairs are computed once at the lowest threshold and filtered,
    which preserves the greedy order at every higher threshold.
    """
    gt = np.asarray(gt).astype(bool)
    base = p >= thresholds[0]
    pi, gj, plin, _ = candidate_pairs(base, gt, max_dist)
    pvals = p[base]  # row-major, same order as pred indices
    pair_vals = pvals[pi] if len(pi) else np.zeros(0)
    n_gt = int(gt.sum())
    out = np.zeros((len(thresholds), 3), dtype=np.int64)
    n_base = int(base.sum())
    for k, t in enumerate(thresholds):
        n_pred = int(np.count_nonzero(pvals >= t))
        sel = pair_vals >= t
        tp = _greedy(pi[sel], gj[sel], n_base, n_gt)
        out[k] = (tp, n_pred - tp, n_gt - tp)
    return out


# ---------------------------------------------------------------------------
# PR sweep


@dataclass
class EvalReport:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    ods_index: int
    ods_threshold: float
    ods_f: float
    ois_f: float
    ois_precision: float
    ois_recall: float
    counts: np.ndarray  # (images, K, 3) tp/fp/fn
    image_best_threshold: list = field(default_factory=list)
    image_best_f: list = field(default_factory=list)
    apply_nms: bool = False
    max_dist_fraction: float = 0.0075

    @property
    def ods_precision(self):
        return float(self.precision[self.ods_index])

    @property
    def ods_recall(self):
        return float(self.recall[self.ods_index])

    def to_text(self):
        """Flat key=value block."""
        items = {
            "images": len(self.image_best_f),
            "thresholds": len(self.thresholds),
            "apply_nms": int(self.apply_nms),
            "max_dist_fraction": self.max_dist_fraction,
            "ods_threshold": self.ods_threshold,
            "ods_precision": self.ods_precision,
            "ods_recall": self.ods_recall,
            "ods_f": self.ods_f,
            "ois_precision": self.ois_precision,
            "ois_recall": self.ois_recall,
            "ois_f": self.ois_f,
        }
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _prepare(predictions, gts):
    if len(predictions) != len(gts):
        raise UsageError(f"{len(predictions)} predictions but {len(gts)} ground truths")
    if not predictions:
        raise UsageError("pr_sweep needs at least one image")
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    masks = [np.asarray(g).astype(bool) for g in gts]
    for k, (p, g) in enumerate(zip(preds, masks)):
        if p.shape != g.shape:
            raise UsageError(f"image {k}: prediction dims {p.shape} != ground-truth dims {g.shape}")
    return preds, masks


def pr_sweep(predictions, gts, cfg=None, threads=1):
    """Threshold sweep with dataset-level (ODS) and image-level (OIS) optima."""
    cfg = cfg or EvalConfig()
    preds, masks = _prepare(predictions, gts)
    thresholds = cfg.threshold_values()

    def one(args):
        p, g = args
        if cfg.apply_nms:
            p = nms_thin(p)
        return _sweep_image(p, g, thresholds, max_dist_px(p.shape, cfg.max_dist_fraction))

    jobs = list(zip(preds, masks))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(one, jobs))
    else:
        counts = [one(j) for j in jobs]
    counts = np.stack(counts)  # (images, K, 3)
    return _aggregate(counts, thresholds, cfg)


def _ois_choice(counts, has_gt, ods_f, ods_index, max_iter=100):
    """Per-image threshold indices maximising the pooled F-measure.

    Pooled F = 2 TP / (N_pred + N_gt), a ratio; Dinkelbach iteration turns it
    into independent per-image problems max_k (2 TP_k - lam * N_pred_k).
    Starting from lam = ODS (every image at the shared threshold scores 0)
    makes the result >= ODS by construction.  Ties go to the image's own
    best F, then to the lower threshold.
    """
    tp = counts[:, :, 0].astype(np.float64)
    n_pred = tp + counts[:, :, 1]
    own_f = np.where(2 * tp + counts[:, :, 1] + counts[:, :, 2] > 0,
                     2 * tp / np.maximum(2 * tp + counts[:, :, 1] + counts[:, :, 2], 1), 0.0)
    choice = np.where(has_gt, ods_index, -1)
    lam = ods_f
    for _ in range(max_iter):
        score = 2 * tp - lam * n_pred
        new = choice.copy()
        for img in np.flatnonzero(has_gt):
            s = score[img]
            cand = np.flatnonzero(s >= s.max() - 1e-9)
            new[img] = cand[np.argmax(own_f[img, cand])]
        pooled = counts[np.flatnonzero(has_gt), new[has_gt]].sum(axis=0) if has_gt.any() else np.zeros(3)
        new_lam = f_measure(*pooled)[2]
        if new_lam <= lam + 1e-15:
            if new_lam >= lam:
                choice = new
            break
        choice, lam = new, new_lam
    return choice


def _aggregate(counts, thresholds, cfg):
    has_gt = (counts[:, 0, 0] + counts[:, 0, 2]) > 0
    total = counts[has_gt].sum(axis=0)
    prf = np.array([f_measure(*row) for row in total]).reshape(-1, 3)
    ods_index = int(np.argmax(prf[:, 2]))
    choice = _ois_choice(counts, has_gt, prf[ods_index, 2], ods_index)
    best_t, best_f, ois_counts = [], [], np.zeros(3, dtype=np.int64)
    for img, k in enumerate(choice):
        if k < 0:
            best_t.append(float("nan"))
            best_f.append(float("nan"))
            continue
        best_t.append(float(thresholds[k]))
        best_f.append(float(f_measure(*counts[img, k])[2]))
        ois_counts += counts[img, k]
    op, orc, of = f_measure(*ois_counts)
    return EvalReport(
        thresholds=thresholds,
        precision=prf[:, 0],
        recall=prf[:, 1],
        f=prf[:, 2],
        ods_index=ods_index,
        ods_threshold=float(thresholds[ods_index]),
        ods_f=float(prf[ods_index, 2]),
        ois_f=float(of),
        ois_precision=float(op),
        ois_recall=float(orc),
        counts=counts,
        image_best_threshold=best_t,
        image_best_f=best_f,
        apply_nms=cfg.apply_nms,
        max_dist_fraction=cfg.max_dist_fraction,
    )


@dataclass
class CrispnessReport:
    pre_nms_ods: float
    post_nms_ods: float
    thickness_ratio: float
    pre: EvalReport
    post: EvalReport

    def to_text(self):
        return (
            f"pre_nms_ods={self.pre_nms_ods:.6f}\n"
            f"post_nms_ods={self.post_nms_ods:.6f}\n"
            f"pre_nms_ois={self.pre.ois_f:.6f}\n"
            f"post_nms_ois={self.post.ois_f:.6f}\n"
            f"thickness_ratio={self.thickness_ratio:.6f}\n"
            f"pre_nms_ods_threshold={self.pre.ods_threshold:.6f}\n"
        )


def thickness_ratio(predictions, threshold):
    """Mean over images of (#pixels >= t before NMS) / (#pixels >= t after NMS)."""
    ratios = []
    for p in predictions:
        p = np.asarray(p, dtype=np.float64)
        before = int(np.count_nonzero(p >= threshold))
        after = int(np.count_nonzero(nms_thin(p) >= threshold))
        if after > 0:
            ratios.append(before / after)
    return float(np.mean(ratios)) if ratios else float("nan")


def crispness_report(predictions, gts, cfg=None, threads=1):
    """Evaluate without and with NMS, plus the thickness ratio at the pre-NMS ODS threshold."""
    cfg = cfg or EvalConfig()
    pre = pr_sweep(predictions, gts, EvalConfig(cfg.thresholds, cfg.max_dist_fraction, False), threads)
    post = pr_sweep(predictions, gts, EvalConfig(cfg.thresholds, cfg.max_dist_fraction, True), threads)
    ratio = thickness_ratio(predictions, pre.ods_threshold)
    return CrispnessReport(pre.ods_f, post.ods_f, ratio, pre, post)


# ---------------------------------------------------------------------------
# output


def emit_pr(report, csv_path=None, svg_path=None):
    """Write the PR curve as CSV and/or an SVG polyline on [0, 1]^2."""
    if csv_path is not None:
        rows = ["threshold,precision,recall,f"]
        for t, p, r, f in zip(report.thresholds, report.precision, report.recall, report.f):
            rows.append(f"{t:.6f},{p:.6f},{r:.6f},{f:.6f}")
        Path(csv_path).write_text("\n".join(rows) + "\n")
    if svg_path is not None:
        Path(svg_path).write_text(pr_svg([("", report)]))


def pr_svg(curves, size=400, margin=40):
    """SVG with one polyline per (label, report); recall on x, precision on y."""
    span = size - 2 * margin
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def xy(r, p):
        return margin + r * span, size - margin - p * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="black"/>',
    ]
    for v in (0.0, 0.5, 1.0):
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        parts.append(f'<text x="{x:.1f}" y="{size - margin + 15}" font-size="11" text-anchor="middle">{v:g}</text>')
        parts.append(f'<text x="{margin - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{v:g}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" font-size="12" text-anchor="middle">Recall</text>')
    parts.append(f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})"'
                 ' text-anchor="middle">Precision</text>')
    for n, (label, rep) in enumerate(curves):
        color = colors[n % len(colors)]
        pts = " ".join("{:.2f},{:.2f}".format(*xy(r, p)) for r, p in zip(rep.recall, rep.precision))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ox, oy = xy(rep.ods_recall, rep.ods_precision)
        parts.append(f'<circle cx="{ox:.2f}" cy="{oy:.2f}" r="3" fill="{color}"/>')
        text = f"{label} ODS={rep.ods_f:.3f}".strip()
        parts.append(f'<text x="{margin + 8}" y="{margin + 16 + 14 * n}" font-size="11" fill="{color}">{text}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_pr_csv(path):
    """Parse a CSV written by :func:`emit_pr` into an (K, 4) array."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != "threshold,precision,recall,f":
        raise UsageError(f"{path}: not a PR csv")
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
