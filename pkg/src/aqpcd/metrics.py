"""Single-class detection metrics: greedy matching, 101-point AP, best-threshold F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import Detection, box_iou

IOU_RANGE = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def as_array(dets) -> np.ndarray:
    """``(N, 5)`` array ``cx, cy, w, h, score`` from Detections or array-likes."""
    if len(dets) and isinstance(dets[0], Detection):
        return np.array([[d.cx, d.cy, d.w, d.h, d.score] for d in dets], np.float64)
    return np.asarray(dets, np.float64).reshape(-1, 5)


@dataclass
class MatchResult:
    tp: np.ndarray  # per detection, in the order given
    gt_matched: np.ndarray
    matched_gt: np.ndarray  # gt index per detection, -1 if unmatched


def match_detections(dets, gts, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching by descending score (ties: lower detection index first).

    Each detection takes the still-unmatched ground truth with the highest
    IoU at or above the threshold (ties: lower ground-truth index).
    """
    d = as_array(dets)
    g = np.asarray(gts, np.float64).reshape(-1, 4)
    tp = np.zeros(len(d), bool)
    used = np.zeros(len(g), bool)
    which = np.full(len(d), -1, np.int64)
    if len(d) == 0 or len(g) == 0:
        return MatchResult(tp, used, which)
    ious = box_iou(d[:, :4], g)
    for k in sorted(range(len(d)), key=lambda i: (-d[i, 4], i)):
        cand = np.where(used, -1.0, ious[k])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            used[j] = True
            tp[k] = True
            which[k] = j
    return MatchResult(tp, used, which)


def _ranked(dets_per_image, gts_per_image, iou_threshold):
    scores, tps = [], []
    n_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        d = as_array(dets)
        m = match_detections(d, gts, iou_threshold)
        scores.append(d[:, 4])
        tps.append(m.tp)
        n_gt += len(np.asarray(gts).reshape(-1, 4))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0, bool)
    # stable sort: equal scores keep their global detection id order
    order = np.argsort(-scores, kind="stable")
    return scores[order], tps[order], n_gt


@dataclass
class APResult:
    ap: float
    empty: bool = False  # no ground truth and no detections


def average_precision(dets_per_image, gts_per_image, iou_threshold: float = 0.5) -> APResult:
    """101-point interpolated AP over all images (single class)."""
    scores, tps, n_gt = _ranked(dets_per_image, gts_per_image, iou_threshold)
    if n_gt == 0:
        return APResult(1.0, True) if len(scores) == 0 else APResult(0.0)
    if len(scores) == 0:
        return APResult(0.0)
    ctp = np.cumsum(tps)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tps) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.linspace(0, 1, 101):
        idx = np.searchsorted(recall, r, side="left")
        total += envelope[idx] if idx < len(envelope) else 0.0
    return APResult(total / 101)


def best_f1(dets_per_image, gts_per_image, iou_threshold: float = 0.5) -> tuple[float, float]:
    """Maximum F1 over confidence cut-offs, and the score achieving it."""
    scores, tps, n_gt = _ranked(dets_per_image, gts_per_image, iou_threshold)
    if n_gt == 0 or len(scores) == 0:
        return 0.0, 1.0
    ctp = np.cumsum(tps)
    k = np.arange(1, len(tps) + 1)
    # a threshold can only cut between distinct scores
    last = np.r_[scores[1:] != scores[:-1], True]
    f1 = np.where(last, 2 * ctp / (k + n_gt), -1.0)
    i = int(np.argmax(f1))
    return float(f1[i]), float(scores[i])


@dataclass
class EvalReport:
    map50: float
    map_range: float
    f1: float
    f1_threshold: float
    n_images: int
    n_gt: int
    n_det: int

    def text(self) -> str:
        return (
            f"mAP@0.5       {self.map50:.4f}\n"
            f"mAP@[0.5:0.95] {self.map_range:.4f}\n"
            f"F1            {self.f1:.4f} (score >= {self.f1_threshold:.3f})\n"
            f"images {self.n_images}  ground truth {self.n_gt}  detections {self.n_det}\n"
        )


def evaluate(dets_per_image, gts_per_image) -> EvalReport:
    dets_per_image = [as_array(d) for d in dets_per_image]
    ap50 = average_precision(dets_per_image, gts_per_image, 0.5).ap
    ap_rng = float(np.mean([average_precision(dets_per_image, gts_per_image, t).ap for t in IOU_RANGE]))
    f1, thr = best_f1(dets_per_image, gts_per_image, 0.5)
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts_per_image)
    return EvalReport(ap50, ap_rng, f1, thr, len(gts_per_image), n_gt, sum(len(d) for d in dets_per_image))
