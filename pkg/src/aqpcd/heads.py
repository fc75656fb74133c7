"""Anchor-free multi-scale detection heads, target assignment, loss and decoding.

Each head predicts six channels per feature-map cell: box offsets
``(tx, ty, tw, th)``, an objectness logit and a class logit. A crater is
owned by exactly one scale (chosen by its diameter) and, within it, by the
cell containing its centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import quant as Q
from .autograd import Var
from .layers import ConvBnAct, Module, QConv, QTensor
from .tensor import ConvSpec, ShapeError, sigmoid

SCALES = ("p3", "p4", "p5")
STRIDES = {"p3": 4, "p4": 8, "p5": 16}
# crater diameter (px) upper bounds for P3 and P4; anything larger goes to P5
BANDS = (16.0, 48.0)
MAX_LOG_SIZE = 6.0
N_OUT = 6


@dataclass
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_score: float
    scale: str = ""

    @property
    def score(self) -> float:
        return self.objectness * self.class_score

    def box(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class LossConfig:
    lambda_loc: float = 1.0
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5
    w_s: float = 2.0
    obj_pos_weight: float = 1.0  # weight of positive cells inside the objectness mean

    def __post_init__(self):
        if min(self.lambda_loc, self.lambda_obj, self.lambda_cls) < 0 or self.obj_pos_weight <= 0:
            raise ValueError("loss weights must be >= 0")
        if self.w_s < 1:
            raise ValueError("w_s must be >= 1")


class Head(Module):
    """Two ConvBnAct layers and a 1x1 conv to six outputs."""

    def __init__(self, cin: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvBnAct(ConvSpec(3, cin, hidden, 1, 1), rng)
        self.conv2 = ConvBnAct(ConvSpec(3, hidden, hidden, 1, 1), rng)
        self.out = ConvBnAct(ConvSpec(1, hidden, N_OUT), rng, bn=False, act="none")
        self.out.weight.data *= 0.01
        # centre offsets at 0.5, sizes near 2.7 strides, objectness prior ~1%
        self.out.bias.data[:] = [0.0, 0.0, 1.0, 1.0, -4.6, 0.0]

    def forward(self, x: Var) -> Var:
        return self.out(self.conv2(self.conv1(x)))

    __call__ = forward

    def convs(self):
        return [self.conv1, self.conv2, self.out]

    def quantize(self, p_in: Q.QuantParams) -> "QHead":
        c1 = self.conv1.quantize(p_in)
        c2 = self.conv2.quantize(c1.layer.output)
        return QHead([c1, c2, self.out.quantize(c2.layer.output)])

    def describe(self, name: str, inp: str) -> list[dict]:
        rows = self.conv1.describe(f"{name}.conv1", inp)
        rows += self.conv2.describe(f"{name}.conv2", rows[-1]["output"])
        rows += self.out.describe(f"{name}.out", rows[-1]["output"])
        return rows


class QHead:
    def __init__(self, convs: list[QConv]):
        self.convs = convs

    def __call__(self, x: QTensor) -> QTensor:
        for c in self.convs:
            x = c(x)
        return x


def head_forward(fused, head: Head) -> Var:
    fused = fused if isinstance(fused, Var) else Var(fused)
    if fused.shape[1] != head.conv1.spec.in_channels:
        raise ShapeError("head_forward", "C", head.conv1.spec.in_channels, fused.shape[1])
    return head(fused)


# ---- targets -----------------------------------------------------------------

def band_of(diameter: float, bands=BANDS) -> str:
    if diameter <= bands[0]:
        return "p3"
    if diameter <= bands[1]:
        return "p4"
    return "p5"


@dataclass
class ScaleTargets:
    stride: int
    obj: np.ndarray  # (n, H, W) in {0, 1}
    batch_idx: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    boxes: np.ndarray  # (P, 4) cx, cy, w, h in pixels

    @property
    def num_pos(self) -> int:
        return len(self.rows)


@dataclass
class AssignStats:
    skipped: int = 0
    collisions: int = 0


def assign_targets(boxes_per_image: list[np.ndarray], image_hw: tuple[int, int], bands=BANDS) -> tuple[dict[str, ScaleTargets], AssignStats]:
    """Route each crater box ``(cx, cy, w, h)`` to one scale and one cell.

    Craters whose centre lies outside the image are skipped; a second crater
    landing on an already-positive cell is dropped (counted as a collision).
    """
    h, w = image_hw
    n = len(boxes_per_image)
    stats = AssignStats()
    acc = {s: ([], [], [], []) for s in SCALES}
    obj = {s: np.zeros((n, h // STRIDES[s], w // STRIDES[s]), np.float32) for s in SCALES}
    for b, boxes in enumerate(boxes_per_image):
        for cx, cy, bw, bh in np.asarray(boxes, np.float64).reshape(-1, 4):
            if not (0 <= cx < w and 0 <= cy < h):
                stats.skipped += 1
                continue
            s = band_of(max(bw, bh), bands)
            st = STRIDES[s]
            i, j = int(cy // st), int(cx // st)
            if obj[s][b, i, j]:
                stats.collisions += 1
                continue
            obj[s][b, i, j] = 1.0
            for lst, v in zip(acc[s], (b, i, j, (cx, cy, bw, bh))):
                lst.append(v)
    out = {}
    for s in SCALES:
        bi, ri, ci, bx = acc[s]
        out[s] = ScaleTargets(
            STRIDES[s],
            obj[s],
            np.asarray(bi, np.int64),
            np.asarray(ri, np.int64),
            np.asarray(ci, np.int64),
            np.asarray(bx, np.float64).reshape(-1, 4),
        )
    return out, stats


# ---- losses ------------------------------------------------------------------

def ciou(pred, gt, eps: float = 1e-9) -> Var:
    """Complete IoU between boxes given as ``(cx, cy, w, h)`` component tuples.

    ``pred`` components may be :class:`Var`; ``gt`` components are constants.
    """
    px, py, pw, ph = pred
    gx, gy, gw, gh = gt
    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5
    gx1, gx2 = gx - gw * 0.5, gx + gw * 0.5
    gy1, gy2 = gy - gh * 0.5, gy + gh * 0.5
    iw = ag.clamp(ag.minimum(px2, gx2) - ag.maximum(px1, gx1), lo=0.0)
    ih = ag.clamp(ag.minimum(py2, gy2) - ag.maximum(py1, gy1), lo=0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    cw = ag.maximum(px2, gx2) - ag.minimum(px1, gx1)
    ch = ag.maximum(py2, gy2) - ag.minimum(py1, gy1)
    c2 = ag.square(cw) + ag.square(ch) + eps
    rho2 = ag.square(px - gx) + ag.square(py - gy)
    v = (4 / math.pi**2) * ag.square(ag.atan(gw / gh) - ag.atan(pw / ph))
    alpha = v / ((1 - iou) + v + eps)
    return iou - rho2 / c2 - alpha * v


def ciou_loss(pred_box, gt_box) -> float | np.ndarray:
    """``1 - CIoU`` for plain ``(cx, cy, w, h)`` boxes (or ``(N, 4)`` arrays)."""
    p = np.asarray(pred_box, np.float64)
    g = np.asarray(gt_box, np.float64)
    if np.any(p[..., 2:] <= 0) or np.any(g[..., 2:] <= 0):
        raise ValueError("ciou_loss: boxes need w, h > 0")
    out = 1.0 - ciou(tuple(Var(p[..., k]) for k in range(4)), tuple(g[..., k] for k in range(4))).data
    return float(out) if out.ndim == 0 else out


def bce(logit, target) -> float | np.ndarray:
    """Binary cross-entropy on a logit, computed without overflow."""
    x = np.asarray(logit, np.float64)
    t = np.asarray(target, np.float64)
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def decode_positive_boxes(sel: Var, tgt: ScaleTargets):
    """Predicted ``(cx, cy, w, h)`` Vars for the positive cells of one scale."""
    st = tgt.stride
    cx = (ag.sigmoid(sel[:, 0]) + tgt.cols.astype(sel.dtype)) * st
    cy = (ag.sigmoid(sel[:, 1]) + tgt.rows.astype(sel.dtype)) * st
    w = ag.exp(ag.clamp(sel[:, 2], hi=MAX_LOG_SIZE)) * st
    h = ag.exp(ag.clamp(sel[:, 3], hi=MAX_LOG_SIZE)) * st
    return cx, cy, w, h


@dataclass
class LossBreakdown:
    per_head: dict[str, dict[str, float]]
    lambdas: tuple[float, float, float]
    w_s: float
    total: float
    total_var: Var | None = None
    empty: dict[str, bool] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        out = {}
        for s, d in self.per_head.items():
            for k in ("loc", "obj", "cls"):
                out[f"{s}_{k}"] = d[k]
        out["total"] = self.total
        return out


def head_loss(out: Var, tgt: ScaleTargets, cfg: LossConfig):
    obj_logit = out[:, 4]
    per_cell = ag.bce_with_logits(obj_logit, tgt.obj)
    if cfg.obj_pos_weight != 1.0:
        per_cell = per_cell * (1.0 + (cfg.obj_pos_weight - 1.0) * tgt.obj).astype(out.dtype)
    l_obj = ag.vmean(per_cell)
    if tgt.num_pos == 0:
        zero = Var(np.zeros((), out.dtype))
        return zero, l_obj, zero, True
    sel = out[tgt.batch_idx, :, tgt.rows, tgt.cols]  # (P, 6)
    pred = decode_positive_boxes(sel, tgt)
    gt = tuple(tgt.boxes[:, k].astype(out.dtype) for k in range(4))
    l_loc = ag.vmean(1.0 - ciou(pred, gt))
    l_cls = ag.vmean(ag.bce_with_logits(sel[:, 5], np.ones(tgt.num_pos, out.dtype)))
    return l_loc, l_obj, l_cls, False


def composite_loss(outputs: dict[str, Var], targets: dict[str, ScaleTargets], cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Per-head weighted loss, then the P3-boosted sum over heads."""
    per_head = {}
    empty = {}
    total = None
    for s in SCALES:
        l_loc, l_obj, l_cls, is_empty = head_loss(outputs[s], targets[s], cfg)
        l_px = cfg.lambda_loc * l_loc + cfg.lambda_obj * l_obj + cfg.lambda_cls * l_cls
        weighted = cfg.w_s * l_px if s == "p3" else l_px
        total = weighted if total is None else total + weighted
        per_head[s] = {"loc": l_loc.item(), "obj": l_obj.item(), "cls": l_cls.item(), "total": l_px.item()}
        empty[s] = is_empty
    return LossBreakdown(per_head, (cfg.lambda_loc, cfg.lambda_obj, cfg.lambda_cls), cfg.w_s, total.item(), total, empty)


def combine_head_losses(l_px: dict[str, float], w_s: float) -> float:
    return w_s * l_px["p3"] + l_px["p4"] + l_px["p5"]


# ---- decoding ----------------------------------------------------------------

def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` centre-size boxes."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    ax1, ay1, ax2, ay2 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2, a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1, bx2, by2 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def decode(outputs: dict[str, np.ndarray], image_hw: tuple[int, int], conf_threshold: float = 0.25) -> list[list[Detection]]:
    """Per-image candidate detections above ``conf_threshold`` (before NMS)."""
    h_img, w_img = image_hw
    n = next(iter(outputs.values())).shape[0]
    result: list[list[Detection]] = [[] for _ in range(n)]
    for s in SCALES:
        o = np.asarray(outputs[s], np.float64)
        st = STRIDES[s]
        _, _, gh, gw = o.shape
        obj = sigmoid(o[:, 4])
        cls = sigmoid(o[:, 5])
        score = obj * cls
        for b, i, j in zip(*np.nonzero(score > conf_threshold)):
            cx = (j + sigmoid(o[b, 0, i, j])) * st
            cy = (i + sigmoid(o[b, 1, i, j])) * st
            w = st * math.exp(min(o[b, 2, i, j], MAX_LOG_SIZE))
            h = st * math.exp(min(o[b, 3, i, j], MAX_LOG_SIZE))
            result[b].append(
                Detection(float(np.clip(cx, 0, w_img)), float(np.clip(cy, 0, h_img)), w, h, float(obj[b, i, j]), float(cls[b, i, j]), s)
            )
    return result


def nms(dets: list[Detection], iou_threshold: float = 0.5, max_det: int = 100) -> list[Detection]:
    """Greedy NMS: highest score first, drop anything overlapping a kept box above the threshold."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    boxes = np.array([dets[k].box() for k in order])
    ious = box_iou(boxes, boxes)
    alive = np.ones(len(order), bool)
    keep = []
    for a in range(len(order)):
        if not alive[a]:
            continue
        keep.append(dets[order[a]])
        if len(keep) == max_det:
            break
        alive[a + 1 :] &= ious[a, a + 1 :] <= iou_threshold
    return keep


def decode_and_nms(outputs: dict[str, np.ndarray], image_hw=(64, 64), conf_threshold=0.25, iou_threshold=0.5) -> list[list[Detection]]:
    if not (0 < conf_threshold < 1 and 0 < iou_threshold < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    return [nms(d, iou_threshold) for d in decode(outputs, image_hw, conf_threshold)]


def format_detections(tile_id, dets: list[Detection]) -> str:
    """Text lines ``tile_id cx cy w h score``."""
    return "".join(f"{tile_id} {d.cx:.3f} {d.cy:.3f} {d.w:.3f} {d.h:.3f} {d.score:.6f}\n" for d in dets)


def parse_detections(text: str) -> dict[str, list[tuple]]:
    out: dict[str, list[tuple]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        tid, *vals = line.split()
        out.setdefault(tid, []).append(tuple(float(v) for v in vals))
    return out
