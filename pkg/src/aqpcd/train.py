"""Training loop: composite loss, AdamW, exponential LR decay, early stopping, optional QAT phase."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .backbone import BackboneConfig
from .data import SceneTile, stack_tiles
from .heads import SCALES, LossConfig, assign_targets, composite_loss, decode_and_nms
from .metrics import average_precision
from .model import Detector, ModelConfig

EVAL_CONF = 0.01


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-3
    gamma: float = 0.1
    d: int = 100
    staircase: bool = False
    epochs: int = 150
    batch_size: int = 16
    w_s: float = 2.0
    lambda_loc: float = 1.0
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5
    obj_pos_weight: float = 5.0
    seed: int = 0
    patience: int = 40
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    clip_norm: float = 10.0
    augment: bool = True
    qat: bool = False
    qat_epochs: int = 20
    qat_lr_scale: float = 0.1
    head_channels: int = 32
    stem_channels: int = 16
    stage_channels: tuple = (32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2)
    fusion: str = "concat"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.qat and not 1 <= self.qat_epochs <= self.epochs:
            raise ValueError("qat_epochs must lie in [1, epochs]")

    def model_config(self) -> ModelConfig:
        bb = BackboneConfig(self.stem_channels, tuple(self.stage_channels), tuple(self.blocks_per_stage))
        return ModelConfig(bb, self.head_channels, self.fusion)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_loc, self.lambda_obj, self.lambda_cls, self.w_s, self.obj_pos_weight)

    def schedule(self) -> ag.LrSchedule:
        return ag.LrSchedule(self.lr0, self.gamma, self.d, self.staircase)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(out) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


ALIASES = {"λ_loc": "lambda_loc", "λ_obj": "lambda_obj", "λ_cls": "lambda_cls"}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    return type(default)(raw)


def parse_overrides(pairs: dict[str, str], base: TrainConfig = TrainConfig()) -> TrainConfig:
    defaults = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    kw = {}
    for k, v in pairs.items():
        key = ALIASES.get(k, k)
        if key not in defaults:
            raise KeyError(f"unknown config key {k!r}")
        try:
            kw[key] = _coerce(key, v, defaults[key])
        except ValueError as e:
            raise ValueError(f"config key {k!r}: {e}") from None
    return dataclasses.replace(base, **kw)


def parse_config_text(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    pairs = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ValueError(f"config line {ln}: expected key = value")
        k, v = line.split(sep, 1)
        pairs[k.strip()] = v
    return parse_overrides(pairs, base)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


# ---- augmentation ------------------------------------------------------------------

def dihedral(img: np.ndarray, boxes: np.ndarray, code: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply one of the 8 square symmetries (bit 0: transpose, 1: flip x, 2: flip y)."""
    b = boxes.copy()
    if code & 1:
        img = np.swapaxes(img, -1, -2)
        b = b[:, [1, 0, 3, 2]]
    if code & 2:
        img = img[..., ::-1]
        b[:, 0] = size - b[:, 0]
    if code & 4:
        img = img[..., ::-1, :]
        b[:, 1] = size - b[:, 1]
    return np.ascontiguousarray(img), b


def _clip_boxes(b: np.ndarray, size: int) -> np.ndarray:
    # flipping maps an in-range centre c in [0, size) to (0, size]; keep it inside
    b = b.copy()
    b[:, :2] = np.minimum(b[:, :2], np.nextafter(size, 0))
    return b


# ---- loop ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Detector
    history: list[dict]
    best_epoch: int
    best_val: float
    float_state: dict | None = None  # best float weights (before any QAT phase)
    float_val: float = float("nan")
    stopped_early: bool = False


def evaluate_map(model, oi, dem, boxes, batch: int = 64) -> float:
    outs = model.predict(oi, dem, batch=batch)
    dets = decode_and_nms(outs, oi.shape[2:], EVAL_CONF, 0.5)
    return average_precision(dets, boxes, 0.5).ap


def calibration_batches(oi, dem, batch: int = 32):
    for s in range(0, len(oi), batch):
        yield oi[s : s + batch], dem[s : s + batch]


def _step(model, opt, batch, targets, loss_cfg, cfg: TrainConfig, lr):
    params = model.params()
    with ag.GradientTape(params) as tape:
        out = model(*batch)
        lb = composite_loss(out, targets, loss_cfg)
    grads = ag.backward(tape, lb.total_var)
    if cfg.clip_norm > 0:
        ag.clip_grad_norm(grads, cfg.clip_norm)
    no_decay = [k for k in params if not k.endswith("weight")]
    if cfg.optimizer == "adam":
        opt.weight_decay = 0.0
    ag.adamw_step(opt, params, grads, lr, no_decay)
    return lb


def train(
    cfg: TrainConfig,
    train_tiles: list[SceneTile],
    val_tiles: list[SceneTile],
    log: Callable[[dict], None] | None = None,
    model: Detector | None = None,
) -> TrainResult:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    model = model or Detector(cfg.model_config(), seed=cfg.seed)
    size = train_tiles[0].oi.shape[0]
    t_oi, t_dem, t_boxes = stack_tiles(train_tiles)
    v_oi, v_dem, v_boxes = stack_tiles(val_tiles) if val_tiles else (None, None, None)
    loss_cfg = cfg.loss_config()
    sched = cfg.schedule()
    opt = ag.OptimizerState(weight_decay=cfg.weight_decay)

    float_epochs = cfg.epochs - cfg.qat_epochs if cfg.qat else cfg.epochs
    history: list[dict] = []
    vals: list[float] = []
    best = (-1.0, -1, None)
    float_best = None
    stopped = False
    phase = "float"
    epoch = 0
    while epoch < cfg.epochs:
        if phase == "float" and (epoch >= float_epochs or stopped):
            if not cfg.qat:
                break
            # restart from the best float weights, then fine-tune with fake-quant
            if best[2] is not None:
                model.load_state(best[2])
            float_best = best
            model.enable_qat(calibration_batches(t_oi, t_dem))
            opt = ag.OptimizerState(weight_decay=cfg.weight_decay)
            phase, vals, best, stopped = "qat", [], (-1.0, -1, None), False
            epoch = float_epochs
        t0 = time.perf_counter()
        lr = lr_at_phase(sched, epoch, phase, cfg)
        model.train()
        order = rng.permutation(len(t_oi))
        sums: dict[str, float] = {}
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            oi, dem, boxes = t_oi[idx], t_dem[idx], [t_boxes[i] for i in idx]
            if cfg.augment:
                codes = rng.integers(0, 8, len(idx))
                pairs = [dihedral(np.stack([oi[k], dem[k]]), boxes[k], int(c), size) for k, c in enumerate(codes)]
                oi = np.stack([p[0][0] for p in pairs])
                dem = np.stack([p[0][1] for p in pairs])
                boxes = [_clip_boxes(p[1], size) for p in pairs]
            targets, _ = assign_targets(boxes, (size, size))
            lb = _step(model, opt, (oi, dem), targets, loss_cfg, cfg, lr)
            for k, v in lb.row().items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
        row = {"epoch": epoch + 1, "phase": phase, "lr": lr}
        row.update({k: v / nb for k, v in sums.items()})
        val = evaluate_map(model, v_oi, v_dem, v_boxes) if val_tiles else -row["total"]
        row["val_map50"] = val
        row["seconds"] = time.perf_counter() - t0
        vals.append(val)
        if val > best[0]:
            best = (val, epoch + 1, model.state())
        history.append(row)
        if log:
            log(row)
        epoch += 1
        if ag.early_stop(vals, cfg.patience, "max"):
            stopped = True
            if phase == "qat" or not cfg.qat:
                break
    if phase == "float" and cfg.qat:
        raise RuntimeError("QAT phase never started")
    if best[2] is not None:
        model.load_state(best[2])
    model.eval()
    fb = float_best if cfg.qat else best
    return TrainResult(model, history, best[1], best[0], fb[2], fb[0], stopped)


def lr_at_phase(sched: ag.LrSchedule, epoch: int, phase: str, cfg: TrainConfig) -> float:
    lr = ag.lr_at(sched, epoch)
    return lr * cfg.qat_lr_scale if phase == "qat" else lr


LOG_FIELDS = ["epoch", "phase", "lr"] + [f"{s}_{k}" for s in SCALES for k in ("loc", "obj", "cls")] + ["total", "val_map50", "seconds"]


def history_csv(history: list[dict], with_time: bool = True) -> str:
    cols = LOG_FIELDS if with_time else LOG_FIELDS[:-1]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
