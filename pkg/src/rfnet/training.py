"""Training loop: per-sample tapes, gradient summation per batch, Adam with step decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .datagen import SamplePair
from .fusion import N_STAGES
from .network import DEFAULT_CHANNEL_PLAN, ModelConfig, RFNetModel, bce_loss, forward, iou_loss
from .tensor import Tensor, no_grad
from .tensor.init import make_rng

logger = logging.getLogger(__name__)

EPOCH_LOG_FIELDS = (["epoch", "loss_bce", "loss_iou", "lr"]
                    + [f"lambda{i}" for i in range(1, N_STAGES + 1)]
                    + [f"alpha{i}" for i in range(1, N_STAGES + 1)]
                    + [f"beta{i}" for i in range(1, N_STAGES + 1)])


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    lr: float = 1e-4
    lr_decay_every: int = 15
    batch: int = 4
    channel_plan: Tuple[int, ...] = DEFAULT_CHANNEL_PLAN
    variant: str = "full"
    augment: bool = True

    def model_config(self) -> ModelConfig:
        return ModelConfig(tuple(self.channel_plan), self.variant)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def step_lr(base_lr: float, epoch: int, decay_every: int) -> float:
    """Learning rate for 1-based ``epoch``, divided by 10 every ``decay_every`` epochs."""
    if decay_every <= 0:
        return base_lr
    return base_lr * 0.1 ** ((epoch - 1) // decay_every)


# -- augmentation ------------------------------------------------------------------

def _resize(arr: np.ndarray, h: int, w: int, order: int) -> np.ndarray:
    if arr.shape[1:] == (h, w):
        return arr
    factors = (1.0, h / arr.shape[1], w / arr.shape[2])
    return ndimage.zoom(arr, factors, order=order, mode="nearest", grid_mode=True)


def resize_sample(s: SamplePair, h: int, w: int) -> SamplePair:
    return replace(s, rgb=_resize(s.rgb, h, w, 1), depth=_resize(s.depth, h, w, 1),
                   gt=(_resize(s.gt, h, w, 0) > 0.5).astype(np.float32))


def augment(s: SamplePair, rng: np.random.Generator, max_angle: float = 10.0,
            max_crop: float = 0.10) -> SamplePair:
    """Flip, rotate and border-crop rgb, depth and gt with one shared geometry."""
    rgb, depth, gt = s.rgb, s.depth, s.gt
    if rng.random() < 0.5:
        rgb, depth, gt = rgb[:, :, ::-1], depth[:, :, ::-1], gt[:, :, ::-1]
    angle = rng.uniform(-max_angle, max_angle)
    rot = lambda a: ndimage.rotate(a, angle, axes=(2, 1), reshape=False, order=0, mode="nearest")
    rgb, depth, gt = rot(rgb), rot(depth), rot(gt)
    H, W = gt.shape[1:]
    ch = int(rng.integers(0, int(max_crop * H) + 1))
    cw = int(rng.integers(0, int(max_crop * W) + 1))
    top, left = int(rng.integers(0, ch + 1)), int(rng.integers(0, cw + 1))
    if ch or cw:
        win = (slice(None), slice(top, H - (ch - top)), slice(left, W - (cw - left)))
        rgb = _resize(rgb[win], H, W, 1)
        depth = _resize(depth[win], H, W, 1)
        gt = _resize(gt[win], H, W, 0)
    return replace(s, rgb=np.ascontiguousarray(rgb, dtype=np.float32),
                   depth=np.ascontiguousarray(depth, dtype=np.float32),
                   gt=np.ascontiguousarray(gt > 0.5, dtype=np.float32))


# -- training loop -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss_bce: float
    loss_iou: float
    lr: float
    lambdas: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def loss(self) -> float:
        return self.loss_bce + self.loss_iou

    def row(self) -> list:
        return ([self.epoch, repr(self.loss_bce), repr(self.loss_iou), repr(self.lr)]
                + [repr(float(v)) for v in (*self.lambdas, *self.alpha, *self.beta)])


def train(dataset: Sequence[SamplePair], config: TrainConfig = TrainConfig(),
          model: Optional[RFNetModel] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[RFNetModel, List[EpochRecord]]:
    """Fit a model on ``dataset``; returns it with one record per epoch."""
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    if model is None:
        model = RFNetModel.init(config.model_config(), seed=config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    rng = make_rng(config.seed + 0x5EED)
    n = len(dataset)
    history = []
    for epoch in range(1, config.epochs + 1):
        lr = step_lr(config.lr, epoch, config.lr_decay_every)
        order = rng.permutation(n)
        sum_bce = sum_iou = 0.0
        lam_sum = np.zeros(N_STAGES)
        for b, start in enumerate(range(0, n, config.batch)):
            batch = order[start:start + config.batch]
            model.zero_grad()
            for idx in batch:
                s = dataset[idx]
                if config.augment:
                    s = augment(s, rng)
                out = forward(s.rgb, s.depth, model)
                lb = bce_loss(out.logits, s.gt)
                li = iou_loss(out.logits, s.gt)
                loss = lb + li
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}")
                (loss * (1.0 / len(batch))).backward()
                sum_bce += lb.item()
                sum_iou += li.item()
                lam_sum += out.lambdas.data
            opt.step(lr)
        alpha = np.array([s.alpha.data[0] for s in model.fusion.stage], dtype=np.float64)
        beta = np.array([s.beta.data[0] for s in model.fusion.stage], dtype=np.float64)
        rec = EpochRecord(epoch, sum_bce / n, sum_iou / n, lr, lam_sum / n, alpha, beta)
        history.append(rec)
        logger.info("epoch %d: bce %.4f iou %.4f lr %.1e", epoch, rec.loss_bce, rec.loss_iou, lr)
        if on_epoch is not None:
            on_epoch(rec)
    model.zero_grad()
    return model, history


def write_epoch_log(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_FIELDS)
        for rec in history:
            writer.writerow(rec.row())


def predict(rgb, depth, model: RFNetModel) -> np.ndarray:
    """Saliency map in [0, 1], shape 1 x H x W."""
    with no_grad():
        out = forward(rgb, depth, model)
    z = out.logits.data.astype(np.float64)
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(np.float32)


def predict_with_lambdas(rgb, depth, model: RFNetModel):
    with no_grad():
        out = forward(rgb, depth, model)
    z = out.logits.data.astype(np.float64)
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(np.float32), out.lambdas.data.astype(np.float64)
