"""Plain SGD training with a step learning-rate schedule, plus pixel-level
segmentation metrics (mean IoU and Dice over the foreground class)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph import ModelGraph, run_backward, run_forward, shape_infer


class TrainError(RuntimeError):
    """Raised when training cannot proceed (bad inputs, divergence)."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.005
    lr_milestones: tuple[int, ...] = ()
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    loss: str = "cross_entropy"
    # overall iteration budget; when set it takes precedence over epochs and
    # the loop cycles through reshuffled epochs until the budget is spent
    iterations: int | None = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise TrainError("base_lr must be positive")
        if self.batch_size < 1:
            raise TrainError("batch_size must be at least 1")
        if self.epochs < 0:
            raise TrainError("epochs must be non-negative")
        ms = tuple(int(m) for m in self.lr_milestones)
        object.__setattr__(self, "lr_milestones", ms)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 for m in ms):
            raise TrainError("lr_milestones must be ascending and non-negative")
        if self.loss != "cross_entropy":
            raise TrainError(f"unsupported loss {self.loss!r}")
        if self.iterations is not None and self.iterations < 1:
            raise TrainError("iterations must be positive when given")


@dataclass
class Metrics:
    mean_iou: float
    dice: float
    per_image: list[tuple[float, float]] = field(default_factory=list)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Base rate divided by 10 at every milestone already reached."""
    drops = sum(1 for m in config.lr_milestones if m <= iteration)
    return config.base_lr * 10.0 ** (-drops)


def sgd_step(params, grads: dict[str, np.ndarray], lr: float):
    """w <- w - lr*g elementwise, skipping frozen elements exactly; the
    parameters' own grad slots are cleared afterwards."""
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.values.shape:
            raise TrainError(
                f"{name}: gradient shape {g.shape} != parameter shape {p.values.shape}"
            )
        step = np.float32(lr) * np.where(p.frozen_mask, 0.0, g).astype(np.float32)
        p.values -= step
        p.grad = None


def _check_dataset(images: np.ndarray, masks: np.ndarray, num_classes: int):
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    if images.ndim != 4 or images.shape[1] != 1:
        raise TrainError(f"images must be (N, 1, H, W), got {images.shape}")
    if masks.shape != (images.shape[0],) + images.shape[2:]:
        raise TrainError(
            f"masks shape {masks.shape} does not pair with images {images.shape}"
        )
    if images.shape[0] == 0:
        raise TrainError("dataset is empty")
    if masks.min() < 0 or masks.max() >= num_classes:
        raise TrainError(f"mask labels must lie in [0, {num_classes})")
    return images, masks.astype(np.int64)


def train_loop(graph: ModelGraph, images: np.ndarray, masks: np.ndarray,
               config: TrainConfig, hook=None) -> list[tuple[int, float, float]]:
    """Shuffled mini-batch SGD; returns per-iteration (iteration, lr, loss).

    Parameters update in place, honoring frozen masks. Deterministic for a
    fixed seed. The final partial batch of an epoch is used as-is; datasets
    smaller than the batch size are repeated to fill one batch. Aborts on a
    non-finite loss. ``hook(iteration, lr, loss)`` runs after each step.
    """
    images, masks = _check_dataset(images, masks, graph.config.num_classes)
    n = images.shape[0]
    shape_infer(graph, (min(n, config.batch_size),) + images.shape[1:])
    rng = np.random.default_rng(config.seed)
    history: list[tuple[int, float, float]] = []
    it = 0
    budget = config.iterations

    epoch = 0
    while True:
        if budget is None and epoch >= config.epochs:
            break
        order = rng.permutation(n)
        if n < config.batch_size:
            order = np.resize(order, config.batch_size)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            tape: list = []
            logits = run_forward(graph, images[idx], "train", tape=tape)
            loss, grad = ops.softmax_cross_entropy(logits, masks[idx])
            if not np.isfinite(loss):
                raise TrainError(f"diverged: loss {loss} at iteration {it}")
            pgrads = run_backward(graph, tape, grad)
            lr = lr_at(it, config)
            sgd_step(graph.parameters, pgrads, lr)
            history.append((it, lr, float(loss)))
            if hook is not None:
                hook(it, lr, float(loss))
            it += 1
            if budget is not None and it >= budget:
                return history
        epoch += 1
    return history


def metrics_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Pixel-level (IoU, Dice) of two binary masks; (1, 1) when both empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise TrainError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0, 1.0
    iou = inter / union
    dice = 2.0 * inter / (int(np.count_nonzero(p)) + int(np.count_nonzero(g)))
    return iou, dice


def evaluate(graph: ModelGraph, images: np.ndarray, masks: np.ndarray,
             batch_size: int = 8) -> Metrics:
    """Infer-mode forward, argmax over classes, foreground = any nonzero
    class; metrics averaged over images."""
    images, masks = _check_dataset(images, masks, graph.config.num_classes)
    per_image: list[tuple[float, float]] = []
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        logits = run_forward(graph, batch, "infer")
        pred = np.argmax(logits, axis=1) != 0
        gt = masks[start:start + batch_size] != 0
        for i in range(batch.shape[0]):
            per_image.append(metrics_pair(pred[i], gt[i]))
    mean_iou = float(np.mean([m[0] for m in per_image]))
    dice = float(np.mean([m[1] for m in per_image]))
    return Metrics(mean_iou, dice, per_image)


def predict_masks(graph: ModelGraph, images: np.ndarray,
                  batch_size: int = 8) -> np.ndarray:
    """Class-index masks (N, H, W) for a batch of images, infer mode."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = run_forward(graph, images[start:start + batch_size], "infer")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out, axis=0)
