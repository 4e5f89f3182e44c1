"""Estimator-style wrapper: fit/predict segmentation with the graph models.

Follows the scikit-learn contract (constructor stores hyperparameters
verbatim, fitted state lives in trailing-underscore attributes, get_params
and clone work), so the models drop into sklearn tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .graph import ArchConfig, build_mdunet, param_count, run_forward, shape_infer
from .quantize import QuantConfig, run_inq_schedule
from .training import TrainConfig, evaluate, metrics_pair, train_loop


def check_images(X) -> np.ndarray:
    """Normalize inputs to float32 (N, 1, H, W); accepts (N, H, W) too."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(
            f"expected images shaped (N, H, W) or (N, 1, H, W), got {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    return X


def check_masks(y, num_classes: int, images: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (images.shape[0],) + images.shape[2:]:
        raise ValueError(
            f"masks shaped {y.shape} do not pair with images {images.shape}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("mask labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"mask labels must lie in [0, {num_classes})")
    return y


class MDUNetSegmenter(BaseEstimator):
    """Dense U-Net image segmenter with an sklearn-style API.

    Defaults are desk-scale (depth 3, base 8) so fitting on a laptop-class
    CPU stays in the minutes range; pass depth=5, base_channels=32 for the
    full-size model.
    """

    def __init__(self, depth=3, base_channels=8, num_classes=2, enc_dense=0,
                 dec_dense=0, cross_mode="skip", upsample_mode="transposed_conv2",
                 base_lr=0.005, lr_milestones=(), batch_size=4, epochs=5,
                 iterations=None, seed=0):
        self.depth = depth
        self.base_channels = base_channels
        self.num_classes = num_classes
        self.enc_dense = enc_dense
        self.dec_dense = dec_dense
        self.cross_mode = cross_mode
        self.upsample_mode = upsample_mode
        self.base_lr = base_lr
        self.lr_milestones = lr_milestones
        self.batch_size = batch_size
        self.epochs = epochs
        self.iterations = iterations
        self.seed = seed

    def _arch_config(self) -> ArchConfig:
        return ArchConfig(
            depth=self.depth, base_channels=self.base_channels,
            num_classes=self.num_classes, enc_dense=self.enc_dense,
            dec_dense=self.dec_dense, cross_mode=self.cross_mode,
            upsample_mode=self.upsample_mode,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr, lr_milestones=tuple(self.lr_milestones),
            batch_size=self.batch_size, epochs=self.epochs,
            iterations=self.iterations, seed=self.seed,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, self.num_classes, X)
        self.graph_ = build_mdunet(self._arch_config(), seed=self.seed)
        shape_infer(self.graph_, X.shape)
        self.history_ = train_loop(self.graph_, X, y, self._train_config())
        self.n_parameters_ = param_count(self.graph_)["total"]
        return self

    def _require_fitted(self):
        if not hasattr(self, "graph_"):
            raise NotFittedError(
                "This MDUNetSegmenter instance is not fitted yet; call fit first."
            )

    def predict(self, X) -> np.ndarray:
        """Per-pixel class labels, shape (N, H, W)."""
        self._require_fitted()
        X = check_images(X)
        logits = run_forward(self.graph_, X, "infer")
        return np.argmax(logits, axis=1)

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, shape (N, C, H, W)."""
        self._require_fitted()
        X = check_images(X)
        logits = run_forward(self.graph_, X, "infer").astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def score(self, X, y) -> float:
        """Mean Dice coefficient of the foreground class over images."""
        self._require_fitted()
        X = check_images(X)
        y = check_masks(y, self.num_classes, X)
        pred = self.predict(X)
        dices = [metrics_pair(pred[i] != 0, y[i] != 0)[1] for i in range(len(X))]
        return float(np.mean(dices))

    def evaluate(self, X, y):
        """Full Metrics (mean IoU, Dice, per-image breakdown)."""
        self._require_fitted()
        X = check_images(X)
        y = check_masks(y, self.num_classes, X)
        return evaluate(self.graph_, X, y)

    def quantize(self, bits=5, schedule=(0.5, 0.75, 1.0), X=None, y=None,
                 retrain_iterations=50):
        """Quantize the fitted weights in place, optionally retraining the
        free weights on (X, y) between steps. Returns the quantization
        state; snapshots per fraction live on it."""
        self._require_fitted()
        cfg = QuantConfig(bits=bits, schedule=tuple(schedule),
                          retrain_iterations=retrain_iterations)
        retrain = None
        if X is not None and cfg.retrain_iterations > 0:
            Xr = check_images(X)
            yr = check_masks(y, self.num_classes, Xr)
            base = self._train_config()

            def retrain(step_index, fraction):
                rcfg = TrainConfig(
                    base_lr=base.base_lr, lr_milestones=base.lr_milestones,
                    batch_size=base.batch_size, epochs=1,
                    iterations=cfg.retrain_iterations,
                    seed=base.seed + 1 + step_index,
                )
                train_loop(self.graph_, Xr, yr, rcfg)

        self.quant_state_ = run_inq_schedule(self.graph_.parameters, cfg, retrain)
        return self.quant_state_
