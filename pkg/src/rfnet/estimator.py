"""scikit-learn style wrapper around model construction, training and inference."""

from __future__ import annotations

from typing import Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .network import DEFAULT_CHANNEL_PLAN, ModelConfig, RFNetModel
from .tensor.checkpoint import load_file, save_file
from .training import TrainConfig, predict_with_lambdas, train
from .validation import arrays_to_samples, check_masks, check_rgbd


class RFNetSaliency(BaseEstimator):
    """Saliency estimator over RGB-D stacks.

    ``X`` has shape (N, 4, H, W) with RGB in channels 0-2 and depth in
    channel 3; ``y`` holds binary masks. ``predict`` returns maps in [0, 1]
    of shape (N, H, W).
    """

    def __init__(self, channel_plan: Tuple[int, ...] = DEFAULT_CHANNEL_PLAN, variant: str = "full",
                 reduction: int = 4, epochs: int = 20, lr: float = 1e-4, lr_decay_every: int = 15,
                 batch: int = 4, augment: bool = True, random_state: int = 0):
        self.channel_plan = channel_plan
        self.variant = variant
        self.reduction = reduction
        self.epochs = epochs
        self.lr = lr
        self.lr_decay_every = lr_decay_every
        self.batch = batch
        self.augment = augment
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(seed=int(self.random_state), epochs=self.epochs, lr=self.lr,
                           lr_decay_every=self.lr_decay_every, batch=self.batch,
                           channel_plan=tuple(self.channel_plan), variant=self.variant, augment=self.augment)

    def fit(self, X, y):
        X = check_rgbd(X)
        y = check_masks(y, n=X.shape[0], hw=X.shape[2:])
        tc = self._train_config()
        model = RFNetModel.init(ModelConfig(tc.channel_plan, tc.variant, self.reduction), seed=tc.seed)
        self.model_, self.history_ = train(arrays_to_samples(X, y), tc, model=model)
        self.input_size_ = tuple(X.shape[2:])
        return self

    def _run(self, X):
        check_is_fitted(self, "model_")
        X = check_rgbd(X)
        maps, lams = [], []
        for i in range(X.shape[0]):
            m, lam = predict_with_lambdas(X[i, :3], X[i, 3:], self.model_)
            maps.append(m[0])
            lams.append(lam)
        return np.stack(maps), np.stack(lams)

    def predict(self, X) -> np.ndarray:
        return self._run(X)[0]

    def lambda_weights(self, X) -> np.ndarray:
        """Per-sample depth confidence, shape (N, 5); all ones for variants without LWA."""
        return self._run(X)[1]

    def score(self, X, y) -> float:
        """``1 - MAE`` over the samples, so that higher is better."""
        pred = self.predict(X)
        y = check_masks(y, n=pred.shape[0], hw=pred.shape[1:])
        return 1.0 - float(np.mean([metrics.mae(p, g) for p, g in zip(pred, y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_file(self.model_.state_dict(), path)

    @classmethod
    def load(cls, path) -> "RFNetSaliency":
        """Estimator wrapping a checkpoint; hyperparameters other than the architecture keep defaults."""
        model = RFNetModel.from_state_dict(load_file(path))
        est = cls(channel_plan=model.config.channel_plan, variant=model.config.variant,
                  reduction=model.config.reduction)
        est.model_ = model
        est.history_ = []
        return est
