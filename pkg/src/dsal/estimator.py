"""scikit-learn compatible wrapper around the deeply supervised U-Net."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import consistency_scores, dsc
from .segnet import HEADS, Adam, LossWeights, ModelConfig, PredictionSet, binarize, build_model, predict, train_epochs
from .validation import check_images, check_masks


class DeeplySupervisedSegmenter(BaseEstimator):
    """Binary segmenter with two auxiliary heads.

    ``fit(X, y)`` takes images ``[n, H, W]`` (values in [0, 1]) and binary
    masks ``[n, H, W]``. With ``warm_start=True`` a repeated ``fit`` continues
    from the current weights and optimizer state instead of re-initialising,
    which is how the active-learning rounds fine-tune.

    Parameters
    ----------
    depth, base_channels : int
        Encoder stages and channels at the first stage.
    aux_stage_lower, aux_stage_middle : int
        Decoder stages carrying the auxiliary heads.
    alpha_l, alpha_m, alpha_f : float
        Loss weights of the lower, middle and final heads.
    epochs, batch_size, learning_rate
        Adam training schedule used by ``fit``.
    warm_start : bool
        Keep weights between ``fit`` calls.
    random_state : int
        Seeds weight init and batch shuffling.
    """

    def __init__(self, depth=3, base_channels=8, aux_stage_lower=0, aux_stage_middle=1,
                 alpha_l=0.1, alpha_m=0.3, alpha_f=0.6, epochs=20, batch_size=8,
                 learning_rate=1e-3, warm_start=False, random_state=0, dtype="float32"):
        self.depth = depth
        self.base_channels = base_channels
        self.aux_stage_lower = aux_stage_lower
        self.aux_stage_middle = aux_stage_middle
        self.alpha_l = alpha_l
        self.alpha_m = alpha_m
        self.alpha_f = alpha_f
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warm_start = warm_start
        self.random_state = random_state
        self.dtype = dtype

    def _model_config(self, input_size) -> ModelConfig:
        return ModelConfig(depth=self.depth, base_channels=self.base_channels, classes=2,
                           input_size=input_size, aux_stage_lower=self.aux_stage_lower,
                           aux_stage_middle=self.aux_stage_middle,
                           loss_weights=LossWeights(self.alpha_l, self.alpha_m, self.alpha_f),
                           seed=int(self.random_state), dtype=self.dtype)

    def _init(self, X):
        self.model_ = build_model(self._model_config(X.shape[2:]))
        self.optimizer_ = Adam(lr=self.learning_rate)
        self.input_size_ = tuple(X.shape[2:])
        self.loss_curve_ = []
        self.n_fit_calls_ = 0

    def _train(self, X, y, epochs):
        rng = np.random.default_rng([int(self.random_state), self.n_fit_calls_])
        self.loss_curve_ += train_epochs(self.model_, X, y, self.optimizer_, epochs, self.batch_size, rng)
        self.n_fit_calls_ += 1

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        if not (self.warm_start and hasattr(self, "model_") and self.input_size_ == tuple(X.shape[2:])):
            self._init(X)
        self._train(X, y, self.epochs)
        return self

    def partial_fit(self, X, y):
        """One epoch over ``(X, y)``, always continuing from the current weights."""
        X = check_images(X, getattr(self, "input_size_", None))
        y = check_masks(y, X)
        if not hasattr(self, "model_"):
            self._init(X)
        self._train(X, y, 1)
        return self

    def _probs(self, X, heads=HEADS):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size_)
        return predict(self.model_, X, heads=heads)

    def predict_proba(self, X):
        """Final-head foreground probability, ``[n, H, W]``."""
        return self._probs(X, ("f",))["f"][:, 1]

    def predict(self, X):
        return binarize(self._probs(X, ("f",))["f"])

    def predict_heads(self, X):
        """Binary masks of every head: ``{"l": ..., "m": ..., "f": ...}``."""
        return {h: binarize(p) for h, p in self._probs(X).items()}

    def consistency_score(self, X):
        """Mean of lower/final and middle/final DSC per image; higher means the heads agree."""
        probs = self._probs(X)
        return np.array([consistency_scores(PredictionSet(*(probs[h][i] for h in HEADS))).mean_score
                         for i in range(len(probs["f"]))])

    def score(self, X, y):
        """Mean DSC of the final head against ``y``."""
        pred = self.predict(X)
        y = check_masks(y, check_images(X))
        return float(np.mean([dsc(p, t) for p, t in zip(pred, y)]))
