"""scikit-learn style wrapper around the training loop.

``LoDaRegressor`` takes images as an array ``(n, 3, H, W)`` with values in
[0, 1] and scores as ``(n,)``.  Hyperparameters are the :class:`TrainConfig`
fields plus the frozen backbone profile; ``score`` returns SRCC, the usual
ranking criterion for quality models.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .backbones import CnnConfig, VitConfig
from .data import ImageDataset
from .exceptions import InputError
from .metrics import srcc
from .training import TrainConfig, build_model, predict, train


def check_images(X, min_size: int | None = None) -> np.ndarray:
    """Validate an image batch and return it as float64 ``(n, 3, H, W)``."""
    try:
        X = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"images are not numeric: {exc}") from None
    if X.ndim != 4 or X.shape[1] != 3:
        raise InputError(f"images must have shape (n, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("no images given")
    if not np.all(np.isfinite(X)):
        raise InputError("images contain NaN or inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise InputError(f"pixel values must lie in [0, 1], got [{X.min():.3g}, {X.max():.3g}]")
    if min_size is not None and min(X.shape[2:]) < min_size:
        raise InputError(f"images {X.shape[2]}x{X.shape[3]} are smaller than the {min_size}px crop")
    return X


def check_scores(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise InputError(f"{n} images but {y.size} scores")
    if not np.all(np.isfinite(y)):
        raise InputError("scores contain NaN or inf")
    if np.ptp(y) == 0:
        raise InputError("scores are constant; a correlation loss needs variation")
    return y


class LoDaRegressor(RegressorMixin, BaseEstimator):
    def __init__(self, mode="loda", epochs=10, lr0=3e-4, weight_decay=0.01, batch_size=16,
                 patches_per_train_image=1, patches_per_test_image=15, latent_dim=16, heads=4,
                 interaction_count=4, extractor_channels=16, pooled_size=4, seed=0, frozen_seed=0,
                 vit_config=None, cnn_config=None):
        self.mode = mode
        self.epochs = epochs
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.patches_per_train_image = patches_per_train_image
        self.patches_per_test_image = patches_per_test_image
        self.latent_dim = latent_dim
        self.heads = heads
        self.interaction_count = interaction_count
        self.extractor_channels = extractor_channels
        self.pooled_size = pooled_size
        self.seed = seed
        self.frozen_seed = frozen_seed
        self.vit_config = vit_config
        self.cnn_config = cnn_config

    def _train_config(self) -> TrainConfig:
        vit = self.vit_config or VitConfig()
        names = set(TrainConfig.field_names())
        kwargs = {k: v for k, v in self.get_params().items() if k in names}
        return TrainConfig(crop_size=vit.image_size, **kwargs)

    def fit(self, X, y):
        cfg = self._train_config()
        X = check_images(X, cfg.crop_size)
        y = check_scores(y, X.shape[0])
        self.model_ = build_model(cfg, self.vit_config or VitConfig(), self.cnn_config or CnnConfig())
        self.config_ = cfg
        self.history_ = train(self.model_, ImageDataset(X, y), cfg).log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.crop_size)
        return predict(self.model_, X, self.config_)

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise InputError("sample weights are not supported by the rank correlation score")
        pred = self.predict(X)
        return srcc(pred, check_scores(y, len(pred)))
