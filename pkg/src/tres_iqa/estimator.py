"""scikit-learn style wrapper: ``fit`` on images and scores, ``predict`` quality."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig
from .encoder import EncoderConfig
from .inference import image_latent, predict_images
from .losses import LossWeights
from .metrics import srocc
from .model import ModelConfig, TReSModel
from .trainer import TrainConfig, train_arrays


def check_images(X, min_size: int | None = None) -> list[np.ndarray]:
    """Validate a collection of RGB images and return them as uint8 ``(H, W, 3)`` arrays.

    Accepts a 4D array ``(n, H, W, 3)`` or a sequence of 3D arrays. Integer
    or float values must already lie in ``[0, 255]``; floats are rounded.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        items = list(X)
    elif isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        raise ValueError("expected a sequence of (H, W, 3) images or an (n, H, W, 3) array")
    else:
        items = list(X)
    if not items:
        raise ValueError("no images given")
    out = []
    for i, img in enumerate(items):
        arr = np.asarray(img)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image {i}: expected shape (H, W, 3), got {arr.shape}")
        if min_size is not None and min(arr.shape[:2]) < min_size:
            raise ValueError(f"image {i}: {arr.shape[:2]} is smaller than the {min_size}px patch")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.number) or not np.all(np.isfinite(arr)):
                raise ValueError(f"image {i}: values must be finite numbers")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError(f"image {i}: values outside [0, 255]")
            arr = np.rint(arr).astype(np.uint8)
        out.append(arr)
    return out


def check_scores(y, n: int) -> np.ndarray:
    scores = np.asarray(y, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != n:
        raise ValueError(f"expected {n} scores in a 1D array, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores


class TReSRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Image-quality regressor trained from scratch on (image, score) pairs.

    ``predict`` averages the model over random patches of each image,
    ``transform`` returns the pooled latent vectors and ``score`` is SROCC
    (not R^2), the usual figure of merit for quality models.
    """

    def __init__(self, channels=(8, 16, 32, 64), units_per_block=1, n_layers=2, width=64, heads=16,
                 use_transformer=True, use_pe=True, epochs=10, batch_size=16, lr=1e-3,
                 lr_decay_factor=1.25, lambda1=0.0, lambda2=0.05, lambda3=1.0, patch_size=64,
                 patches_per_image=8, test_patches=1, score_range=None, seed=0):
        self.channels = channels
        self.units_per_block = units_per_block
        self.n_layers = n_layers
        self.width = width
        self.heads = heads
        self.use_transformer = use_transformer
        self.use_pe = use_pe
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.patch_size = patch_size
        self.patches_per_image = patches_per_image
        self.test_patches = test_patches
        self.score_range = score_range
        self.seed = seed

    def _configs(self):
        model_cfg = ModelConfig(
            backbone=BackboneConfig(channels=tuple(self.channels), units_per_block=self.units_per_block,
                                    seed=self.seed),
            encoder=EncoderConfig(n_layers=self.n_layers, width=self.width, heads=self.heads,
                                  use_pe=self.use_pe),
            use_transformer=self.use_transformer,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3),
            seed=self.seed, patch_size=self.patch_size, patches_per_image=self.patches_per_image,
            test_patches=self.test_patches,
        )
        return model_cfg, train_cfg

    def fit(self, X, y):
        images = check_images(X, self.patch_size)
        scores = check_scores(y, len(images))
        model_cfg, train_cfg = self._configs()
        lo, hi = self.score_range if self.score_range is not None else (scores.min(), scores.max())
        result = train_arrays(TReSModel(model_cfg), images, scores, train_cfg, score_range=(lo, hi))
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_out_ = self.model_.latent_dim
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.patch_size)
        return predict_images(self.model_, images, self.test_patches, self.patch_size, self.seed)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.patch_size)
        return np.stack([image_latent(self.model_, img, self.test_patches, self.patch_size, (self.seed, i))
                         for i, img in enumerate(images)])

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample weights are not supported by SROCC")
        images = check_images(X, self.patch_size)
        return srocc(self.predict(images), check_scores(y, len(images)))
