"""Patch-averaged prediction and latent extraction for whole images."""
from __future__ import annotations

import numpy as np
import torch

from .data import crop_patches, patch_corners
from .model import TReSModel


def _forward_patches(model: TReSModel, image: np.ndarray, n_patches: int, patch_size: int,
                     seed, mirror: bool = False):
    """Forward ``n_patches`` seeded random patches of ``image``.

    With ``mirror`` the image is flipped horizontally and the corners are
    mirrored, so patch ``k`` is exactly the flip of patch ``k`` of the
    un-mirrored call.
    """
    h, w = image.shape[:2]
    corners = patch_corners(h, w, n_patches, patch_size, np.random.default_rng(seed))
    if mirror:
        image = image[:, ::-1]
        corners = corners.copy()
        corners[:, 1] = w - patch_size - corners[:, 1]
    x = crop_patches(image, corners, patch_size)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(x)
    finally:
        model.train(was_training)


def predict_image(model: TReSModel, image: np.ndarray, n_patches: int = 50, patch_size: int = 224,
                  seed=0, mirror: bool = False) -> float:
    """Mean predicted score over ``n_patches`` random patches (evaluation mode)."""
    out = _forward_patches(model, image, n_patches, patch_size, seed, mirror)
    return float(out.q.double().mean())


def image_latent(model: TReSModel, image: np.ndarray, n_patches: int = 50, patch_size: int = 224,
                 seed=0) -> np.ndarray:
    out = _forward_patches(model, image, n_patches, patch_size, seed)
    return out.latent.double().mean(dim=0).numpy()


def predict_images(model, images, n_patches: int, patch_size: int, seed: int = 0) -> np.ndarray:
    """Per-image scores; image ``i`` draws its patches from the stream ``(seed, i)``."""
    return np.array([predict_image(model, img, n_patches, patch_size, (seed, i))
                     for i, img in enumerate(images)])
