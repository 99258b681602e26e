"""Numeric building blocks shared by the backbone, encoder and losses.

Standard layers (conv, linear, layer norm, softmax, dropout, batch norm) come
straight from :mod:`torch`. This module adds the pieces the model needs on top
of them: per-sample Euclidean feature normalization, L2 pooling with a Hamming
blur kernel, and a finite-difference gradient checker used by the test suite.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SQRT_FLOOR = 1e-12


def hamming_window(size: int) -> np.ndarray:
    """1D Hamming window ``0.54 - 0.46 cos(2 pi n / (M - 1))`` (unnormalized)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"hamming window size must be odd and positive, got {size}")
    if size == 1:
        return np.ones(1)
    n = np.arange(size)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (size - 1))


def hamming_kernel(size: int) -> np.ndarray:
    """Separable 2D Hamming blur kernel of odd ``size``, normalized to unit sum."""
    w = hamming_window(size)
    k = np.outer(w, w)
    return k / k.sum()


def euclid_normalize(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Divide each sample by ``max(||x_b||_2, eps)``, norm taken over (C, H, W)."""
    if x.dim() != 4:
        raise ValueError(f"euclid_normalize expects (b, c, h, w), got shape {tuple(x.shape)}")
    norm = x.flatten(1).norm(dim=1).clamp_min(eps)
    return x / norm.view(-1, 1, 1, 1)


def l2pool(x: torch.Tensor, kernel: np.ndarray | torch.Tensor, stride: int = 2) -> torch.Tensor:
    """L2 pooling ``sqrt(g * (x . x))`` applied per channel.

    The input is reflect-padded by ``(M - 1) / 2`` so the output has
    ``ceil(h / stride) x ceil(w / stride)`` cells. The square root is floored
    at ``SQRT_FLOOR`` to keep the gradient bounded.
    """
    if stride < 1:
        raise ValueError(f"l2pool stride must be >= 1, got {stride}")
    if x.dim() != 4:
        raise ValueError(f"l2pool expects (b, c, h, w), got shape {tuple(x.shape)}")
    g = torch.as_tensor(kernel, dtype=x.dtype, device=x.device)
    m = g.shape[-1]
    pad = (m - 1) // 2
    c = x.shape[1]
    sq = x * x
    if pad:
        if min(x.shape[-2:]) <= pad:
            raise ValueError(
                f"l2pool reflective padding {pad} needs spatial dims > {pad}, got {tuple(x.shape[-2:])}"
            )
        sq = F.pad(sq, (pad, pad, pad, pad), mode="reflect")
    weight = g.expand(c, 1, m, m)
    out = F.conv2d(sq, weight, stride=stride, groups=c)
    return torch.sqrt(out.clamp_min(SQRT_FLOOR))


class L2Pool(nn.Module):
    """Module wrapper around :func:`l2pool` with a fixed Hamming kernel."""

    def __init__(self, kernel_size: int = 5, stride: int = 2):
        super().__init__()
        self.stride = stride
        self.register_buffer(
            "kernel", torch.tensor(hamming_kernel(kernel_size), dtype=torch.float32), persistent=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return l2pool(x, self.kernel, self.stride)

    def extra_repr(self) -> str:
        return f"kernel_size={self.kernel.shape[-1]}, stride={self.stride}"


def check_shape(op: str, x: torch.Tensor, ndim: int, axes: dict[int, int] | None = None) -> None:
    """Raise a ValueError naming ``op`` when ``x`` has the wrong rank or extents."""
    if x.dim() != ndim:
        raise ValueError(f"{op}: expected a {ndim}-d tensor, got shape {tuple(x.shape)}")
    for axis, size in (axes or {}).items():
        if x.shape[axis] != size:
            raise ValueError(f"{op}: axis {axis} has extent {x.shape[axis]}, expected {size}")


def grad_check(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of ``fn`` with central finite differences.

    ``fn`` is re-evaluated in place after perturbing entries of ``tensors``
    (leaf tensors with ``requires_grad``); a non-scalar output is sum-reduced.
    At most ``max_coords`` randomly chosen entries per tensor are probed.

    Returns the largest norm-wise relative error over the tensors,
    ``||analytic - numeric|| / max(1e-8, ||numeric||)``.
    """
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("grad_check runs in 64-bit mode; convert tensors with .double()")

    def scalar() -> torch.Tensor:
        out = fn()
        return out if out.dim() == 0 else out.sum()

    for t in tensors:
        t.grad = None
    value = scalar()
    if not torch.isfinite(value):
        raise FloatingPointError("grad_check: non-finite function value")
    analytic = torch.autograd.grad(value, list(tensors), allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            a = torch.zeros_like(t) if a is None else a
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = scalar().item()
                flat[i] = orig - step
                fm = scalar().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("grad_check: non-finite value under perturbation")
                num[j] = (fp - fm) / (2.0 * step)
            ana = a.reshape(-1)[torch.as_tensor(idx)].cpu().numpy()
            err = np.linalg.norm(ana - num) / max(1e-8, np.linalg.norm(num))
            worst = max(worst, float(err))
    return worst
