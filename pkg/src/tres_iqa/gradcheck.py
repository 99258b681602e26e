"""Finite-difference gradient checks for every differentiable building block."""
from __future__ import annotations

from typing import Callable, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig
from .encoder import EncoderConfig, FeedForward, MultiHeadSelfAttention, TransformerEncoder
from .losses import quality_loss, relative_ranking_loss, self_consistency_loss
from .model import ModelConfig, TReSModel
from .nn import euclid_normalize, grad_check, hamming_kernel, l2pool


class GradCheckResult(NamedTuple):
    op: str
    max_rel_error: float
    points: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _leaf(gen: torch.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_()


def _params(module: nn.Module) -> list[torch.Tensor]:
    """Trainable tensors to probe.

    Key-projection biases are left out: adding a constant to every key shifts
    each softmax row uniformly, so their gradient is identically zero and a
    relative error against finite-difference noise is meaningless.
    :func:`key_bias_gradients` checks that they are zero instead.
    """
    return [p for name, p in module.named_parameters()
            if p.requires_grad and not name.endswith("k_proj.bias")]


def key_bias_gradients(module: nn.Module, loss: torch.Tensor) -> list[float]:
    biases = [p for name, p in module.named_parameters() if name.endswith("k_proj.bias")]
    grads = torch.autograd.grad(loss, biases, allow_unused=True)
    return [0.0 if g is None else float(g.abs().max()) for g in grads]


# Each case builds a fresh random problem from a generator and returns the
# function to differentiate and the tensors to perturb.
Case = Callable[[torch.Generator], tuple[Callable[[], torch.Tensor], list[torch.Tensor]]]


def _conv(gen):
    x, w, b = _leaf(gen, 2, 3, 6, 6), _leaf(gen, 4, 3, 3, 3), _leaf(gen, 4)
    return (lambda: F.conv2d(x, w, b, stride=2, padding=1) ** 2), [x, w, b]


def _linear(gen):
    x, w, b = _leaf(gen, 5, 7), _leaf(gen, 3, 7), _leaf(gen, 3)
    return (lambda: F.linear(x, w, b) ** 2), [x, w, b]


def _layernorm(gen):
    x, g, b = _leaf(gen, 4, 6), _leaf(gen, 6), _leaf(gen, 6)
    r = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    return (lambda: F.layer_norm(x, (6,), g, b) * r), [x, g, b]


def _softmax(gen):
    x = _leaf(gen, 3, 5)
    r = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    return (lambda: F.softmax(x, dim=-1) * r), [x]


def _l2pool(gen):
    x = _leaf(gen, 1, 2, 8, 8)
    k = hamming_kernel(5)
    return (lambda: l2pool(x, k, 2) ** 2 + l2pool(x, k, 2)), [x]


def _euclid(gen):
    x = _leaf(gen, 2, 3, 4, 4)
    r = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    return (lambda: euclid_normalize(x) * r), [x]


def _attention(gen):
    attn = MultiHeadSelfAttention(8, 2).double()
    with torch.no_grad():
        for p in attn.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    x, pe = _leaf(gen, 2, 4, 8), torch.randn(4, 8, generator=gen, dtype=torch.float64)
    r = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
    return (lambda: attn(x, pe) * r), [x, *_params(attn)]


def _ffn(gen):
    ffn = FeedForward(8, 16).double()
    with torch.no_grad():
        for p in ffn.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    x = _leaf(gen, 2, 4, 8)
    r = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
    return (lambda: ffn(x) * r), [x, *_params(ffn)]


def _encoder(gen):
    enc = TransformerEncoder(6, EncoderConfig(n_layers=2, width=8, heads=2)).double()
    with torch.no_grad():
        for p in enc.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
    x = _leaf(gen, 1, 6, 2, 2)
    r = torch.randn(1, 8, 2, 2, generator=gen, dtype=torch.float64)
    return (lambda: enc(x) * r), [x, *_params(enc)]


def _quality(gen):
    q, s = _leaf(gen, 8, scale=10.0), torch.randn(8, generator=gen, dtype=torch.float64) * 10
    return (lambda: quality_loss(q, s, "l1") + quality_loss(q, s, "l2")), [q]


def _ranking(gen):
    q = _leaf(gen, 8, scale=10.0)
    s = torch.randn(8, generator=gen, dtype=torch.float64) * 30
    return (lambda: relative_ranking_loss(q, s)), [q]


def _consistency(gen):
    a, at, b, bt = (_leaf(gen, 6, scale=5.0) for _ in range(4))
    rr, rrt = _leaf(gen, (), scale=5.0), _leaf(gen, (), scale=5.0)
    return (lambda: self_consistency_loss(a, at, b, bt, rr, rrt, 0.5)), [a, at, b, bt, rr, rrt]


def tiny_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(channels=(2, 3, 4, 4), units_per_block=1, pool_kernel=3, seed=seed),
        encoder=EncoderConfig(n_layers=1, width=8, heads=2),
        head_hidden=4,
    )


def _model(gen):
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
    model = TReSModel(tiny_model_config(seed)).double().eval()
    model.set_score_range(0.0, 10.0)
    with torch.no_grad():
        for head in (model.conv_head, model.atten_head):
            head.fc2.weight.normal_(0.0, 0.5, generator=gen)
        # Zero BN shifts put dead-channel pre-activations exactly on the relu
        # kink; random statistics move the check point off it.
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.weight.uniform_(0.5, 1.5, generator=gen)
                m.bias.normal_(0.0, 0.2, generator=gen)
                m.running_mean.normal_(0.0, 0.2, generator=gen)
                m.running_var.uniform_(0.5, 1.5, generator=gen)
    x = _leaf(gen, 2, 3, 16, 16, scale=0.5)
    return (lambda: model(x).q), [x, *_params(model)]


CASES: dict[str, Case] = {
    "conv": _conv,
    "linear": _linear,
    "layernorm": _layernorm,
    "softmax": _softmax,
    "l2pool": _l2pool,
    "euclid_normalize": _euclid,
    "attention": _attention,
    "ffn": _ffn,
    "encoder": _encoder,
    "quality_loss": _quality,
    "relative_ranking_loss": _ranking,
    "self_consistency_loss": _consistency,
    "model": _model,
}


def check_op(name: str, points: int = 10, seed: int = 0, max_coords: int | None = 24) -> GradCheckResult:
    """Worst relative error of ``name`` over ``points`` independently drawn problems."""
    case = CASES[name]
    worst = 0.0
    for k in range(points):
        gen = torch.Generator().manual_seed(seed * 1000 + k)
        fn, tensors = case(gen)
        worst = max(worst, grad_check(fn, tensors, max_coords=max_coords, seed=k))
    return GradCheckResult(name, worst, points)


def run_suite(points: int = 10, seed: int = 0, ops=None) -> list[GradCheckResult]:
    return [check_op(name, points, seed) for name in (ops or CASES)]
