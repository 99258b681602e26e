import itertools

import numpy as np
import pytest
import torch

from tres_iqa.backbone import Backbone, BackboneConfig, FeatureFusion, MultiScaleFeatures, rescale_and_concat
from tres_iqa.encoder import (EncoderConfig, MultiHeadSelfAttention, TransformerEncoder, flatten_grid,
                              positional_encoding, unflatten_grid)


def test_backbone_shapes():
    feats = Backbone(BackboneConfig()).eval()(torch.rand(2, 3, 64, 64))
    assert [tuple(f.shape) for f in feats] == [(2, 8, 32, 32), (2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4)]


def test_backbone_zero_weights_give_zero_features():
    net = Backbone().eval()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    assert all(torch.count_nonzero(f) == 0 for f in net(torch.rand(1, 3, 32, 32)))


def test_backbone_eval_is_deterministic():
    net = Backbone().eval()
    x = torch.rand(1, 3, 32, 32)
    a, b = net(x), net(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_backbone_seeded_init_and_errors():
    a, b = Backbone(BackboneConfig(seed=3)), Backbone(BackboneConfig(seed=3))
    # Backbone itself draws from the global stream; identical global seed gives identical weights.
    torch.manual_seed(1)
    c = Backbone(BackboneConfig(seed=3))
    torch.manual_seed(1)
    d = Backbone(BackboneConfig(seed=3))
    assert all(torch.equal(p, q) for p, q in zip(c.parameters(), d.parameters()))
    with pytest.raises(ValueError, match="divisible by 16"):
        a(torch.rand(1, 3, 40, 40))
    with pytest.raises(ValueError):
        b(torch.rand(1, 1, 32, 32))
    with pytest.raises(ValueError):
        BackboneConfig(channels=(1, 2, 3))
    with pytest.raises(ValueError):
        BackboneConfig(feature_dropout=1.0)


def test_fusion_shape_and_constant_case():
    cfg = BackboneConfig()
    feats = Backbone(cfg).eval()(torch.rand(2, 3, 64, 64))
    fusion = FeatureFusion(cfg).eval()
    assert fusion(feats).shape == (2, 120, 4, 4)
    assert fusion.out_channels == 120
    const = MultiScaleFeatures(*(torch.full((1, c, s, s), 2.0) for c, s in zip((8, 16, 32, 64), (32, 16, 8, 4))))
    out = fusion(const)
    offset = 0
    for c in (8, 16, 32, 64):
        block = out[:, offset:offset + c]
        assert torch.allclose(block, block.flatten()[0].expand_as(block), atol=1e-6)
        offset += c


def test_fusion_normalizes_each_scale(rng):
    feats = MultiScaleFeatures(*(torch.tensor(rng.standard_normal((2, c, s, s)) * 7)
                                 for c, s in zip((2, 3, 4, 5), (16, 8, 4, 2))))
    out = rescale_and_concat(feats, pool_kernel=1)
    # kernel size 1 makes each pooling step a plain stride-2 subsample, so the coarsest block is unpooled.
    last = out[:, -5:]
    norms = last.flatten(1).norm(dim=1)
    assert torch.allclose(norms, torch.ones(2, dtype=norms.dtype), atol=1e-5)


def test_fusion_rejects_bad_pyramid():
    feats = MultiScaleFeatures(torch.rand(1, 2, 12, 12), torch.rand(1, 2, 8, 8), torch.rand(1, 2, 4, 4),
                               torch.rand(1, 2, 4, 4))
    with pytest.raises(ValueError, match="power-of-two"):
        FeatureFusion(BackboneConfig(channels=(2, 2, 2, 2), pool_kernel=3))(feats)


def test_flatten_roundtrip_and_projection():
    x = torch.rand(2, 120, 4, 4)
    enc = TransformerEncoder(120, EncoderConfig())
    assert enc.project_tokens(x).shape == (2, 16, 64)
    assert torch.equal(unflatten_grid(flatten_grid(x), 4, 4), x)
    with torch.no_grad():
        enc.project.weight.zero_()
        enc.project.bias.zero_()
    assert torch.count_nonzero(enc.project_tokens(x)) == 0
    with pytest.raises(ValueError):
        unflatten_grid(flatten_grid(x), 3, 5)


def test_positional_encoding_properties():
    pe = positional_encoding(5, 7, 16)
    assert pe.shape == (35, 16)
    assert pe.abs().max() <= 1
    assert torch.equal(pe, positional_encoding(5, 7, 16))
    with pytest.raises(ValueError):
        positional_encoding(2, 2, 6)


def test_positional_encoding_rows_distinct():
    for m, n in itertools.product(range(1, 17), repeat=2):
        pe = positional_encoding(m, n, 16, dtype=torch.float64)
        d = torch.cdist(pe, pe)
        d.fill_diagonal_(1.0)
        assert d.min() > 0, (m, n)


def test_positional_encoding_layout():
    pe = positional_encoding(2, 3, 8, dtype=torch.float64)
    # token (row 1, col 2) in 1-based positions, first frequency of each half
    r, c = 1, 2
    tok = pe[(r - 1) * 3 + (c - 1)]
    assert torch.isclose(tok[0], torch.sin(torch.tensor(float(r), dtype=torch.float64)))
    assert torch.isclose(tok[1], torch.cos(torch.tensor(float(r), dtype=torch.float64)))
    assert torch.isclose(tok[4], torch.sin(torch.tensor(float(c), dtype=torch.float64)))
    assert torch.isclose(tok[5], torch.cos(torch.tensor(float(c), dtype=torch.float64)))


def test_attention_single_token_and_uniform():
    attn = MultiHeadSelfAttention(8, 2).double()
    x = torch.randn(1, 1, 8, dtype=torch.float64)
    out = attn(x)
    assert torch.all(attn.last_weights == 1.0)
    assert torch.allclose(out, attn.out_proj(attn.v_proj(x)))
    with torch.no_grad():
        for lin in (attn.q_proj, attn.k_proj):
            lin.weight.zero_()
            lin.bias.zero_()
    attn(torch.randn(2, 5, 8, dtype=torch.float64))
    assert torch.allclose(attn.last_weights, torch.full_like(attn.last_weights, 0.2))


def test_attention_permutation_equivariance():
    attn = MultiHeadSelfAttention(8, 2).double()
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    perm = torch.randperm(6)
    assert torch.allclose(attn(x[:, perm]), attn(x)[:, perm], atol=1e-5)


def test_encoder_shapes_and_degenerate():
    enc = TransformerEncoder(120, EncoderConfig(n_layers=2, width=64, heads=16)).eval()
    x = torch.rand(2, 120, 4, 4)
    assert enc(x).shape == (2, 64, 4, 4)
    weights = enc.attention_weights()
    assert len(weights) == 2 and torch.allclose(weights[0].sum(-1), torch.ones(2, 16, 16), atol=1e-6)
    empty = TransformerEncoder(120, EncoderConfig(n_layers=0))
    assert torch.equal(empty(x), unflatten_grid(empty.project_tokens(x), 4, 4))
    assert not torch.allclose(enc(2 * x), 2 * enc(x), atol=1e-3)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(width=10, heads=3)
    assert EncoderConfig(width=8, heads=2).ffn_dim == 32
