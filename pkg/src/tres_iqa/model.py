"""Full quality model: backbone, feature fusion, encoder and the two prediction heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, FeatureFusion
from .encoder import EncoderConfig, TransformerEncoder


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head_hidden: int = 64
    use_transformer: bool = True


class ModelOutput(NamedTuple):
    q: torch.Tensor            # (b,)
    conv_logit: torch.Tensor   # (b,)
    atten_logit: torch.Tensor  # (b,)
    latent: torch.Tensor       # (b, c4 + d)
    conv_pooled: torch.Tensor  # (b, c4)
    atten_pooled: torch.Tensor  # (b, d), empty when the transformer is disabled


class ScoreHead(nn.Module):
    def __init__(self, in_features: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x))).squeeze(-1)


class TReSModel(nn.Module):
    """Hybrid CNN + self-attention quality predictor.

    ``q = conv_logit + atten_logit``. Both branch logits are emitted in score
    units: raw head outputs are multiplied by the ``score_scale`` buffer and
    shifted by an equal share of ``score_offset``. The buffers are set from the
    training score range by :meth:`set_score_range` and saved with the weights.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.backbone.seed)
            self.backbone = Backbone(cfg.backbone)
            self.fusion = FeatureFusion(cfg.backbone)
            c4 = cfg.backbone.channels[-1]
            self.conv_head = ScoreHead(c4, cfg.head_hidden)
            if cfg.use_transformer:
                self.encoder = TransformerEncoder(self.fusion.out_channels, cfg.encoder)
                self.atten_head = ScoreHead(cfg.encoder.width, cfg.head_hidden)
            else:
                self.encoder = None
                self.atten_head = None
            self._init_weights()
        self.register_buffer("score_scale", torch.tensor(1.0))
        self.register_buffer("score_offset", torch.tensor(0.0))

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # Branch outputs start near the middle of the score range.
        for head in (self.conv_head, self.atten_head):
            if head is not None:
                nn.init.normal_(head.fc2.weight, std=1e-3)

    def set_score_range(self, low: float, high: float) -> None:
        self.score_scale.fill_(float(high) - float(low))
        self.score_offset.fill_(0.5 * (float(high) + float(low)))

    @property
    def latent_dim(self) -> int:
        d = self.config.encoder.width if self.config.use_transformer else 0
        return self.config.backbone.channels[-1] + d

    def features(self, image: torch.Tensor):
        """Return ``(f4, encoded)``; ``encoded`` is ``None`` without a transformer."""
        feats = self.backbone(image)
        encoded = self.encoder(self.fusion(feats)) if self.encoder is not None else None
        return feats.f4, encoded

    def head_forward(self, f4: torch.Tensor, encoded: torch.Tensor | None) -> ModelOutput:
        if encoded is not None and f4.shape[-2:] != encoded.shape[-2:]:
            raise ValueError(
                f"branch grids differ: conv {tuple(f4.shape[-2:])} vs attention {tuple(encoded.shape[-2:])}"
            )
        share = 0.5 if encoded is not None else 1.0
        conv_pooled = f4.mean(dim=(2, 3))
        conv_logit = self.score_scale * self.conv_head(conv_pooled) + share * self.score_offset
        if encoded is None:
            atten_pooled = conv_pooled.new_zeros(conv_pooled.shape[0], 0)
            atten_logit = torch.zeros_like(conv_logit)
        else:
            atten_pooled = encoded.mean(dim=(2, 3))
            atten_logit = self.score_scale * self.atten_head(atten_pooled) + share * self.score_offset
        latent = torch.cat((conv_pooled, atten_pooled), dim=1)
        return ModelOutput(conv_logit + atten_logit, conv_logit, atten_logit, latent,
                           conv_pooled, atten_pooled)

    def forward(self, image: torch.Tensor) -> ModelOutput:
        return self.head_forward(*self.features(image))
