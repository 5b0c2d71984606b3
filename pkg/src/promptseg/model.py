"""The full segmenter: encoders, prompts, pixel decoder and transformer decoder."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .prompts import (PromptLearner, domain_aware_text_features, fixed_prompt_text_features,
                      template_text_features)
from .segnet import (DecoderTrace, ImageEncoder, ImageFeatures, ModelConfig, PixelDecoder, TextEncoder,
                     TransformerDecoder, assemble_semantic_map)

FROZEN_PREFIXES = ("frozen_encoder.", "text_encoder.", "prompt.class_tokens", "prompt.template")


@dataclass
class ModelOutput:
    trace: DecoderTrace
    text: torch.Tensor  # (B, K, C) text features used for the queries
    text0: torch.Tensor  # (K, C) template text features
    pi: torch.Tensor | None  # (B, C_tok) domain embeddings, None for the fixed prompt
    feats: ImageFeatures
    frozen_cls: torch.Tensor  # (B, D_v)
    vl_feats: torch.Tensor  # (B, C, H/ps, W/ps) patch features projected to the text space
    image_size: tuple[int, int]

    def semantic_logits(self, block: int | None = None) -> torch.Tensor:
        return assemble_semantic_map(self.trace, block, self.image_size)


class PromptSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image_encoder = ImageEncoder(cfg)
            self.prompt = PromptLearner(cfg)
            self.query_mlp = nn.Sequential(nn.Linear(cfg.text_dim, cfg.query_dim), nn.GELU(),
                                           nn.Linear(cfg.query_dim, cfg.query_dim))
            self.pixel_decoder = PixelDecoder(cfg)
            self.decoder = TransformerDecoder(cfg)
            self.vl_proj = nn.Conv2d(cfg.vis_dim, cfg.text_dim, 1)
        self.text_encoder = TextEncoder(cfg.token_dim, cfg.text_dim, cfg.context_tokens + 1, seed=cfg.text_seed)
        # frozen snapshot of the visual backbone at initialization
        self.frozen_encoder = copy.deepcopy(self.image_encoder).requires_grad_(False)

    def forward(self, x: torch.Tensor, zero_domain: bool = False) -> ModelOutput:
        feats = self.image_encoder(x)
        with torch.no_grad():
            frozen_cls = self.frozen_encoder(x, with_fine=False).class_token
        if self.cfg.domain_prompt:
            text, pi = domain_aware_text_features(frozen_cls, self.prompt, self.text_encoder, zero_domain)
        else:
            text, pi = fixed_prompt_text_features(x.shape[0], self.prompt, self.text_encoder), None
        z = self.pixel_decoder(feats, text)
        trace = self.decoder(z, self.query_mlp(text))
        return ModelOutput(trace, text, template_text_features(self.prompt, self.text_encoder), pi, feats,
                           frozen_cls, self.vl_proj(feats.patch_features), tuple(x.shape[-2:]))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if k.startswith(FROZEN_PREFIXES)}

    def frozen_hashes(self) -> dict[str, str]:
        return {k: tensor_hash(v) for k, v in self.frozen_state().items()}

    @torch.no_grad()
    def predict(self, x: torch.Tensor, block: int | None = None) -> torch.Tensor:
        """Semantic probabilities ``(B, K, H, W)`` normalized over classes."""
        logits = self(x).semantic_logits(block)
        return logits / logits.sum(dim=1, keepdim=True).clamp_min(1e-12)


def tensor_hash(t: torch.Tensor) -> str:
    t = t.detach().cpu().contiguous()
    h = hashlib.sha256(str((t.dtype, tuple(t.shape))).encode())
    h.update(t.numpy().tobytes())
    return h.hexdigest()
