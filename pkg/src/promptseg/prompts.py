"""Domain-aware context prompts.

A shallow generator maps the frozen class token of an image to a domain
embedding, which is broadcast-added to every learnable context token before
the prompt goes through the frozen text encoder.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .segnet import ModelConfig, ShapeError, TextEncoder


class PromptGenerator(nn.Module):
    """BatchNorm -> Linear -> ReLU -> Linear, from visual dim to token dim."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim
        self.in_dim = in_dim
        self.net = nn.Sequential(nn.BatchNorm1d(in_dim), nn.Linear(in_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, out_dim))
        nn.init.normal_(self.net[3].weight, std=0.02)
        nn.init.zeros_(self.net[3].bias)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.net(feat)


class PromptLearner(nn.Module):
    """Learnable context prompt plus the fixed class and template tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.context = nn.Parameter(torch.randn(cfg.context_tokens, cfg.token_dim) * 0.02)
        self.generator = PromptGenerator(cfg.vis_dim, cfg.token_dim)
        gen = torch.Generator().manual_seed(cfg.text_seed + 1)
        # class-name lookup vectors and the fixed template prompt are frozen
        self.register_buffer("class_tokens", torch.randn(cfg.num_classes, cfg.token_dim, generator=gen))
        self.register_buffer("template", torch.randn(cfg.context_tokens, cfg.token_dim, generator=gen))


def domain_embedding(feat: torch.Tensor, generator: PromptGenerator) -> torch.Tensor:
    """Domain embedding ``pi`` (B, C_tok) from frozen class tokens (B, D_v)."""
    if feat.ndim != 2 or feat.shape[-1] != generator.in_dim:
        raise ShapeError(f"frozen class token must be (B, {generator.in_dim}), got {tuple(feat.shape)}")
    return generator(feat)


def compose_prompt(p: torch.Tensor, pi: torch.Tensor) -> torch.Tensor:
    """``p_x = p + pi`` with ``pi`` broadcast over the M context tokens.

    ``p`` is (M, C_tok); ``pi`` is (C_tok,) or (B, C_tok) giving (M, C_tok) or (B, M, C_tok).
    """
    if pi.shape[-1] != p.shape[-1]:
        raise ShapeError(f"domain embedding dim {pi.shape[-1]} != prompt token dim {p.shape[-1]}")
    return p + pi.unsqueeze(-2)


def domain_aware_text_features(frozen_cls: torch.Tensor, learner: PromptLearner, encoder: TextEncoder,
                               zero_domain: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Text features ``t_x`` (B, K, C) and the domain embeddings ``pi`` (B, C_tok).

    ``zero_domain`` clamps the generator output to zero, which reduces the
    pipeline to the fixed-prompt one.
    """
    pi = domain_embedding(frozen_cls, learner.generator)
    if zero_domain:
        pi = torch.zeros_like(pi)
    return encoder(compose_prompt(learner.context, pi), learner.class_tokens), pi


def fixed_prompt_text_features(batch: int, learner: PromptLearner, encoder: TextEncoder) -> torch.Tensor:
    """Text features of the shared learnable prompt, repeated for a batch."""
    prompt = learner.context.unsqueeze(0).expand(batch, -1, -1)
    return encoder(prompt, learner.class_tokens)


def template_text_features(learner: PromptLearner, encoder: TextEncoder) -> torch.Tensor:
    """Reference features ``T0`` (K, C) of the frozen template prompt."""
    with torch.no_grad():
        return encoder(learner.template, learner.class_tokens)
