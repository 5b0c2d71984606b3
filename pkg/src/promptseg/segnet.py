"""Miniature mask-classification segmenter.

Image encoder with a class token, a frozen token-mixing text encoder, a pixel
decoder with text-to-pixel attention and a masked-attention transformer
decoder that keeps the predictions of every block.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    patch_size: int = 8
    vis_dim: int = 64
    pix_dim: int = 64
    text_dim: int = 32
    token_dim: int = 32
    query_dim: int = 64
    stem_dim: int = 32
    pixel_stride: int = 4
    num_blocks: int = 3
    context_tokens: int = 4
    text_seed: int = 42
    domain_prompt: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("model.num_classes must be >= 2")
        if self.num_blocks < 1 or self.context_tokens < 1:
            raise ValueError("model.num_blocks and model.context_tokens must be >= 1")
        if self.pixel_stride < 1 or self.patch_size % self.pixel_stride:
            raise ValueError("model.pixel_stride must divide model.patch_size")


@dataclass
class ImageFeatures:
    patch_features: torch.Tensor  # (B, D_v, H/ps, W/ps)
    class_token: torch.Tensor  # (B, D_v)
    patch_size: int
    fine: torch.Tensor | None = None  # (B, stem_dim, H/r, W/r) stem features at pixel stride r


@dataclass
class DecoderTrace:
    mask_logits: list[torch.Tensor] = field(default_factory=list)  # per block (B, N_q, H/r, W/r)
    class_logits: list[torch.Tensor] = field(default_factory=list)  # per block (B, N_q, K)
    mask_embed: torch.Tensor | None = None  # final block (B, N_q, D)

    @property
    def num_blocks(self) -> int:
        return len(self.mask_logits)

    def select(self, index) -> "DecoderTrace":
        """Sub-batch view of every block's predictions."""
        return DecoderTrace([m[index] for m in self.mask_logits], [c[index] for c in self.class_logits],
                            None if self.mask_embed is None else self.mask_embed[index])


def sinusoidal_codes(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    codes = torch.zeros(n, dim, dtype=torch.float64)
    codes[:, 0::2] = torch.sin(pos * freq)
    codes[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return codes.to(dtype)


@functools.lru_cache(maxsize=32)
def grid_codes(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """2-D sinusoidal position codes, ``(h * w, dim)``: half the channels per axis.

    Cached; callers must not modify the result in place.
    """
    half = dim // 2
    ys = sinusoidal_codes(h, half, dtype)[:, None, :].expand(h, w, half)
    xs = sinusoidal_codes(w, dim - half, dtype)[None, :, :].expand(h, w, dim - half)
    return torch.cat([ys, xs], dim=-1).reshape(h * w, dim)


@functools.lru_cache(maxsize=32)
def _interp_matrix(n_out: int, n_in: int) -> torch.Tensor:
    src = ((torch.arange(n_out, dtype=torch.float64) + 0.5) * n_in / n_out - 0.5).clamp(0, n_in - 1)
    lo = src.floor().long()
    hi = (lo + 1).clamp(max=n_in - 1)
    frac = src - lo
    m = torch.zeros(n_out, n_in, dtype=torch.float64)
    m[torch.arange(n_out), lo] += 1 - frac
    m[torch.arange(n_out), hi] += frac
    return m


def interp_matrix(n_out: int, n_in: int, dtype=torch.float32) -> torch.Tensor:
    """Linear interpolation weights (n_out, n_in) with half-pixel centers (``align_corners=False``)."""
    return _interp_matrix(n_out, n_in).to(dtype)


def upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Separable bilinear resize of the last two dims."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    return interp_matrix(size[0], h, x.dtype) @ x @ interp_matrix(size[1], w, x.dtype).T


@functools.lru_cache(maxsize=32)
def _grid_interp(out_hw: tuple[int, int], in_hw: tuple[int, int]) -> torch.Tensor:
    return torch.kron(_interp_matrix(out_hw[0], in_hw[0]), _interp_matrix(out_hw[1], in_hw[1]))


def upsample_tokens(tokens: torch.Tensor, in_hw: tuple[int, int], out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of row-major grid tokens (B, h*w, D) -> (B, H*W, D)."""
    return _grid_interp(tuple(out_hw), tuple(in_hw)).to(tokens.dtype) @ tokens


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Single-head scaled dot-product attention; ``mask`` is True where attending is allowed."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class ImageEncoder(nn.Module):
    """Patch embedding followed by one transformer layer over ``[CLS; patches]``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.vis_dim
        self.patch_size = cfg.patch_size
        self.patch = nn.Conv2d(3, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.norm_out = nn.LayerNorm(d)
        self.stem = nn.Conv2d(3, cfg.stem_dim, 3, stride=cfg.pixel_stride, padding=1)

    def forward(self, x: torch.Tensor, with_fine: bool = True) -> ImageFeatures:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected images of shape (B, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"image size {h}x{w} is not divisible by patch size {self.patch_size}")
        patches = self.patch(x)
        b, d, gh, gw = patches.shape
        tokens = patches.flatten(2).transpose(1, 2) + grid_codes(gh, gw, d, x.dtype)
        tokens = torch.cat([self.cls.expand(b, -1, -1), tokens], dim=1)
        q, k, v = self.qkv(self.norm1(tokens)).chunk(3, dim=-1)
        tokens = tokens + self.proj(attention(q, k, v))
        tokens = self.norm_out(tokens + self.mlp(self.norm2(tokens)))
        grid = tokens[:, 1:].transpose(1, 2).reshape(b, d, gh, gw)
        fine = F.relu(self.stem(x)) if with_fine else None
        return ImageFeatures(grid, tokens[:, 0], self.patch_size, fine)


class TextEncoder(nn.Module):
    """Frozen stand-in for a pretrained text encoder.

    Each sequence ``[p_1..p_M, class_k]`` is mixed by two token-mixing layers;
    the output at the class position is projected to the text feature ``t_k``.
    All weights come from ``seed`` and never receive gradients.
    """

    def __init__(self, token_dim: int, text_dim: int, seq_len: int, seed: int = 42, layers: int = 2):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)

        def rand(*shape, scale):
            return nn.Parameter(torch.randn(*shape, generator=gen) * scale, requires_grad=False)

        self.seq_len = seq_len
        self.token_dim = token_dim
        self.mix = nn.ParameterList([rand(seq_len, seq_len, scale=1 / math.sqrt(seq_len)) for _ in range(layers)])
        self.w1 = nn.ParameterList([rand(token_dim, 2 * token_dim, scale=1 / math.sqrt(token_dim)) for _ in range(layers)])
        self.w2 = nn.ParameterList([rand(2 * token_dim, token_dim, scale=1 / math.sqrt(2 * token_dim)) for _ in range(layers)])
        self.out = rand(token_dim, text_dim, scale=1 / math.sqrt(token_dim))
        self.register_buffer("pos", sinusoidal_codes(seq_len, token_dim), persistent=True)

    def forward(self, prompt: torch.Tensor, class_tokens: torch.Tensor) -> torch.Tensor:
        """``prompt`` (B, M, C_tok) or (M, C_tok); ``class_tokens`` (K, C_tok) -> (B, K, C)."""
        squeeze = prompt.ndim == 2
        if squeeze:
            prompt = prompt[None]
        if prompt.ndim != 3 or prompt.shape[-1] != self.token_dim or prompt.shape[1] + 1 != self.seq_len:
            raise ShapeError(f"prompt must be (B, {self.seq_len - 1}, {self.token_dim}), got {tuple(prompt.shape)}")
        if class_tokens.ndim != 2 or class_tokens.shape[-1] != self.token_dim:
            raise ShapeError(f"class tokens must be (K, {self.token_dim}), got {tuple(class_tokens.shape)}")
        b, m, c = prompt.shape
        k = class_tokens.shape[0]
        seq = torch.cat([prompt[:, None].expand(b, k, m, c), class_tokens[None, :, None].expand(b, k, 1, c)], dim=2)
        h = seq + self.pos.to(seq.dtype)
        for mix, w1, w2 in zip(self.mix, self.w1, self.w2):
            h = h + torch.tanh(torch.einsum("ij,bkjc->bkic", mix, F.layer_norm(h, (c,))))
            h = h + torch.tanh(F.layer_norm(h, (c,)) @ w1) @ w2
        t = F.layer_norm(h[:, :, -1], (c,)) @ self.out
        return t[0] if squeeze else t


class PixelDecoder(nn.Module):
    """Upsamples patch features to the pixel grid, fuses the stem and applies text-to-pixel attention.

    Works on row-major pixel tokens (B, HW, D); the returned ``z`` is a
    (B, D, H, W) view of them.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.coarse = nn.Linear(cfg.vis_dim, cfg.pix_dim)
        self.fine = nn.Linear(cfg.stem_dim, cfg.pix_dim)
        self.key = nn.Linear(cfg.text_dim, cfg.pix_dim)
        self.value = nn.Linear(cfg.text_dim, cfg.pix_dim)

    def forward(self, feats: ImageFeatures, t: torch.Tensor) -> torch.Tensor:
        if feats.fine is None:
            raise ShapeError("pixel decoding needs full-resolution stem features")
        b, _, gh, gw = feats.patch_features.shape
        h, w = feats.fine.shape[-2:]
        coarse = self.coarse(feats.patch_features.flatten(2).transpose(1, 2))
        tokens = upsample_tokens(coarse, (gh, gw), (h, w)) + self.fine(feats.fine.flatten(2).transpose(1, 2))
        tokens = tokens + self.text_to_pixel(tokens, t)
        return tokens.transpose(1, 2).reshape(b, -1, h, w)

    def text_to_pixel(self, pix: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Every pixel token (B, HW, D) attends over the K text features (B, K, C)."""
        if t.ndim != 3 or t.shape[0] != pix.shape[0]:
            raise ShapeError(f"text features must be (B, K, C) with B={pix.shape[0]}, got {tuple(t.shape)}")
        return attention(pix, self.key(t), self.value(t))


class DecoderBlock(nn.Module):
    def __init__(self, query_dim: int, pix_dim: int):
        super().__init__()
        self.cross_q = nn.Linear(query_dim, pix_dim)
        self.cross_out = nn.Linear(pix_dim, query_dim)
        self.norm1 = nn.LayerNorm(query_dim)
        self.qkv = nn.Linear(query_dim, 3 * query_dim)
        self.self_out = nn.Linear(query_dim, query_dim)
        self.norm2 = nn.LayerNorm(query_dim)
        self.ffn = nn.Sequential(nn.Linear(query_dim, 2 * query_dim), nn.GELU(), nn.Linear(2 * query_dim, query_dim))
        self.norm3 = nn.LayerNorm(query_dim)

    def cross_attend(self, q: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        """Masked cross-attention of queries (B, N, L) over pixel memory (B, HW, D)."""
        return self.cross_out(attention(self.cross_q(q), memory, memory, mask))

    def forward(self, q: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        q = self.norm1(q + self.cross_attend(q, memory, mask))
        a, b, c = self.qkv(q).chunk(3, dim=-1)
        q = self.norm2(q + self.self_out(attention(a, b, c)))
        return self.norm3(q + self.ffn(q))


def attention_mask_from(mask_logits: torch.Tensor) -> torch.Tensor:
    """Binarize the previous block's masks (sigmoid > 0.5); empty rows fall back to full attention."""
    allowed = mask_logits.flatten(2) > 0
    empty = ~allowed.any(dim=-1, keepdim=True)
    return allowed | empty


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(cfg.query_dim, cfg.pix_dim) for _ in range(cfg.num_blocks))
        self.class_head = nn.Linear(cfg.query_dim, cfg.num_classes)
        self.mask_head = nn.Sequential(nn.Linear(cfg.query_dim, cfg.query_dim), nn.GELU(),
                                       nn.Linear(cfg.query_dim, cfg.pix_dim))

    def forward(self, z: torch.Tensor, q0: torch.Tensor) -> DecoderTrace:
        """Refine ``q0`` over pixel features ``z``, keeping every block's predictions.

        Block ``s`` attends only where block ``s - 1`` predicts its mask;
        block 1 attends everywhere. Mask logits live on the grid of ``z``.
        """
        b, d, h, w = z.shape
        memory = z.flatten(2).transpose(1, 2)
        trace = DecoderTrace()
        q, mask = q0, None
        for block in self.blocks:
            q = block(q, memory, mask)
            m = self.mask_head(q)
            logits = (m @ memory.transpose(1, 2)).reshape(b, -1, h, w)
            trace.mask_logits.append(logits)
            trace.class_logits.append(self.class_head(q))
            trace.mask_embed = m
            mask = attention_mask_from(logits)
        return trace


def assemble_semantic_map(trace: DecoderTrace, block: int | None = None,
                          size: tuple[int, int] | None = None) -> torch.Tensor:
    """Semantic map ``(B, K, H, W)`` from block ``block`` (1-based; default last).

    ``y[k] = sum_q softmax(c_q)[k] * sigmoid(mask_q)``; mask logits are
    resized to ``size`` first when given.
    """
    s = trace.num_blocks if block is None else block
    if not 1 <= s <= trace.num_blocks:
        raise ValueError(f"block must lie in [1, {trace.num_blocks}], got {block}")
    masks = trace.mask_logits[s - 1]
    if size is not None:
        masks = upsample(masks, size)
    cls = torch.softmax(trace.class_logits[s - 1], dim=-1)
    return torch.einsum("bnk,bnhw->bkhw", cls, torch.sigmoid(masks))
