"""Label-preserving texture perturbation: color jitter, Gaussian blur, noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .scenegen import LabeledImage


@dataclass(frozen=True)
class PerturbRanges:
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue_shift: tuple[float, float] = (-0.1, 0.1)
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    noise_sigma: tuple[float, float] = (0.0, 0.05)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"perturb.{f.name}: invalid range ({lo}, {hi})")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name)[0] < 0:
                raise ValueError(f"perturb.{name}: factors must be >= 0")
        if not -0.5 <= self.hue_shift[0] <= self.hue_shift[1] <= 0.5:
            raise ValueError("perturb.hue_shift must lie within [-0.5, 0.5]")
        if self.blur_sigma[0] < 0 or self.noise_sigma[0] < 0:
            raise ValueError("perturb sigmas must be >= 0")

    @classmethod
    def identity(cls) -> "PerturbRanges":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


@dataclass(frozen=True)
class PerturbationParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue_shift: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def is_identity(self) -> bool:
        return (self.brightness == self.contrast == self.saturation == 1.0
                and self.hue_shift == self.blur_sigma == self.noise_sigma == 0.0)


def sample_perturbation(rng_seed: int, ranges: PerturbRanges | None = None) -> PerturbationParams:
    ranges = ranges or PerturbRanges()
    rng = np.random.default_rng(rng_seed)
    draws = {f.name: float(rng.uniform(*getattr(ranges, f.name))) for f in fields(ranges)}
    return PerturbationParams(**draws, seed=int(rng_seed))


def blur_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(3.0 * sigma) + 1


def _blend(img: torch.Tensor, other: torch.Tensor, ratio: torch.Tensor) -> torch.Tensor:
    ratio = ratio.to(img.dtype)[:, None, None, None]
    return (ratio * img + (1.0 - ratio) * other).clamp(0.0, 1.0)


def _gaussian_kernels(sigmas: list[float], radius: int, dtype) -> torch.Tensor:
    """Normalized 1-D Gaussian taps (n, 2 * radius + 1); zero sigma gives a unit impulse.

    Each kernel keeps its own size ``blur_kernel_size(sigma)`` (capped at
    ``2 * radius + 1``) and is zero-padded to the common width.
    """
    width = 2 * radius + 1
    out = torch.zeros(len(sigmas), width, dtype=torch.float64)
    for i, sigma in enumerate(sigmas):
        if sigma <= 0:
            out[i, radius] = 1.0
            continue
        half = min(blur_kernel_size(sigma), width) // 2
        x = torch.arange(-half, half + 1, dtype=torch.float64)
        pdf = torch.exp(-0.5 * (x / sigma) ** 2)
        out[i, radius - half: radius + half + 1] = pdf / pdf.sum()
    return out.to(dtype)


def _blur(x: torch.Tensor, sigmas: list[float]) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding and one sigma per image."""
    b, c, h, w = x.shape
    # reflect padding needs the kernel radius below the image size
    cap = (2 * (min(h, w) - 1) - 1) // 2
    radius = min(max(blur_kernel_size(s) // 2 if s > 0 else 0 for s in sigmas), cap)
    if radius == 0:
        return x
    taps = _gaussian_kernels(sigmas, radius, x.dtype).repeat_interleave(c, dim=0)
    flat = F.pad(x.reshape(1, b * c, h, w), [radius] * 4, mode="reflect")
    flat = F.conv2d(flat, taps[:, None, None, :], groups=b * c)
    flat = F.conv2d(flat, taps[:, None, :, None], groups=b * c)
    return flat.reshape(b, c, h, w)


def _hue(x: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Rotate the HSV hue of a (B, 3, H, W) batch by ``shift`` (turns), keeping S and V.

    Closed-form HSV round trip: with V = max, C = max - min and rotated
    hue h, channel n in (5, 3, 1) for (R, G, B) is V - C * clamp(min(k, 4 - k), 0, 1)
    where k = (n + 6h) mod 6.
    """
    r, g, b = x.unbind(1)
    maxc, minc = x.amax(1), x.amin(1)
    chroma = maxc - minc
    safe = torch.where(chroma > 0, chroma, torch.ones_like(chroma))
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h6 = torch.remainder(h + 6.0 * shift.to(x.dtype)[:, None, None], 6.0)
    channels = []
    for n in (5.0, 3.0, 1.0):
        k = torch.remainder(n + h6, 6.0)
        channels.append(maxc - chroma * torch.minimum(k, 4.0 - k).clamp(0.0, 1.0))
    return torch.stack(channels, dim=1)


def perturb_images(images: torch.Tensor, params: Sequence[PerturbationParams]) -> torch.Tensor:
    """Apply ``params[i]`` to image ``i`` of a ``(B, 3, H, W)`` batch in [0, 1].

    Order: brightness, contrast, saturation, hue, blur, noise. The color ops
    follow the usual blend definitions (clamped after every op); the hue
    shift only touches images with a non-zero shift.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(images.shape)}")
    if len(params) != images.shape[0]:
        raise ValueError(f"{len(params)} parameter sets for {images.shape[0]} images")
    col = lambda name: torch.tensor([getattr(p, name) for p in params], dtype=torch.float64)
    out = _blend(images, torch.zeros_like(images), col("brightness"))
    gray = TF.rgb_to_grayscale(out)
    out = _blend(out, gray.mean(dim=(-3, -2, -1), keepdim=True), col("contrast"))
    out = _blend(out, TF.rgb_to_grayscale(out), col("saturation"))
    shift = col("hue_shift")
    moved = torch.nonzero(shift != 0).flatten()
    if len(moved):
        out = out.index_copy(0, moved, _hue(out[moved], shift[moved]))
    out = _blur(out, [p.blur_sigma for p in params])
    noise = [torch.randn(out.shape[1:], generator=torch.Generator().manual_seed(p.seed)) if p.noise_sigma > 0
             else torch.zeros(out.shape[1:]) for p in params]
    out = out + col("noise_sigma").to(out.dtype)[:, None, None, None] * torch.stack(noise).to(out.dtype)
    return out.clamp(0.0, 1.0)


def perturb_image(image: torch.Tensor, p: PerturbationParams) -> torch.Tensor:
    """Apply ``p`` to a single ``(3, H, W)`` image; identity parameters return ``image`` itself."""
    if p.is_identity():
        return image
    return perturb_images(image[None], [p])[0]


def apply_perturbation(x: LabeledImage, p: PerturbationParams) -> LabeledImage:
    return LabeledImage(perturb_image(x.image, p), x.label, f"aug:{p.seed}")
