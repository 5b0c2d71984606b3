"""Corruption domains for robustness reports.

Each corruption derives a val image from a clean source-style scene. Domain
ids read ``c-<group>-<name>``; the report averages mIoU per group.
"""

from __future__ import annotations

import io

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

from .perturb import _blur
from .scenegen import IGNORE, LabeledImage, stable_seed

GROUPS = ("Blur", "Noise", "Digital", "Weather", "Elastic")


def _smooth_field(seed: int, channels: int, h: int, w: int, cells: int = 4) -> torch.Tensor:
    """Low-frequency random field (channels, h, w) in roughly [-1, 1]."""
    gen = torch.Generator().manual_seed(seed)
    coarse = torch.rand(1, channels, cells, cells, generator=gen, dtype=torch.float64) * 2 - 1
    return F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)[0].clamp(-1, 1)


def gaussian_blur(item: LabeledImage, index: int, sigma: float = 2.0) -> LabeledImage:
    return LabeledImage(_blur(item.image[None], [sigma])[0], item.label, item.domain_id)


def gaussian_noise(item: LabeledImage, index: int, sigma: float = 0.12) -> LabeledImage:
    gen = torch.Generator().manual_seed(stable_seed("corrupt-noise", index))
    noise = torch.randn(item.image.shape, generator=gen)
    return LabeledImage((item.image + sigma * noise).clamp(0, 1), item.label, item.domain_id)


def jpeg(item: LabeledImage, index: int, quality: int = 8) -> LabeledImage:
    arr = (item.image.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return LabeledImage(torch.from_numpy(out).permute(2, 0, 1).contiguous(), item.label, item.domain_id)


def fog(item: LabeledImage, index: int, density: float = 0.5) -> LabeledImage:
    _, h, w = item.image.shape
    haze = 0.8 + 0.2 * _smooth_field(stable_seed("corrupt-fog", index), 1, h, w).to(item.image.dtype)
    alpha = density * (0.75 + 0.25 * _smooth_field(stable_seed("corrupt-fog-a", index), 1, h, w)).to(item.image.dtype)
    return LabeledImage(((1 - alpha) * item.image + alpha * haze).clamp(0, 1), item.label, item.domain_id)


def elastic(item: LabeledImage, index: int, pixels: float = 3.0) -> LabeledImage:
    """Smooth displacement applied to image (bilinear) and label (nearest); uncovered label pixels become IGNORE."""
    _, h, w = item.image.shape
    field = _smooth_field(stable_seed("corrupt-elastic", index), 2, h, w).permute(1, 2, 0)[None]
    # normalized coordinates span 2 over the image side
    disp = (field * torch.tensor([2 * pixels / w, 2 * pixels / h], dtype=field.dtype)).to(torch.float32)
    image = TF.elastic_transform(item.image, disp, TF.InterpolationMode.BILINEAR)
    label = TF.elastic_transform(item.label[None].to(torch.float32), disp, TF.InterpolationMode.NEAREST,
                                 fill=[float(IGNORE)])
    return LabeledImage(image.clamp(0, 1), label[0].round().to(item.label.dtype), item.domain_id)


CORRUPTIONS = {
    "c-blur-gaussian": gaussian_blur,
    "c-noise-gaussian": gaussian_noise,
    "c-digital-jpeg": jpeg,
    "c-weather-fog": fog,
    "c-elastic-warp": elastic,
}


def corruption_group(domain_id: str) -> str | None:
    """Report group of a corruption domain id, None for other domains."""
    parts = domain_id.split("-")
    if len(parts) < 3 or parts[0] != "c":
        return None
    group = parts[1].capitalize()
    return group if group in GROUPS else None


def corruption_domains() -> list[tuple[str, callable]]:
    """``(domain_id, fn)`` pairs in the form ``generate_dataset(extra_val=...)`` expects."""
    return list(CORRUPTIONS.items())
