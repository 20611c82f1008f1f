"""Patch-masked cross-sample mixing that doubles a training batch.

For sample ``i`` of a batch of ``B`` the partner is ``B - 1 - i`` (the batch
reversed). The partner is passed through random base transforms, a
patch-aligned Bernoulli mask is drawn, and the augmented image is::

    out = I_i + lam * (T(I_partner) - I_i) * mask

which is evaluated as ``(1 - lam*mask) * I_i + lam*mask * T(I_partner)`` so
the ``lam*mask == 0`` and ``lam*mask == 1`` cases are bit-exact.
Labels of augmented samples are copied from ``I_i``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .backbone import ConfigError

logger = logging.getLogger(__name__)

TRANSFORMS = ("crop", "rotate90", "rotate", "color")


@dataclass
class AugmentConfig:
    enabled: bool = True
    patch_size: int | None = None  # None -> model patch size
    lambda_max: float = 0.5
    p_max: float = 0.5
    transforms: list[str] = field(default_factory=lambda: ["crop", "rotate90", "color"])
    crop_scale: tuple[float, float] = (0.6, 1.0)
    max_angle: float = 15.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise ConfigError(f"unknown transforms {sorted(unknown)}; valid: {list(TRANSFORMS)}")
        for name in ("lambda_max", "p_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")


class AugmentedBatch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor


def schedule_at(epoch: int, total_epochs: int, config: AugmentConfig) -> tuple[float, float]:
    """Linear ramps from 0 at epoch 0 to (lambda_max, p_max) at ``total_epochs``."""
    if total_epochs <= 0:
        return config.lambda_max, config.p_max
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return config.lambda_max * frac, config.p_max * frac


def make_mask(height: int, width: int, p: float, patch_size: int,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Binary [H, W] mask whose patch_size x patch_size cells are on with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must lie in [0, 1], got {p}")
    if height % patch_size or width % patch_size:
        raise ConfigError(f"patch size {patch_size} must divide image size {height}x{width}")
    cells = (torch.rand(height // patch_size, width // patch_size, generator=generator) < p)
    cells = cells.to(torch.float32)
    return cells.repeat_interleave(patch_size, 0).repeat_interleave(patch_size, 1)


def _uniform(generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=generator).item()


def _random_crop_resize(img: torch.Tensor, scale: tuple[float, float], generator) -> torch.Tensor:
    _, h, w = img.shape
    s = math.sqrt(_uniform(generator, *scale))
    ch, cw = max(1, round(h * s)), max(1, round(w * s))
    top = int(torch.randint(0, h - ch + 1, (), generator=generator))
    left = int(torch.randint(0, w - cw + 1, (), generator=generator))
    crop = img[:, top:top + ch, left:left + cw]
    if (ch, cw) == (h, w):
        return crop.clone()
    return F.interpolate(crop[None], size=(h, w), mode="bilinear", align_corners=False)[0]


def _rotate(img: torch.Tensor, degrees: float) -> torch.Tensor:
    # reflection padding keeps every output pixel inside the input's value range
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    mat = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=img.dtype)[None]
    grid = F.affine_grid(mat, [1, *img.shape], align_corners=False)
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="reflection",
                         align_corners=False)[0]


def _color_jitter(img: torch.Tensor, config: AugmentConfig, generator) -> torch.Tensor:
    b = _uniform(generator, 1 - config.brightness, 1 + config.brightness)
    c = _uniform(generator, 1 - config.contrast, 1 + config.contrast)
    s = _uniform(generator, 1 - config.saturation, 1 + config.saturation)
    out = (img * b).clamp(0.0, 1.0)
    out = (out.mean() + c * (out - out.mean())).clamp(0.0, 1.0)
    if out.shape[0] == 3:
        gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
        out = (gray + s * (out - gray)).clamp(0.0, 1.0)
    return out


def base_transform(image: torch.Tensor, config: AugmentConfig,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Random crop-resize, rotation and color jitter of one [C, H, W] image in [0, 1]."""
    out = image
    enabled = set(config.transforms)
    if "crop" in enabled:
        out = _random_crop_resize(out, config.crop_scale, generator)
    if "rotate90" in enabled:
        k = int(torch.randint(0, 4, (), generator=generator))
        out = torch.rot90(out, k, dims=(1, 2))
    if "rotate" in enabled and config.max_angle > 0:
        out = _rotate(out, _uniform(generator, -config.max_angle, config.max_angle))
    if "color" in enabled:
        out = _color_jitter(out, config, generator)
    return out if out is not image else image.clone()


def mix_augment(images: torch.Tensor, labels: torch.Tensor, lam: float, p: float,
                config: AugmentConfig, generator: torch.Generator | None = None,
                patch_size: int | None = None) -> AugmentedBatch:
    """Append one mixed copy of every sample; returns a batch of 2B."""
    b = images.shape[0]
    if b < 2:
        logger.warning("batch of %d is too small to augment; skipping", b)
        return AugmentedBatch(images, labels)
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"mixing ratio must lie in [0, 1], got {lam}")
    ps = patch_size or config.patch_size
    if ps is None:
        raise ConfigError("mask patch size is not set")
    _, _, h, w = images.shape
    mixed = []
    for i in range(b):
        partner = images[b - 1 - i]
        transformed = base_transform(partner, config, generator)
        weight = lam * make_mask(h, w, p, ps, generator).to(images.dtype)
        mixed.append((1 - weight) * images[i] + weight * transformed)
    return AugmentedBatch(torch.cat([images, torch.stack(mixed)]), torch.cat([labels, labels]))
