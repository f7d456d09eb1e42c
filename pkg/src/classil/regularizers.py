"""Label smoothing, mixup and augmentation policies.

Images are ``[C, H, W]`` float tensors with pixel values in ``[0, 1]``;
colour operations clamp back into that range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

REGULARIZERS = ("none", "sd", "h-aug", "ls", "mixup")


class RegularizerError(ValueError):
    pass


def label_smooth(target: torch.Tensor, epsilon: float) -> torch.Tensor:
    """``(1 - eps) * target + eps / t`` along the last axis."""
    if not 0.0 <= epsilon < 1.0:
        raise RegularizerError(f"epsilon must lie in [0, 1), got {epsilon}")
    t = target.shape[-1]
    if t < 2:
        raise RegularizerError("label smoothing needs at least two classes")
    return (1.0 - epsilon) * target + epsilon / t


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(labels.long(), num_classes).to(dtype)


def mixup(sample_a, sample_b, alpha: float, seed: int | np.random.Generator | None = None, gamma=None):
    """Blend two (input, label-distribution) pairs with ``gamma ~ Beta(alpha, alpha)``.

    Returns ``(x, y, gamma)``. Passing ``gamma`` explicitly skips the draw.
    """
    if alpha <= 0:
        raise RegularizerError(f"mixup alpha must be positive, got {alpha}")
    if gamma is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        gamma = float(rng.beta(alpha, alpha))
    (xa, ya), (xb, yb) = sample_a, sample_b
    if xa.shape != xb.shape:
        raise RegularizerError("mixup inputs differ in shape")
    return gamma * xa + (1 - gamma) * xb, gamma * ya + (1 - gamma) * yb, gamma


def mixup_batch(x: torch.Tensor, y: torch.Tensor, alpha: float, rng: np.random.Generator):
    """Mix a batch with a shuffled copy of itself using one shared coefficient."""
    perm = torch.from_numpy(rng.permutation(len(x)))
    mx, my, _ = mixup((x, y), (x[perm], y[perm]), alpha, rng)
    return mx, my


# --- augmentation ----------------------------------------------------------

GEOMETRIC = ("shear_x", "shear_y", "translate_x", "translate_y", "rotate")
COLOR = ("brightness", "contrast", "saturation", "posterize")
# magnitude ranges: shear (fraction), translate (fraction of width), rotate (degrees),
# brightness/contrast/saturation (relative change), posterize (bits removed)
MAGNITUDE_RANGE = {
    "identity": (0.0, 0.0),
    "shear_x": (0.0, 0.3),
    "shear_y": (0.0, 0.3),
    "translate_x": (0.0, 0.3),
    "translate_y": (0.0, 0.3),
    "rotate": (0.0, 30.0),
    "brightness": (0.0, 0.9),
    "contrast": (0.0, 0.9),
    "saturation": (0.0, 0.9),
    "posterize": (0.0, 4.0),
}


@dataclass(frozen=True)
class AugmentationPolicy:
    ops: tuple[tuple[str, float], ...] = (("identity", 0.0), ("identity", 0.0))
    crop_pad: int = 4
    flip: bool = True
    cutout: int = 0

    def __post_init__(self):
        for name, mag in self.ops:
            if name not in MAGNITUDE_RANGE:
                raise RegularizerError(f"unknown augmentation op {name!r}")
            lo, hi = MAGNITUDE_RANGE[name]
            if not lo <= mag <= hi:
                raise RegularizerError(f"{name} magnitude {mag} outside [{lo}, {hi}]")
        if self.crop_pad < 0 or self.cutout < 0:
            raise RegularizerError("crop padding and cutout size must be non-negative")


def default_policy_pool(cutout: int = 16) -> list[AugmentationPolicy]:
    pairs = [
        (("identity", 0.0), ("identity", 0.0)),
        (("shear_x", 0.2), ("brightness", 0.4)),
        (("shear_y", 0.2), ("contrast", 0.5)),
        (("translate_x", 0.15), ("saturation", 0.6)),
        (("translate_y", 0.15), ("posterize", 3.0)),
        (("rotate", 20.0), ("brightness", 0.3)),
        (("rotate", 10.0), ("contrast", 0.3)),
        (("shear_x", 0.1), ("saturation", 0.3)),
        (("translate_x", 0.1), ("posterize", 2.0)),
        (("shear_y", 0.1), ("brightness", 0.6)),
        (("rotate", 30.0), ("saturation", 0.9)),
        (("translate_y", 0.3), ("contrast", 0.8)),
    ]
    return [AugmentationPolicy(p, cutout=cutout) for p in pairs]


def sample_heavy_augmentation(pool: Sequence[AugmentationPolicy], rng: np.random.Generator) -> AugmentationPolicy:
    if not pool:
        raise RegularizerError("empty augmentation policy pool")
    return pool[int(rng.integers(len(pool)))]


def _affine(img: torch.Tensor, theta: list[list[float]]) -> torch.Tensor:
    grid = F.affine_grid(torch.tensor([theta], dtype=img.dtype), [1, *img.shape], align_corners=False)
    return F.grid_sample(img[None], grid, align_corners=False, padding_mode="zeros")[0]


def _gray(img: torch.Tensor) -> torch.Tensor:
    if img.shape[0] == 3:
        w = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype).view(3, 1, 1)
        return (img * w).sum(0, keepdim=True).expand_as(img)
    return img.mean(0, keepdim=True).expand_as(img)


def apply_op(name: str, magnitude: float, img: torch.Tensor, sign: float = 1.0) -> torch.Tensor:
    m = magnitude * sign
    if name == "identity" or magnitude == 0:
        return img
    if name == "shear_x":
        return _affine(img, [[1, m, 0], [0, 1, 0]])
    if name == "shear_y":
        return _affine(img, [[1, 0, 0], [m, 1, 0]])
    if name == "translate_x":
        return _affine(img, [[1, 0, 2 * m], [0, 1, 0]])
    if name == "translate_y":
        return _affine(img, [[1, 0, 0], [0, 1, 2 * m]])
    if name == "rotate":
        a = math.radians(m)
        return _affine(img, [[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0]])
    if name == "brightness":
        return (img * (1 + m)).clamp(0, 1)
    if name == "contrast":
        mean = _gray(img).mean()
        return (mean + (img - mean) * (1 + m)).clamp(0, 1)
    if name == "saturation":
        g = _gray(img)
        return (g + (img - g) * (1 + m)).clamp(0, 1)
    if name == "posterize":
        levels = 2 ** (8 - int(round(magnitude)))
        return (torch.floor(img.clamp(0, 1) * (levels - 1) + 0.5) / (levels - 1)).clamp(0, 1)
    raise RegularizerError(f"unknown augmentation op {name!r}")


def crop_flip(img: torch.Tensor, pad: int, flip: bool, rng: np.random.Generator) -> torch.Tensor:
    if pad:
        _, h, w = img.shape
        padded = F.pad(img, (pad, pad, pad, pad))
        i, j = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[:, i : i + h, j : j + w]
    if flip and rng.random() < 0.5:
        img = img.flip(-1)
    return img


def cutout(img: torch.Tensor, size: int, rng: np.random.Generator) -> torch.Tensor:
    if size <= 0:
        return img
    _, h, w = img.shape
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = max(cy - size // 2, 0), min(cy + size - size // 2, h)
    x0, x1 = max(cx - size // 2, 0), min(cx + size - size // 2, w)
    img = img.clone()
    img[:, y0:y1, x0:x1] = 0.0
    return img


def apply(policy: AugmentationPolicy, image: torch.Tensor, rng: np.random.Generator | int) -> torch.Tensor:
    """Baseline crop/flip, the policy's op pair, then cutout. Deterministic for a given seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if image.dim() != 3:
        raise RegularizerError(f"augmentation expects [C, H, W] images, got shape {tuple(image.shape)}")
    out = crop_flip(image, policy.crop_pad, policy.flip, rng)
    for name, mag in policy.ops:
        sign = -1.0 if name in GEOMETRIC and rng.random() < 0.5 else 1.0
        out = apply_op(name, mag, out, sign)
    return cutout(out, policy.cutout, rng)


@dataclass
class Augmenter:
    """Per-batch augmentation for one of the pipelines: ``none``, ``crop_flip`` or ``heavy``."""

    kind: str = "crop_flip"
    pad: int = 4
    pool: list[AugmentationPolicy] = field(default_factory=default_policy_pool)

    def __call__(self, x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.kind == "none" or x.dim() != 4:
            return x
        if self.kind == "crop_flip":
            base = AugmentationPolicy(crop_pad=self.pad)
            return torch.stack([apply(base, img, rng) for img in x])
        if self.kind == "heavy":
            return torch.stack([apply(sample_heavy_augmentation(self.pool, rng), img, rng) for img in x])
        raise RegularizerError(f"unknown augmentation pipeline {self.kind!r}")
