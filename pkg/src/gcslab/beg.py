"""Brightness-equalised generation.

Over-exposure is detected on decoded pixel images: each image's brightness
field is summarised by its m-th nearest-rank percentile, and when the batch
maximum exceeds ``t_gs`` every splat colour is scaled by ``t_b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .renderer import SplatScene


@dataclass(frozen=True)
class BegConfig:
    m: float = 85.0
    t_gs: float = 0.9
    t_b: float = 0.8
    enabled: bool = True
    per_splat: bool = False     # ablation: only scale splats whose colour exceeds t_gs

    def __post_init__(self):
        if not 0 < self.m < 100:
            raise ValueError("beg.m must lie in (0, 100)")
        if not 0 < self.t_gs <= 1:
            raise ValueError("beg.t_gs must lie in (0, 1]")
        if not 0 < self.t_b <= 1:
            raise ValueError("beg.t_b must lie in (0, 1]")


@dataclass(frozen=True)
class BrightnessReport:
    percentiles: tuple[float, ...]
    max: float
    triggered: bool


def brightness(image) -> np.ndarray:
    """Per-pixel mean of the three colour channels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 1 or image.shape[-1] != 3:
        raise ValueError(f"brightness needs 3 channels, got shape {image.shape}")
    return image.mean(axis=-1)


def percentile(values, m: float) -> float:
    """Nearest-rank percentile: sorted value at index ⌈m·n/100⌉ − 1."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = v.size
    if n == 0:
        raise ValueError("percentile of empty input")
    if not 0 < m <= 100:
        raise ValueError("m must lie in (0, 100]")
    k = max(math.ceil(m * n / 100.0 - 1e-12) - 1, 0)
    return float(v[k])


def beg_check(batch, cfg: BegConfig = BegConfig()) -> BrightnessReport:
    batch = list(batch)
    if not batch:
        raise ValueError("beg_check needs a non-empty batch")
    ps = tuple(percentile(brightness(img), cfg.m) for img in batch)
    top = max(ps)
    return BrightnessReport(ps, top, top > cfg.t_gs)


def beg_apply(scene: SplatScene, cfg: BegConfig = BegConfig()) -> SplatScene:
    """Scale splat colours by ``t_b``; every other parameter is untouched."""
    if cfg.per_splat:
        # colour brightness proxy: mean of the first three latent channels
        bright = scene.colors[:, :3].mean(axis=1) > cfg.t_gs
        scale = np.where(bright, cfg.t_b, 1.0)[:, None]
        return scene.with_params(colors=scene.colors * scale)
    return scene.with_params(colors=scene.colors * cfg.t_b)
