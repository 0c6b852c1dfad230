"""Intensity augmentations for sampled patches: optional axial blur or
sharpen (mutually exclusive), additive Gaussian noise in HU, then a random
Hounsfield window mapped to (0, 1) with clipping.

The random draw lives in ``draw_augment_spec``; ``apply_augment`` is pure
given the spec (voxel noise derives from a seed stored in the spec). Order
is smooth, then noise, then window: the noise scale is in HU, so it has to
act before intensities leave the HU scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError


@dataclass
class AugmentConfig:
    blur_sigma_range: tuple[float, float] = (0.25, 1.5)
    sharpen_sigma1_range: tuple[float, float] = (0.5, 1.0)
    sharpen_sigma2: float = 0.5
    sharpen_alpha_range: tuple[float, float] = (10.0, 30.0)
    smooth_prob: float = 0.5
    noise_prob: float = 0.5
    noise_std_range: tuple[float, float] = (0.0, 30.0)
    window_fixed_prob: float = 0.2
    window_fixed: tuple[float, float] = (-1350.0, 1000.0)
    window_min_range: tuple[float, float] = (-1350.0, -1000.0)
    window_max_range: tuple[float, float] = (300.0, 1000.0)

    def __post_init__(self):
        for name in ("blur_sigma_range", "sharpen_sigma1_range", "sharpen_alpha_range",
                     "noise_std_range", "window_min_range", "window_max_range",
                     "window_fixed"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("blur_sigma_range", "sharpen_sigma1_range", "sharpen_alpha_range",
                     "noise_std_range", "window_min_range", "window_max_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} is degenerate: {(lo, hi)}")
        for name in ("smooth_prob", "noise_prob", "window_fixed_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.window_fixed[0] >= self.window_fixed[1]:
            raise ConfigError("fixed window must have a_min < a_max")


@dataclass
class AugmentSpec:
    """One concrete draw. smooth_sigmas holds (sigma_x, sigma_y) for blur,
    (sigma1_x, sigma1_y) for sharpen, and is unused for 'none'."""

    smooth_kind: str = "none"
    smooth_sigmas: tuple[float, float] = (0.0, 0.0)
    sharpen_sigma2: float = 0.5
    sharpen_alpha: float = 0.0
    noise_std: float = 0.0
    window: tuple[float, float] = (-1350.0, 1000.0)
    noise_seed: int = 0

    def __post_init__(self):
        if self.smooth_kind not in ("none", "blur", "sharpen"):
            raise ConfigError(f"unknown smooth kind {self.smooth_kind!r}")
        if self.window[0] >= self.window[1]:
            raise ConfigError(f"window must have a_min < a_max, got {self.window}")


def draw_augment_spec(config: AugmentConfig, rng: np.random.Generator) -> AugmentSpec:
    """Sample one augmentation: no smoothing with probability smooth_prob,
    otherwise blur or sharpen equally likely; independent noise and window draws."""
    u = rng.random()
    if u < config.smooth_prob:
        kind, sigmas, alpha = "none", (0.0, 0.0), 0.0
    elif u < config.smooth_prob + 0.5 * (1.0 - config.smooth_prob):
        kind = "blur"
        sigmas = (rng.uniform(*config.blur_sigma_range), rng.uniform(*config.blur_sigma_range))
        alpha = 0.0
    else:
        kind = "sharpen"
        sigmas = (rng.uniform(*config.sharpen_sigma1_range),
                  rng.uniform(*config.sharpen_sigma1_range))
        alpha = rng.uniform(*config.sharpen_alpha_range)

    noise_std = 0.0
    if rng.random() < config.noise_prob:
        noise_std = rng.uniform(*config.noise_std_range)

    if rng.random() < config.window_fixed_prob:
        window = config.window_fixed
    else:
        window = (rng.uniform(*config.window_min_range), rng.uniform(*config.window_max_range))

    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    return AugmentSpec(smooth_kind=kind, smooth_sigmas=sigmas,
                       sharpen_sigma2=config.sharpen_sigma2, sharpen_alpha=alpha,
                       noise_std=noise_std, window=window, noise_seed=noise_seed)


def _axial_blur(patch: np.ndarray, sigma_x: float, sigma_y: float) -> np.ndarray:
    """Truncated Gaussian (radius ceil(3 sigma)), edge-clamped, per axial slice."""
    out = patch
    for axis, sigma in ((0, sigma_x), (1, sigma_y)):
        if sigma > 0:
            out = gaussian_filter1d(out, sigma, axis=axis, mode="nearest",
                                    radius=int(math.ceil(3.0 * sigma)))
    return out


def apply_augment(spec: AugmentSpec, patch: np.ndarray) -> np.ndarray:
    """HU grid in, (0, 1) grid of the same shape out."""
    out = np.asarray(patch, dtype=np.float32)
    if spec.smooth_kind == "blur":
        out = _axial_blur(out, *spec.smooth_sigmas)
    elif spec.smooth_kind == "sharpen":
        b1 = _axial_blur(out, *spec.smooth_sigmas)
        b2 = _axial_blur(b1, spec.sharpen_sigma2, spec.sharpen_sigma2)
        out = b1 + np.float32(spec.sharpen_alpha) * (b1 - b2)
    if spec.noise_std > 0:
        noise_rng = np.random.Generator(np.random.PCG64(spec.noise_seed))
        out = out + noise_rng.standard_normal(out.shape).astype(np.float32) * np.float32(spec.noise_std)
    a_min, a_max = spec.window
    out = np.clip(out, a_min, a_max)
    out = (out - np.float32(a_min)) / np.float32(a_max - a_min)
    # float32 rounding can overshoot the upper bound by one ulp
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def evaluation_window(patch: np.ndarray, window=(-1350.0, 1000.0)) -> np.ndarray:
    """The fixed clip-and-rescale map used for probing, fine-tuning and
    evaluation inputs (no randomness)."""
    return apply_augment(AugmentSpec(window=tuple(window)), patch)
