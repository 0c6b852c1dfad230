"""Sampling of overlapping patch pairs and matched voxel positions.

Each pair holds two independently augmented views of one volume region plus
m voxel positions in their overlap, restricted to the body mask. Matched
positions are the positive pairs of the contrastive objective; everything
else in a batch acts as a negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, apply_augment, draw_augment_spec
from .errors import ConfigError, SamplingError
from .volume import Volume

# cap on uniform redraws of the second origin before falling back to full overlap
_ORIGIN2_TRIES = 200


@dataclass
class PatchSpec:
    extents: tuple[int, int, int] = (32, 32, 16)

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if min(self.extents) < 1:
            raise ConfigError(f"patch extents must be positive, got {self.extents}")

    def validate_for_levels(self, levels: int) -> None:
        divisor = 2 ** (levels - 1)
        for e in self.extents:
            if e % divisor:
                raise ConfigError(
                    f"patch extent {e} not divisible by 2^{levels - 1} for {levels} pyramid levels")


@dataclass
class SamplerConfig:
    positives_per_pair: int = 128
    min_overlap_fraction: float = 0.25
    max_retries: int = 20

    def __post_init__(self):
        if self.positives_per_pair < 1:
            raise ConfigError("positives_per_pair must be >= 1")
        if not 0.0 < self.min_overlap_fraction <= 1.0:
            raise ConfigError("min_overlap_fraction must lie in (0, 1]")


@dataclass
class PatchPair:
    origin_1: tuple[int, int, int]
    origin_2: tuple[int, int, int]
    patch_1: np.ndarray
    patch_2: np.ndarray
    positions: np.ndarray  # [m, 3] world voxel coordinates
    local_1: np.ndarray    # positions - origin_1
    local_2: np.ndarray
    replacement_used: bool = False


@dataclass
class Batch:
    """2n patches stacked [2n, 1, H, W, D] plus N = n*m matched index pairs."""

    patches: np.ndarray
    patch_index_1: np.ndarray
    local_1: np.ndarray
    patch_index_2: np.ndarray
    local_2: np.ndarray

    @property
    def num_pairs(self) -> int:
        return len(self.patch_index_1)


def _origin_ranges_intersecting(bbox_lo, bbox_hi, extents, patch):
    """Per-axis inclusive origin bounds for placements inside the volume that
    intersect the body bounding box."""
    ranges = []
    for axis in range(3):
        lo = max(0, bbox_lo[axis] - patch[axis] + 1)
        hi = min(extents[axis] - patch[axis], bbox_hi[axis])
        ranges.append((lo, hi))
    return ranges


def _overlap_box(o1, o2, patch):
    lo = tuple(max(a, b) for a, b in zip(o1, o2))
    hi = tuple(min(a + p, b + p) for a, b, p in zip(o1, o2, patch))
    return lo, hi


def sample_patch_pair(volume: Volume, mask: np.ndarray, patch_spec: PatchSpec,
                      config: SamplerConfig, augment_config: AugmentConfig,
                      rng: np.random.Generator) -> PatchPair:
    """Draw two overlapping patches and m matched body positions.

    The volume must already be at least patch-sized (pad with air first).
    After max_retries the pair with the most valid voxels is kept and
    positions are drawn with replacement; zero valid voxels anywhere raises.
    """
    patch = patch_spec.extents
    extents = volume.shape
    if any(e < p for e, p in zip(extents, patch)):
        raise SamplingError(f"volume {extents} smaller than patch {patch}; pad it first")
    if mask.shape != volume.shape:
        raise SamplingError("mask shape does not match volume")
    if not mask.any():
        raise SamplingError("no body voxels in volume")

    body_idx = np.nonzero(mask)
    bbox_lo = tuple(int(idx.min()) for idx in body_idx)
    bbox_hi = tuple(int(idx.max()) for idx in body_idx)
    ranges = _origin_ranges_intersecting(bbox_lo, bbox_hi, extents, patch)
    full_ranges = [(0, extents[a] - patch[a]) for a in range(3)]
    min_overlap = config.min_overlap_fraction * float(np.prod(patch))
    m = config.positives_per_pair

    best = None  # (count, o1, o2, flat_candidates, overlap_lo)
    for _ in range(config.max_retries):
        o1 = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in ranges)
        o2 = o1
        for _ in range(_ORIGIN2_TRIES):
            cand = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in full_ranges)
            lo_box, hi_box = _overlap_box(o1, cand, patch)
            vol_overlap = np.prod([max(0, h - l) for l, h in zip(lo_box, hi_box)])
            if vol_overlap >= min_overlap:
                o2 = cand
                break
        lo_box, hi_box = _overlap_box(o1, o2, patch)
        sub = mask[lo_box[0]:hi_box[0], lo_box[1]:hi_box[1], lo_box[2]:hi_box[2]]
        flat = np.flatnonzero(sub)
        if best is None or len(flat) > best[0]:
            best = (len(flat), o1, o2, flat, lo_box, sub.shape)
        if len(flat) >= m:
            break

    count, o1, o2, flat, lo_box, sub_shape = best
    if count == 0:
        raise SamplingError("no body voxels in any sampled overlap")
    replacement = count < m
    chosen = rng.choice(flat, size=m, replace=replacement)
    positions = np.stack(np.unravel_index(chosen, sub_shape), axis=1) + np.asarray(lo_box)

    raw_1 = volume.hu[o1[0]:o1[0] + patch[0], o1[1]:o1[1] + patch[1], o1[2]:o1[2] + patch[2]]
    raw_2 = volume.hu[o2[0]:o2[0] + patch[0], o2[1]:o2[1] + patch[1], o2[2]:o2[2] + patch[2]]
    patch_1 = apply_augment(draw_augment_spec(augment_config, rng), raw_1)
    patch_2 = apply_augment(draw_augment_spec(augment_config, rng), raw_2)

    return PatchPair(
        origin_1=o1, origin_2=o2, patch_1=patch_1, patch_2=patch_2,
        positions=positions.astype(np.int64),
        local_1=(positions - np.asarray(o1)).astype(np.int64),
        local_2=(positions - np.asarray(o2)).astype(np.int64),
        replacement_used=replacement,
    )


def assemble_batch(items, patch_spec: PatchSpec, config: SamplerConfig,
                   augment_config: AugmentConfig, seeds) -> Batch:
    """Stack pairs from n volumes into one batch of 2n patches.

    ``items`` is a sequence of (volume, mask); ``seeds`` gives one rng seed
    per volume so the sampled pairs do not depend on volume order.
    """
    items = list(items)
    if not items:
        raise SamplingError("assemble_batch needs at least one volume")
    if len(seeds) != len(items):
        raise SamplingError("need exactly one seed per volume")
    patches = []
    idx1, loc1, idx2, loc2 = [], [], [], []
    for i, ((volume, mask), seed) in enumerate(zip(items, seeds)):
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        pair = sample_patch_pair(volume, mask, patch_spec, config, augment_config, rng)
        patches.append(pair.patch_1[None])
        patches.append(pair.patch_2[None])
        n = len(pair.positions)
        idx1.append(np.full(n, 2 * i, np.int64))
        idx2.append(np.full(n, 2 * i + 1, np.int64))
        loc1.append(pair.local_1)
        loc2.append(pair.local_2)
    return Batch(
        patches=np.stack(patches, axis=0),
        patch_index_1=np.concatenate(idx1),
        local_1=np.concatenate(loc1),
        patch_index_2=np.concatenate(idx2),
        local_2=np.concatenate(loc2),
    )
