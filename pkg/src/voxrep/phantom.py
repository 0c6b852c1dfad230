"""Deterministic CT-like phantom volumes with organ labels.

A phantom is a soft-tissue body ellipsoid (about 0 HU) in air (-1000 HU)
with labeled organ ellipsoids placed inside it. Randomness comes from
numpy's PCG64 generator, which is seed-stable across platforms; noise draws
are clipped to three sigmas so intensity invariants hold by construction
(organ voxels always stay above the -500 HU body threshold).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError
from .volume import Volume, write_labels, write_volume

BODY_THRESHOLD_HU = -500.0
AIR_HU = -1000.0
SOFT_TISSUE_HU = 0.0


@dataclass
class OrganClass:
    """One label class: ellipsoids with a count range, size range in mm,
    mean intensity and noise, and a fractional placement box for centers."""

    name: str
    count_range: tuple[int, int]
    semi_axes_mm: tuple[float, float]
    mean_hu: float
    noise_sigma_hu: float = 15.0
    placement_region: tuple[tuple[float, float], ...] = (
        (0.15, 0.85), (0.15, 0.85), (0.15, 0.85))

    def validate(self, texture_sigma: float) -> None:
        lo, hi = self.semi_axes_mm
        if lo <= 0 or hi < lo:
            raise ConfigError(f"organ {self.name}: bad semi-axis range {self.semi_axes_mm}")
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ConfigError(f"organ {self.name}: bad count range {self.count_range}")
        worst = self.mean_hu - 3.0 * self.noise_sigma_hu - 3.0 * texture_sigma
        if worst <= BODY_THRESHOLD_HU:
            raise ConfigError(
                f"organ {self.name}: mean {self.mean_hu} HU with noise can cross the "
                f"{BODY_THRESHOLD_HU} HU body threshold")


def default_organ_classes() -> list[OrganClass]:
    return [
        OrganClass("large_bright", (1, 1), (9.0, 14.0), 300.0, 20.0,
                   ((0.25, 0.75), (0.25, 0.75), (0.2, 0.8))),
        OrganClass("medium_mid", (1, 2), (5.0, 8.0), 80.0, 20.0),
        OrganClass("small_darkish", (2, 3), (2.5, 4.5), -260.0, 20.0),
    ]


@dataclass
class PhantomSpec:
    extents: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    body_axes_fraction: tuple[float, float, float] = (0.88, 0.82, 0.94)
    organ_classes: list[OrganClass] = field(default_factory=default_organ_classes)
    texture_noise_hu: float = 25.0
    max_retries: int = 60

    def __post_init__(self):
        if min(self.extents) < 4:
            raise ConfigError("phantom extents must be at least 4 voxels per axis")
        if min(self.spacing) <= 0:
            raise ConfigError("spacing must be positive")
        if not (0 < min(self.body_axes_fraction) and max(self.body_axes_fraction) < 1):
            raise ConfigError("body axes fractions must lie in (0, 1)")
        if AIR_HU + 3.0 * self.texture_noise_hu >= BODY_THRESHOLD_HU:
            raise ConfigError("texture noise large enough to lift air above the body threshold")
        for organ in self.organ_classes:
            organ.validate(self.texture_noise_hu)

    @property
    def num_classes(self) -> int:
        """Label classes including background 0."""
        return len(self.organ_classes) + 1


@dataclass
class LabeledVolume:
    volume: Volume
    labels: np.ndarray


def _clipped_normal(rng, sigma: float, shape) -> np.ndarray:
    if sigma == 0:
        return np.zeros(shape, np.float32)
    draw = rng.standard_normal(shape).astype(np.float32)
    return np.clip(draw, -3.0, 3.0) * np.float32(sigma)


def _ellipsoid_mask(extents, spacing, center_mm, semi_axes_mm) -> np.ndarray:
    coords = [np.arange(extents[a], dtype=np.float32) * spacing[a] for a in range(3)]
    dx = (coords[0] - center_mm[0]) / semi_axes_mm[0]
    dy = (coords[1] - center_mm[1]) / semi_axes_mm[1]
    dz = (coords[2] - center_mm[2]) / semi_axes_mm[2]
    return (dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2) <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> LabeledVolume:
    """Deterministic phantom for (spec, seed); raises GenerationError when an
    organ cannot be placed without overlap after the retry budget."""
    rng = np.random.Generator(np.random.PCG64(seed))
    extents = spec.extents
    spacing = spec.spacing
    size_mm = tuple(extents[a] * spacing[a] for a in range(3))
    center = tuple(0.5 * s for s in size_mm)
    body_axes = tuple(spec.body_axes_fraction[a] * 0.5 * size_mm[a] for a in range(3))
    body = _ellipsoid_mask(extents, spacing, center, body_axes)

    hu = np.full(extents, AIR_HU, np.float32)
    hu[body] = SOFT_TISSUE_HU
    labels = np.zeros(extents, np.uint16)

    for class_id, organ in enumerate(spec.organ_classes, start=1):
        count = int(rng.integers(organ.count_range[0], organ.count_range[1] + 1))
        for _ in range(count):
            placed = False
            for _ in range(spec.max_retries):
                lo_hi = organ.placement_region
                c = tuple(rng.uniform(lo_hi[a][0], lo_hi[a][1]) * size_mm[a] for a in range(3))
                axes = tuple(rng.uniform(*organ.semi_axes_mm) for _ in range(3))
                mask = _ellipsoid_mask(extents, spacing, c, axes)
                if not mask.any():
                    continue
                if not body[mask].all():  # must sit fully inside the body
                    continue
                if (labels[mask] != 0).any():  # no overlap with other organs
                    continue
                noise = _clipped_normal(rng, organ.noise_sigma_hu, int(mask.sum()))
                hu[mask] = np.float32(organ.mean_hu) + noise
                labels[mask] = class_id
                placed = True
                break
            if not placed:
                raise GenerationError(
                    f"could not place organ of class '{organ.name}' after {spec.max_retries} retries")

    hu += _clipped_normal(rng, spec.texture_noise_hu, extents)
    return LabeledVolume(Volume(hu, spacing), labels)


def derive_volume_seed(master_seed: int, index: int) -> int:
    """Stable per-volume seed from (master seed, index)."""
    words = np.random.SeedSequence((int(master_seed), int(index))).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def generate_dataset(spec: PhantomSpec, count: int, seed: int, out_dir) -> Path:
    """Write count RVOL1+RSEG1 pairs plus a JSONL manifest; returns the
    manifest path. Paths in the manifest are relative to its directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    records = []
    for index in range(count):
        volume_seed = derive_volume_seed(seed, index)
        labeled = generate_phantom(spec, volume_seed)
        volume_name = f"phantom_{index:04d}.rvol"
        labels_name = f"phantom_{index:04d}.rseg"
        write_volume(out_dir / volume_name, labeled.volume)
        write_labels(out_dir / labels_name, labeled.labels)
        records.append({"volume_path": volume_name, "labels_path": labels_name,
                        "seed": volume_seed})
    with open(manifest_path, "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return manifest_path


def read_manifest(path) -> list[dict]:
    path = Path(path)
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    base = path.parent
    for record in records:
        record["volume_path"] = str(base / record["volume_path"])
        record["labels_path"] = str(base / record["labels_path"])
    return records
