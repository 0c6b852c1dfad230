"""Volumes in Hounsfield units: binary file formats, body-mask extraction,
cropping and spacing resampling.

File layouts (little-endian, x-fastest element order, index = x + dx*(y + dy*z)):

  RVOL1: magic "RVOL1\\0\\0\\0" | 3 x u32 extents | 3 x f32 spacing mm | f32 intensities
  RSEG1: magic "RSEG1\\0\\0\\0" | 3 x u32 extents | u16 class labels (0 = background)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError

VOLUME_MAGIC = b"RVOL1\x00\x00\x00"
LABELS_MAGIC = b"RSEG1\x00\x00\x00"

# faces only: voxels sharing an edge or corner are not connected
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


@dataclass
class Volume:
    """3D scalar grid in Hounsfield units with physical voxel spacing in mm."""

    hu: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.hu = np.asarray(self.hu, dtype=np.float32)
        if self.hu.ndim != 3 or min(self.hu.shape) < 1:
            raise ContractError(f"volume needs 3 axes with extents >= 1, got {self.hu.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0 or not all(np.isfinite(self.spacing)):
            raise ContractError(f"spacing must be three positive finite values, got {self.spacing}")

    @property
    def shape(self):
        return self.hu.shape


@dataclass
class PreprocessConfig:
    body_threshold_hu: float = -500.0
    target_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    air_fill_hu: float = -1000.0

    def __post_init__(self):
        if min(self.target_spacing_mm) <= 0:
            raise ContractError("target spacing must be positive")


def write_volume(path, volume: Volume) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<3I", *volume.hu.shape))
        f.write(struct.pack("<3f", *volume.spacing))
        f.write(volume.hu.tobytes(order="F"))


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:8] != VOLUME_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)
    if len(raw) < 8 + 12 + 12:
        raise FormatError(f"truncated header in {path}", offset=len(raw))
    dx, dy, dz = struct.unpack_from("<3I", raw, 8)
    spacing = struct.unpack_from("<3f", raw, 20)
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise FormatError(f"non-finite or non-positive spacing {spacing} in {path}", offset=20)
    expected = dx * dy * dz * 4
    payload = raw[32:]
    if len(payload) != expected:
        raise FormatError(
            f"payload holds {len(payload)} bytes, header declares {expected} in {path}", offset=32)
    hu = np.frombuffer(payload, dtype="<f4").reshape((dx, dy, dz), order="F")
    return Volume(np.ascontiguousarray(hu), spacing)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ContractError("labels must be a 3D grid")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ContractError("labels must fit in u16")
    with open(path, "wb") as f:
        f.write(LABELS_MAGIC)
        f.write(struct.pack("<3I", *labels.shape))
        f.write(labels.astype("<u2").tobytes(order="F"))


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != LABELS_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)
    if len(raw) < 20:
        raise FormatError(f"truncated header in {path}", offset=len(raw))
    dx, dy, dz = struct.unpack_from("<3I", raw, 8)
    payload = raw[20:]
    expected = dx * dy * dz * 2
    if len(payload) != expected:
        raise FormatError(
            f"payload holds {len(payload)} bytes, header declares {expected} in {path}", offset=20)
    labels = np.frombuffer(payload, dtype="<u2").reshape((dx, dy, dz), order="F")
    return np.ascontiguousarray(labels).astype(np.uint16)


def compute_body_mask(volume: Volume, config: PreprocessConfig | None = None) -> np.ndarray:
    """Boolean grid, True = body. Background is the union of face-connected
    components of {hu < threshold} that touch a corner voxel below threshold."""
    config = config or PreprocessConfig()
    candidates = volume.hu < config.body_threshold_hu
    body = np.ones(volume.shape, dtype=bool)
    if not candidates.any():
        return body
    components, _ = ndimage.label(candidates, structure=FACE_CONNECTIVITY)
    dx, dy, dz = volume.shape
    corner_labels = set()
    for cx in (0, dx - 1):
        for cy in (0, dy - 1):
            for cz in (0, dz - 1):
                lab = components[cx, cy, cz]
                if lab != 0:
                    corner_labels.add(int(lab))
    if corner_labels:
        body &= ~np.isin(components, sorted(corner_labels))
    return body


def crop_to_body(volume: Volume, config: PreprocessConfig | None = None) -> Volume:
    """Tight bounding box of voxels with intensity above the body threshold."""
    config = config or PreprocessConfig()
    above = volume.hu > config.body_threshold_hu
    if not above.any():
        raise ContractError("empty body: no voxel above the threshold")
    slices = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.where(above.any(axis=other))[0]
        slices.append(slice(int(hits[0]), int(hits[-1]) + 1))
    return Volume(volume.hu[tuple(slices)].copy(), volume.spacing)


def _interp_axis(data: np.ndarray, axis: int, scale: float, new_extent: int) -> np.ndarray:
    """Linear interpolation along one axis at positions i*scale, clamped to the edge."""
    extent = data.shape[axis]
    pos = np.arange(new_extent) * scale
    pos = np.clip(pos, 0.0, extent - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, extent - 1)
    frac = (pos - lo).astype(data.dtype)
    moved = np.moveaxis(data, axis, 0)
    shape = (new_extent,) + (1,) * (moved.ndim - 1)
    out = moved[lo] * (1.0 - frac.reshape(shape)) + moved[hi] * frac.reshape(shape)
    return np.moveaxis(out, 0, axis)


def resample_volume(volume: Volume, target_spacing) -> Volume:
    """Trilinear resample to the target spacing.

    New extent per axis is max(1, round(extent * spacing / target)); sample
    i maps to source coordinate i * target / spacing, clamped to the edge.
    """
    target = tuple(float(s) for s in target_spacing)
    if min(target) <= 0:
        raise ContractError("target spacing must be positive")
    data = volume.hu.astype(np.float32)
    for axis in range(3):
        if target[axis] == volume.spacing[axis]:
            continue
        new_extent = max(1, round(volume.shape[axis] * volume.spacing[axis] / target[axis]))
        data = _interp_axis(data, axis, target[axis] / volume.spacing[axis], new_extent)
    return Volume(data, target)


def resample_labels(labels: np.ndarray, spacing, target_spacing) -> np.ndarray:
    """Nearest-neighbor resample for class grids, same geometry as resample_volume."""
    target = tuple(float(s) for s in target_spacing)
    out = labels
    for axis in range(3):
        if target[axis] == spacing[axis]:
            continue
        new_extent = max(1, round(labels.shape[axis] * spacing[axis] / target[axis]))
        pos = np.arange(new_extent) * (target[axis] / spacing[axis])
        idx = np.clip(np.rint(pos).astype(np.int64), 0, out.shape[axis] - 1)
        out = np.take(out, idx, axis=axis)
    return out


def pad_to_shape(volume: Volume, min_shape, fill_hu: float = -1000.0) -> tuple[Volume, tuple[int, int, int]]:
    """Pad with air, centered, so every extent reaches min_shape.

    Returns the padded volume and the per-axis lower offsets of the original
    data inside it (all zeros when nothing was padded).
    """
    pads = []
    offsets = []
    for axis in range(3):
        missing = max(0, int(min_shape[axis]) - volume.shape[axis])
        lo = missing // 2
        pads.append((lo, missing - lo))
        offsets.append(lo)
    if not any(lo + hi for lo, hi in pads):
        return volume, (0, 0, 0)
    hu = np.pad(volume.hu, pads, constant_values=np.float32(fill_hu))
    return Volume(hu, volume.spacing), tuple(offsets)
