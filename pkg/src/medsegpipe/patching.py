"""Patch grids: decomposition of volumes into overlapping patches and merging back.

Along each axis patches start at ``0, stride, 2*stride, ...`` with
``stride = patch - overlap``.  When the last patch would overrun the volume
its origin is pulled back to ``extent - patch`` (extra overlap, no padding).
Only volumes smaller than the patch are zero-padded at the high end.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    GridShapeMismatch,
    InvalidPatchSpec,
    NotThreeDimensional,
    PatchCountMismatch,
    ShapeMismatch,
)
from .volume import ClassMap, Volume


@dataclass(frozen=True)
class PatchGrid:
    patch_shape: tuple
    overlap: tuple
    origins: tuple
    padded_shape: tuple
    original_shape: tuple

    @property
    def stride(self):
        return tuple(p - o for p, o in zip(self.patch_shape, self.overlap))

    @property
    def ndim(self):
        return len(self.patch_shape)

    def __len__(self):
        return len(self.origins)

    def slices(self, origin):
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_shape))


def _axis_origins(extent, patch, stride):
    if extent <= patch:
        return [0]
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] + patch < extent:
        origins.append(extent - patch)
    return origins


def compute_grid(volume_shape, patch_shape, overlap=None):
    volume_shape = tuple(int(n) for n in volume_shape)
    patch_shape = tuple(int(p) for p in patch_shape)
    overlap = tuple(int(o) for o in overlap) if overlap is not None else (0,) * len(patch_shape)
    if not (len(volume_shape) == len(patch_shape) == len(overlap)):
        raise InvalidPatchSpec(
            f"dimension mismatch: volume {volume_shape}, patch {patch_shape}, overlap {overlap}"
        )
    for n, p, o in zip(volume_shape, patch_shape, overlap):
        if n < 1 or not p > o >= 0:
            raise InvalidPatchSpec(
                f"need patch > overlap >= 0 and extent >= 1, got patch {patch_shape}, "
                f"overlap {overlap}, volume {volume_shape}"
            )
    padded = tuple(max(n, p) for n, p in zip(volume_shape, patch_shape))
    per_axis = [
        _axis_origins(n, p, p - o) for n, p, o in zip(volume_shape, patch_shape, overlap)
    ]
    origins = tuple(itertools.product(*per_axis))
    return PatchGrid(patch_shape, overlap, origins, padded, volume_shape)


def _spatial(array, grid):
    """Return ``(array, has_channel_axis)`` after checking the spatial shape."""
    if isinstance(array, (Volume, ClassMap)):
        array = array.data
    array = np.asarray(array)
    if array.ndim == grid.ndim + 1:
        spatial, channels = array.shape[1:], True
    elif array.ndim == grid.ndim:
        spatial, channels = array.shape, False
    else:
        raise GridShapeMismatch(f"array of shape {array.shape} does not fit a {grid.ndim}D grid")
    if tuple(spatial) != grid.original_shape:
        raise GridShapeMismatch(
            f"grid was computed for shape {grid.original_shape}, got {tuple(spatial)}"
        )
    return array, channels


def pad_to(array, shape, channels=False):
    """Zero-pad at the high end of every spatial axis up to ``shape``."""
    spatial = array.shape[1:] if channels else array.shape
    if tuple(spatial) == tuple(shape):
        return array
    pad = [(0, s - n) for n, s in zip(spatial, shape)]
    if channels:
        pad = [(0, 0)] + pad
    return np.pad(array, pad, mode="constant", constant_values=0)


def extract_patches(array, grid):
    """Cut ``array`` (spatial, or channel-first) into patches at the grid origins."""
    array, channels = _spatial(array, grid)
    padded = pad_to(array, grid.padded_shape, channels)
    lead = (slice(None),) if channels else ()
    return [padded[lead + grid.slices(o)] for o in grid.origins]


def is_blank(label_patch):
    """True iff every voxel is background (class 0)."""
    if isinstance(label_patch, ClassMap):
        label_patch = label_patch.data
    return not np.any(label_patch)


def merge_patches(score_patches, grid):
    """Average overlapping channel-first score patches back into one volume.

    Every voxel gets the unweighted mean of all patches covering it; the
    padding region is cropped away.  Sums and counts are kept in float64.
    Where all contributions agree the value is returned as is, so a mean of
    identical values never picks up rounding from the sum.
    """
    if len(score_patches) != len(grid.origins):
        raise PatchCountMismatch(
            f"{len(score_patches)} patches for a grid with {len(grid.origins)} origins"
        )
    if not score_patches:
        raise PatchCountMismatch("no patches to merge")
    n_channels = np.shape(score_patches[0])[0]
    expected = (n_channels,) + grid.patch_shape
    full = (n_channels,) + grid.padded_shape
    total = np.zeros(full, dtype=np.float64)
    lo = np.full(full, np.inf)
    hi = np.full(full, -np.inf)
    count = np.zeros(grid.padded_shape, dtype=np.float64)
    for patch, origin in zip(score_patches, grid.origins):
        if np.shape(patch) != expected:
            raise ShapeMismatch(f"score patch shape {np.shape(patch)}, expected {expected}")
        sl = (slice(None),) + grid.slices(origin)
        total[sl] += patch
        np.minimum(lo[sl], patch, out=lo[sl])
        np.maximum(hi[sl], patch, out=hi[sl])
        count[sl[1:]] += 1.0
    merged = np.where(lo == hi, lo, total / count)
    crop = tuple(slice(0, n) for n in grid.original_shape)
    return merged[(slice(None),) + crop]


def slice_2d(v):
    """Split a 3D Volume/ClassMap/array into 2D slices along the first axis."""
    data = v.data if isinstance(v, (Volume, ClassMap)) else np.asarray(v)
    if data.ndim != 3:
        raise NotThreeDimensional(f"slice_2d needs 3D input, got {data.ndim}D")
    if isinstance(v, Volume):
        return [Volume(data[k], v.spacing[1:]) for k in range(data.shape[0])]
    if isinstance(v, ClassMap):
        return [ClassMap(data[k], v.spacing[1:], v.n_classes) for k in range(data.shape[0])]
    return [data[k] for k in range(data.shape[0])]
