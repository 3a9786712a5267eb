"""In-memory image containers shared by every pipeline stage.

Arrays are stored with axes ordered slowest to fastest as ``(z, y, x)``
(``(y, x)`` for 2D images); ``spacing`` follows the same order, in mm.
Per-class score volumes are plain arrays shaped ``(n_classes, *spatial)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeMismatch


def _check_geometry(data, spacing):
    if data.ndim not in (2, 3):
        raise DataError(f"expected a 2D or 3D array, got {data.ndim}D")
    if len(spacing) != data.ndim:
        raise DataError(f"spacing {spacing} does not match {data.ndim}D data")
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise DataError(f"voxel spacing must be positive, got {spacing}")


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image with per-axis voxel spacing."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        _check_geometry(self.data, self.spacing)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def with_data(self, data, spacing=None):
        return Volume(data, self.spacing if spacing is None else spacing)


@dataclass(frozen=True, eq=False)
class ClassMap:
    """Integer label volume; class 0 is background."""

    data: np.ndarray
    spacing: tuple
    n_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            rounded = np.rint(data)
            if not np.array_equal(rounded, data):
                raise DataError("label volume contains non-integer values")
            data = rounded
        data = data.astype(np.int64, copy=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "n_classes", int(self.n_classes))
        _check_geometry(self.data, self.spacing)
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if data.size and (data.min() < 0 or data.max() >= self.n_classes):
            raise DataError(
                f"class ids must lie in [0, {self.n_classes}), "
                f"found range [{data.min()}, {data.max()}]"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @classmethod
    def from_volume(cls, volume, n_classes):
        return cls(volume.data, volume.spacing, n_classes)

    def with_data(self, data, spacing=None):
        return ClassMap(data, self.spacing if spacing is None else spacing, self.n_classes)


def check_same_shape(a, b, what="arrays"):
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb:
        raise ShapeMismatch(f"{what} differ in shape: {sa} vs {sb}")
