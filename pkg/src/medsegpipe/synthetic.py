"""Synthetic phantoms for demos, tests and the end-to-end benchmark.

Background is 0, a sphere (class 1) has intensity ``contrast`` and, for
three classes, an axis-aligned cuboid (class 2) has ``2 * contrast``.
Gaussian noise with sigma ``noise * contrast`` is added everywhere.
"""

from pathlib import Path

import numpy as np

from .nifti_io import save_nifti
from .volume import ClassMap, Volume


def sphere_mask(shape, center, radius):
    grids = np.indices(shape, dtype=np.float64)
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius**2


def make_phantom(rng, shape=(32, 32, 32), n_classes=2, contrast=1.0, noise=0.1, spacing=None):
    """Return ``(Volume, ClassMap, info)``; ``info`` records the drawn geometry."""
    shape = tuple(shape)
    labels = np.zeros(shape, dtype=np.int64)
    info = {}
    if n_classes == 2:
        radius = rng.uniform(0.2, 0.3) * min(shape)
        center = [rng.uniform(radius + 1, n - radius - 2) for n in shape]
        labels[sphere_mask(shape, center, radius)] = 1
        info.update(center=center, radius=radius)
    elif n_classes == 3:
        if min(shape) < 20:
            raise ValueError("three-class phantoms need every extent >= 20")
        # sphere in the low half of the last axis, cuboid in the high half
        half = shape[-1] // 2
        radius = rng.uniform(0.15, 0.2) * min(shape)
        center = [rng.uniform(radius + 1, n - radius - 2) for n in shape[:-1]]
        center.append(rng.uniform(radius + 1, half - radius - 1))
        labels[sphere_mask(shape, center, radius)] = 1
        lo, hi = [], []
        for axis, n in enumerate(shape):
            start_min = half + 1 if axis == len(shape) - 1 else 1
            side = int(rng.integers(5, max(6, min(10, (n - start_min) - 1))))
            start = int(rng.integers(start_min, max(start_min + 1, n - side - 1)))
            lo.append(start)
            hi.append(start + side)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        labels[box] = 2
        info.update(center=center, radius=radius, box=(tuple(lo), tuple(hi)))
    else:
        raise ValueError("phantoms support 2 or 3 classes")
    image = labels.astype(np.float64) * contrast
    image += rng.normal(0.0, noise * contrast, size=shape)
    spacing = tuple(spacing) if spacing is not None else (1.0,) * len(shape)
    return Volume(image.astype(np.float32), spacing), ClassMap(labels, spacing, n_classes), info


def write_phantom_dataset(directory, count, seed=0, shape=(32, 32, 32), n_classes=2, **kwargs):
    """Write ``count`` phantoms as ``<directory>/case_XXX/{imaging,segmentation}.nii``."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(count):
        image, labels, _ = make_phantom(rng, shape, n_classes, **kwargs)
        sid = f"case_{i:03d}"
        save_nifti(directory / sid / "imaging.nii", image)
        save_nifti(directory / sid / "segmentation.nii", labels)
        ids.append(sid)
    return ids
