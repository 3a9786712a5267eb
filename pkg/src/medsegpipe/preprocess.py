"""Intensity and geometry normalization, plus one-hot label encoding.

The pipeline order is clip -> resample -> normalize; see
:func:`preprocess_sample`.
"""

import math

import numpy as np

from .errors import DataError, InvalidRange, InvalidSpacing
from .volume import ClassMap, Volume


def zscore_normalize(v):
    """Standardize to zero mean, unit population std (per volume).

    A constant volume (std < 1e-12) maps to all zeros.
    """
    data = np.asarray(v.data, dtype=np.float64)
    if data.size == 0:
        raise DataError("cannot normalize an empty volume")
    mean = data.mean()
    std = data.std()
    if std < 1e-12:
        return v.with_data(np.zeros_like(data))
    return v.with_data((data - mean) / std)


def scale_range(v, lo, hi):
    """Affine map of the value range onto ``[lo, hi]``; constants map to ``lo``."""
    if not lo < hi:
        raise InvalidRange(f"scale range requires lo < hi, got [{lo}, {hi}]")
    data = np.asarray(v.data, dtype=np.float64)
    vmin, vmax = data.min(), data.max()
    if vmax == vmin:
        return v.with_data(np.full_like(data, lo))
    t = (data - vmin) / (vmax - vmin)
    # written so that t == 0 and t == 1 hit lo and hi exactly
    return v.with_data(lo * (1.0 - t) + hi * t)


def clip(v, vmin, vmax):
    if not vmin < vmax:
        raise InvalidRange(f"clip range requires min < max, got [{vmin}, {vmax}]")
    return v.with_data(np.clip(v.data, vmin, vmax))


def round_half_up(x):
    return int(math.floor(x + 0.5))


def resampled_shape(shape, spacing, target_spacing):
    return tuple(
        max(1, round_half_up(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing)
    )


def _source_coords(n_out, n_in, in_spacing, out_spacing):
    # voxel centers aligned: output voxel i covers the same physical point
    # as source coordinate (i + 0.5) * out/in - 0.5, clamped to the edge
    c = (np.arange(n_out, dtype=np.float64) + 0.5) * (out_spacing / in_spacing) - 0.5
    return np.clip(c, 0.0, n_in - 1)


def resample_array(data, spacing, target_spacing, shape=None, mode="linear"):
    """Separable linear / nearest resampling of an array on a regular grid.

    Linear mode along every axis composes to bilinear (2D) or trilinear (3D)
    interpolation.  Sampling outside the source is clamped to the edge.
    """
    if shape is None:
        shape = resampled_shape(data.shape, spacing, target_spacing)
    out = np.asarray(data)
    if mode == "linear":
        out = out.astype(np.float64)
    for axis, (n_out, s, t) in enumerate(zip(shape, spacing, target_spacing)):
        n_in = out.shape[axis]
        if n_out == n_in and s == t:
            continue
        c = _source_coords(n_out, n_in, s, t)
        if mode == "nearest":
            idx = np.minimum(np.floor(c + 0.5).astype(np.intp), n_in - 1)
            out = np.take(out, idx, axis=axis)
        elif mode == "linear":
            lo = np.floor(c).astype(np.intp)
            hi = np.minimum(lo + 1, n_in - 1)
            w = c - lo
            bshape = [1] * out.ndim
            bshape[axis] = n_out
            w = w.reshape(bshape)
            out = np.take(out, lo, axis=axis) * (1.0 - w) + np.take(out, hi, axis=axis) * w
        else:
            raise ValueError(f"unknown interpolation mode '{mode}'")
    return out


def resample(v, target_spacing, mode=None, shape=None):
    """Resample a Volume (linear by default) or ClassMap (nearest) to new spacing.

    ``shape`` forces the output extent (used to undo a resampling exactly);
    otherwise each axis becomes ``max(1, round(n * spacing / target))``.
    """
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != v.ndim or any(not t > 0 for t in target_spacing):
        raise InvalidSpacing(f"invalid target spacing {target_spacing} for {v.ndim}D data")
    if isinstance(v, ClassMap):
        if mode not in (None, "nearest"):
            raise ValueError("label maps can only be resampled in nearest mode")
        out = resample_array(v.data, v.spacing, target_spacing, shape, "nearest")
        return ClassMap(out, target_spacing, v.n_classes)
    out = resample_array(v.data, v.spacing, target_spacing, shape, mode or "linear")
    return Volume(out, target_spacing)


def one_hot_encode(labels, n_classes=None, dtype=np.float32):
    """ClassMap (or integer array) -> ``(n_classes, *spatial)`` indicator array."""
    data = labels.data if isinstance(labels, ClassMap) else np.asarray(labels)
    if n_classes is None:
        n_classes = labels.n_classes if isinstance(labels, ClassMap) else int(data.max()) + 1
    classes = np.arange(n_classes).reshape((n_classes,) + (1,) * data.ndim)
    return (data[np.newaxis] == classes).astype(dtype)


def one_hot_decode(scores, spacing=None):
    """Per-voxel argmax over the channel axis; ties go to the lowest class id."""
    scores = np.asarray(scores)
    if scores.shape[0] < 2:
        raise DataError("score volume needs at least 2 channels")
    labels = np.argmax(scores, axis=0)
    if spacing is None:
        spacing = (1.0,) * labels.ndim
    return ClassMap(labels, spacing, scores.shape[0])


def normalize(v, method, scale_bounds=(0.0, 1.0)):
    if method == "zscore":
        return zscore_normalize(v)
    if method == "scale":
        return scale_range(v, *scale_bounds)
    if method == "none":
        return v
    raise ValueError(f"unknown normalization '{method}'")


def preprocess_image(image, config):
    """clip -> resample -> normalize, as configured."""
    if config.clip_min is not None:
        image = clip(image, config.clip_min, config.clip_max)
    if config.target_spacing is not None:
        image = resample(image, config.target_spacing, "linear")
    return normalize(image, config.normalization, config.scale_bounds)


def preprocess_sample(image, labels, config):
    image = preprocess_image(image, config)
    if labels is not None and config.target_spacing is not None:
        labels = resample(labels, config.target_spacing, "nearest")
    return image, labels
