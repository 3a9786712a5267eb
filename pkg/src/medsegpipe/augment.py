"""Seeded data augmentation for training patches.

Spatial transforms (mirror, rotate, scale, elastic) are applied jointly to
image and labels: the image is sampled with linear interpolation and edge
clamping, labels with nearest neighbour and background outside the volume.
Intensity transforms only touch the image.

Randomness always comes from an explicit ``numpy.random.Generator``; use
:func:`item_rng` to derive an independent stream per (epoch, sample, patch).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .patching import is_blank, pad_to

CROP_TRIES = 10
# Gaussian kernels are truncated at 3 sigma
SMOOTH_TRUNCATE = 3.0


def item_rng(seed, *keys):
    """Generator for the sub-stream identified by ``(seed, *keys)``.

    The stream depends only on the key tuple, never on which thread asks or
    in which order, so parallel workers reproduce serial results.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class AugmentConfig:
    mirror: bool = True
    rotate: bool = True
    scale: bool = True
    elastic: bool = True
    brightness: bool = True
    contrast: bool = True
    gamma: bool = True
    noise: bool = True
    mirror_axes: tuple = (True, True, True)
    rotation_deg: tuple = (-15.0, 15.0)
    scale_factor: tuple = (0.85, 1.25)
    elastic_alpha: tuple = (0.0, 10.0)
    elastic_sigma: float = 4.0
    brightness_shift: tuple = (-0.1, 0.1)  # in units of the image std
    contrast_factor: tuple = (0.75, 1.25)
    gamma_range: tuple = (0.7, 1.5)
    noise_sigma: tuple = (0.0, 0.05)  # in units of the image std
    p_mirror: float = 0.15
    p_rotate: float = 0.15
    p_scale: float = 0.15
    p_elastic: float = 0.15
    p_brightness: float = 0.15
    p_contrast: float = 0.15
    p_gamma: float = 0.15
    p_noise: float = 0.15

    def __post_init__(self):
        for name in (
            "rotation_deg",
            "scale_factor",
            "elastic_alpha",
            "brightness_shift",
            "contrast_factor",
            "gamma_range",
            "noise_sigma",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(name, f"range is not ordered: ({lo}, {hi})")
        for name in self.__dataclass_fields__:
            if name.startswith("p_"):
                p = getattr(self, name)
                if not 0.0 <= p <= 1.0:
                    raise ValidationError(name, f"probability {p} outside [0, 1]")
        if self.gamma_range[0] <= 0:
            raise ValidationError("gamma_range", "gamma must be positive")
        if self.scale_factor[0] <= 0:
            raise ValidationError("scale_factor", "scale factors must be positive")
        if self.elastic_alpha[0] < 0:
            raise ValidationError("elastic_alpha", "alpha must be >= 0")
        if self.elastic_sigma <= 0:
            raise ValidationError("elastic_sigma", "sigma must be positive")
        if self.noise_sigma[0] < 0:
            raise ValidationError("noise_sigma", "noise sigma must be >= 0")


def _warp(image, labels, coords):
    # snap coordinates that are integers up to rounding noise (e.g. cos 90deg)
    nearest = np.rint(coords)
    coords = np.where(np.abs(coords - nearest) < 1e-9, nearest, coords)
    image_out = ndimage.map_coordinates(
        np.asarray(image, dtype=np.float64), coords, order=1, mode="nearest"
    )
    labels_out = None
    if labels is not None:
        labels = np.asarray(labels)
        labels_out = ndimage.map_coordinates(
            labels, coords, order=0, mode="constant", cval=0, output=labels.dtype
        )
    return image_out, labels_out


def _identity_coords(shape):
    return np.indices(shape, dtype=np.float64)


def _center(shape):
    return np.array([(n - 1) / 2.0 for n in shape]).reshape((-1,) + (1,) * len(shape))


def mirror(image, labels, axes_mask):
    """Reverse both arrays along every axis selected in ``axes_mask``."""
    axes = tuple(i for i, flag in enumerate(axes_mask) if flag)
    if not axes:
        return image, labels
    image = np.flip(image, axis=axes).copy()
    if labels is not None:
        labels = np.flip(labels, axis=axes).copy()
    return image, labels


def rotation_matrix(angles_deg, ndim):
    """Index-space rotation; in 3D, ``angles_deg[k]`` rotates about axis ``k``."""
    if ndim == 2:
        (a,) = np.atleast_1d(angles_deg)
        c, s = math.cos(math.radians(a)), math.sin(math.radians(a))
        return np.array([[c, -s], [s, c]])
    angles = np.atleast_1d(angles_deg)
    if len(angles) != 3:
        raise ValueError("3D rotation needs one angle per axis")
    rot = np.eye(3)
    for axis, a in enumerate(angles):
        i, j = [k for k in range(3) if k != axis]
        c, s = math.cos(math.radians(a)), math.sin(math.radians(a))
        r = np.eye(3)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        rot = rot @ r
    return rot


def rotate(image, labels, angles):
    """Rotate about the array center by ``angles`` (degrees)."""
    image = np.asarray(image)
    if np.all(np.atleast_1d(angles) == 0):
        return image.copy(), None if labels is None else np.asarray(labels).copy()
    rot = rotation_matrix(angles, image.ndim)
    center = _center(image.shape)
    offsets = _identity_coords(image.shape) - center
    # output voxel o samples the input at center + R^T (o - center)
    coords = np.tensordot(rot.T, offsets, axes=1) + center
    return _warp(image, labels, coords)


def scale_spatial(image, labels, factor):
    """Zoom about the center by ``factor`` keeping the array shape."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    image = np.asarray(image)
    if factor == 1:
        return image.copy(), None if labels is None else np.asarray(labels).copy()
    center = _center(image.shape)
    coords = center + (_identity_coords(image.shape) - center) / factor
    return _warp(image, labels, coords)


def displacement_field(shape, alpha, sigma, rng):
    """Per-axis Gaussian-smoothed uniform[-1, 1] noise scaled by ``alpha``."""
    fields = []
    for _ in shape:
        noise = rng.uniform(-1.0, 1.0, size=shape)
        smooth = ndimage.gaussian_filter(noise, sigma, mode="reflect", truncate=SMOOTH_TRUNCATE)
        fields.append(smooth * alpha)
    return np.stack(fields)


def elastic_deform(image, labels, alpha, sigma, rng):
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic deformation needs alpha >= 0 and sigma > 0")
    image = np.asarray(image)
    if alpha == 0:
        return image.copy(), None if labels is None else np.asarray(labels).copy()
    coords = _identity_coords(image.shape) + displacement_field(image.shape, alpha, sigma, rng)
    return _warp(image, labels, coords)


def brightness(image, shift):
    return np.asarray(image) + shift


def contrast(image, factor):
    image = np.asarray(image)
    if factor == 1:
        return image.copy()
    mean = image.mean()
    return mean + factor * (image - mean)


def gamma(image, g):
    """Power-law transform on the min-max normalized image; min and max are kept."""
    if g <= 0:
        raise ValueError("gamma must be positive")
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if g == 1 or hi == lo:
        return image.copy()
    t = ((image - lo) / (hi - lo)) ** g
    return lo * (1.0 - t) + hi * t


def gaussian_noise(image, sigma, rng):
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    return image + rng.normal(0.0, sigma, size=image.shape)


def random_crop_origin(labels, volume_shape, patch_shape, rng, require_foreground=False):
    """Uniform origin of a ``patch_shape`` window inside ``volume_shape``.

    With ``require_foreground`` (and labels given), up to 10 origins are
    drawn until the label window holds a non-background voxel; otherwise the
    last draw is kept.
    """
    highs = [max(n - p, 0) + 1 for n, p in zip(volume_shape, patch_shape)]
    origin = None
    for _ in range(CROP_TRIES):
        origin = tuple(int(rng.integers(0, h)) for h in highs)
        if not require_foreground or labels is None:
            break
        window = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
        if not is_blank(labels[window]):
            break
    return origin


def random_crop(image, labels, patch_shape, rng, require_foreground=False):
    patch_shape = tuple(patch_shape)
    shape = tuple(max(n, p) for n, p in zip(np.shape(image), patch_shape))
    image = pad_to(np.asarray(image), shape)
    if labels is not None:
        labels = pad_to(np.asarray(labels), shape)
    origin = random_crop_origin(labels, shape, patch_shape, rng, require_foreground)
    window = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    return image[window], None if labels is None else labels[window]


def _uniform(rng, bounds, size=None):
    lo, hi = bounds
    return rng.uniform(lo, hi, size=size)


def apply_pipeline(image, labels, config, rng):
    """Run every enabled augmentation with its probability, in fixed order.

    Order: mirror, rotate, scale, elastic, brightness, contrast, gamma, noise.
    One coin is drawn per technique whether or not it is enabled, so toggling
    a technique does not shift the random stream of the others.
    """
    image = np.asarray(image)
    ndim = image.ndim

    if rng.random() < config.p_mirror and config.mirror:
        mask = [bool(m) and rng.random() < 0.5 for m in list(config.mirror_axes)[:ndim]]
        image, labels = mirror(image, labels, mask)
    if rng.random() < config.p_rotate and config.rotate:
        angles = _uniform(rng, config.rotation_deg, size=1 if ndim == 2 else 3)
        image, labels = rotate(image, labels, angles)
    if rng.random() < config.p_scale and config.scale:
        image, labels = scale_spatial(image, labels, _uniform(rng, config.scale_factor))
    if rng.random() < config.p_elastic and config.elastic:
        alpha = _uniform(rng, config.elastic_alpha)
        image, labels = elastic_deform(image, labels, alpha, config.elastic_sigma, rng)
    if rng.random() < config.p_brightness and config.brightness:
        image = brightness(image, _uniform(rng, config.brightness_shift) * image.std())
    if rng.random() < config.p_contrast and config.contrast:
        image = contrast(image, _uniform(rng, config.contrast_factor))
    if rng.random() < config.p_gamma and config.gamma:
        image = gamma(image, _uniform(rng, config.gamma_range))
    if rng.random() < config.p_noise and config.noise:
        image = gaussian_noise(image, _uniform(rng, config.noise_sigma) * image.std(), rng)
    return image, labels
