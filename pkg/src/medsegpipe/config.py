"""Pipeline configuration: a flat ``key = value`` text file.

Lines are ``key = value``; ``#`` starts a comment; tuples are comma
separated; ``none`` clears an optional value.  Relative paths are resolved
against the directory holding the config file.  Unknown keys are rejected.
The full key table lives in ``README.md``.

Augmentation settings use the ``aug_`` prefix followed by the field name of
:class:`~medsegpipe.augment.AugmentConfig` (``aug_p_rotate = 0.2``,
``aug_rotation_deg = -10, 10``, ...).
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ParseError, UnknownKey, ValidationError
from .metrics import LOSS_SELECTORS, SOFT_METRICS

ANALYSIS_MODES = ("3d_patch", "2d_slice", "full_image")
NORMALIZATIONS = ("zscore", "scale", "none")
EVALUATIONS = ("kfold", "loo", "split", "detailed")
BATCH_MODES = ("cache", "on_the_fly")
PREDICTION_POLICIES = ("overlap", "distinct")

CACHE_ENV = "MEDSEGPIPE_CACHE"

REQUIRED = ("data_dir", "output_dir", "n_classes")


@dataclass
class PipelineConfig:
    data_dir: Path = None
    output_dir: Path = None
    n_classes: int = None
    cache_dir: Path = None
    # preprocessing
    clip_min: float = None
    clip_max: float = None
    target_spacing: tuple = None
    normalization: str = "zscore"
    scale_bounds: tuple = (0.0, 1.0)
    # patching
    analysis: str = "3d_patch"
    patch_shape: tuple = (64, 64, 64)
    patch_overlap: tuple = None
    prediction_overlap: tuple = None
    prediction_policy: str = "overlap"
    skip_blank: bool = True
    # augmentation
    augment: bool = False
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    # batching
    batch_size: int = 2
    batch_mode: str = "cache"
    prefetch: int = 2
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    sample_cache: int = 4
    # training
    loss: str = "tversky"
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5
    learning_rate: float = 0.5
    epochs: int = 10
    shuffle: bool = True
    seed: int = 0
    fit_metrics: tuple = ("dice_soft",)
    # evaluation
    evaluation: str = "kfold"
    k_folds: int = 3
    test_fraction: float = 0.2
    train_ids: tuple = ()
    test_ids: tuple = ()
    overlay: bool = False

    def __post_init__(self):
        if self.patch_shape is not None and self.patch_overlap is None:
            self.patch_overlap = (0,) * len(self.patch_shape)
        if self.patch_shape is not None and self.prediction_overlap is None:
            self.prediction_overlap = tuple(p // 2 for p in self.patch_shape)
        if self.output_dir is not None and self.cache_dir is None:
            self.cache_dir = Path(self.output_dir) / "cache"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        """Check every field and cross-field constraint; raise ValidationError."""
        for name in REQUIRED:
            if getattr(self, name) is None:
                raise ValidationError(name, "required key is missing")
        if not 2 <= self.n_classes <= 256:
            raise ValidationError("n_classes", f"must be in [2, 256], got {self.n_classes}")
        _choice("analysis", self.analysis, ANALYSIS_MODES)
        _choice("normalization", self.normalization, NORMALIZATIONS)
        _choice("evaluation", self.evaluation, EVALUATIONS)
        _choice("batch_mode", self.batch_mode, BATCH_MODES)
        _choice("prediction_policy", self.prediction_policy, PREDICTION_POLICIES)
        _choice("loss", self.loss, LOSS_SELECTORS)
        for m in self.fit_metrics:
            _choice("fit_metrics", m, tuple(SOFT_METRICS))

        if (self.clip_min is None) != (self.clip_max is None):
            raise ValidationError("clip_min", "clip_min and clip_max must be given together")
        if self.clip_min is not None and not self.clip_min < self.clip_max:
            raise ValidationError("clip_min", f"clip_min {self.clip_min} >= clip_max {self.clip_max}")
        if self.target_spacing is not None and any(s <= 0 for s in self.target_spacing):
            raise ValidationError("target_spacing", "spacings must be positive")
        lo, hi = self.scale_bounds
        if not lo < hi:
            raise ValidationError("scale_bounds", f"need lo < hi, got ({lo}, {hi})")

        if any(p < 1 for p in self.patch_shape):
            raise ValidationError("patch_shape", "extents must be >= 1")
        for name in ("patch_overlap", "prediction_overlap"):
            overlap = getattr(self, name)
            if len(overlap) != len(self.patch_shape):
                raise ValidationError(name, "must have one entry per patch axis")
            for o, p in zip(overlap, self.patch_shape):
                if not 0 <= o < p:
                    raise ValidationError(name, f"need 0 <= overlap < patch_shape, got {o} vs {p}")
        if self.target_spacing is not None and self.analysis == "3d_patch":
            if len(self.target_spacing) != len(self.patch_shape):
                raise ValidationError("target_spacing", "must have one entry per patch axis")

        positive_ints = ("batch_size", "prefetch", "workers", "sample_cache", "epochs")
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ValidationError(name, "must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate", "must be > 0")
        if self.tversky_alpha < 0 or self.tversky_beta < 0:
            raise ValidationError("tversky_alpha", "tversky weights must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed", "must be >= 0")
        if self.k_folds < 2:
            raise ValidationError("k_folds", "must be >= 2")
        if not 0 < self.test_fraction < 1:
            raise ValidationError("test_fraction", "must lie in (0, 1)")
        if self.evaluation == "detailed" and not (self.train_ids and self.test_ids):
            raise ValidationError("train_ids", "detailed evaluation needs train_ids and test_ids")
        return self


def _choice(name, value, allowed):
    if value not in allowed:
        raise ValidationError(name, f"'{value}' is not one of {', '.join(allowed)}")


# value parsers


def _bool(text):
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _str(text):
    return text


def _tuple_of(conv):
    def parse(text):
        return tuple(conv(x.strip()) for x in text.split(",") if x.strip())

    return parse


def _optional(conv):
    def parse(text):
        return None if text.lower() == "none" else conv(text)

    return parse


_PATH = "path"

KEYS = {
    "data_dir": _PATH,
    "output_dir": _PATH,
    "cache_dir": _PATH,
    "n_classes": _int,
    "clip_min": _optional(_float),
    "clip_max": _optional(_float),
    "target_spacing": _optional(_tuple_of(_float)),
    "normalization": _str,
    "scale_bounds": _tuple_of(_float),
    "analysis": _str,
    "patch_shape": _tuple_of(_int),
    "patch_overlap": _tuple_of(_int),
    "prediction_overlap": _tuple_of(_int),
    "prediction_policy": _str,
    "skip_blank": _bool,
    "augment": _bool,
    "batch_size": _int,
    "batch_mode": _str,
    "prefetch": _int,
    "workers": _int,
    "sample_cache": _int,
    "loss": _str,
    "tversky_alpha": _float,
    "tversky_beta": _float,
    "learning_rate": _float,
    "epochs": _int,
    "shuffle": _bool,
    "seed": _int,
    "fit_metrics": _tuple_of(_str),
    "evaluation": _str,
    "k_folds": _int,
    "test_fraction": _float,
    "train_ids": _tuple_of(_str),
    "test_ids": _tuple_of(_str),
    "overlay": _bool,
}


def _augment_parser(name):
    default = AugmentConfig.__dataclass_fields__[name].default
    if isinstance(default, bool):
        return _bool
    if isinstance(default, tuple):
        return _tuple_of(_bool) if isinstance(default[0], bool) else _tuple_of(_float)
    return _float


AUGMENT_KEYS = {"aug_" + name: _augment_parser(name) for name in AugmentConfig.__dataclass_fields__}


def parse_config(text, base_dir="."):
    """Parse config text into a validated :class:`PipelineConfig`."""
    base_dir = Path(base_dir)
    values, aug_values, seen = {}, {}, set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(lineno, f"expected 'key = value', got '{line}'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(lineno, "missing key before '='")
        if key in seen:
            raise ParseError(lineno, f"duplicate key '{key}'")
        seen.add(key)
        if key in KEYS:
            conv = KEYS[key]
            target = values
        elif key in AUGMENT_KEYS:
            conv = AUGMENT_KEYS[key]
            target = aug_values
            key = key[len("aug_") :]
        else:
            raise UnknownKey(key, lineno)
        if conv is _PATH:
            target[key] = (base_dir / value).resolve()
            continue
        try:
            target[key] = conv(value)
        except ValueError as exc:
            raise ValidationError(key, f"bad value '{value}' on line {lineno}: {exc}") from None

    try:
        values["augmentation"] = AugmentConfig(**aug_values)
    except TypeError as exc:
        raise ValidationError("augmentation", str(exc)) from None
    env_cache = os.environ.get(CACHE_ENV)
    if env_cache:
        values["cache_dir"] = Path(env_cache).resolve()
    return PipelineConfig(**values).validate()


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(0, f"config is not UTF-8: {exc}") from None
    return parse_config(text, path.parent)


def bundled_config(name):
    """Path of a config shipped with the package, e.g. ``bundled_config('kits19')``."""
    return Path(__file__).parent / "configs" / f"{name}.cfg"
