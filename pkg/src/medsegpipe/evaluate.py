"""Automatic evaluation: data splits, cross-validation, dataset analysis and overlays.

Reported metrics are computed per test sample on the hard prediction at
the original resolution, then averaged; fold report columns carry a
``mean_`` prefix to make that explicit.
"""

import logging
from pathlib import Path

import numpy as np

from .augment import item_rng
from .errors import (
    DataError,
    InvalidFraction,
    InvalidK,
    OverlappingSets,
    PipelineError,
    ShapeMismatch,
    TooFewSamples,
    UnknownId,
)
from .metrics import (
    categorical_crossentropy,
    confusion_counts,
    dice_soft,
    tversky_loss,
)
from .model import ReferenceModel, fit, predict
from .nifti_io import NiftiSampleIO
from .preprocess import one_hot_encode, round_half_up
from .tsv import write_tsv
from .volume import ClassMap, Volume

log = logging.getLogger(__name__)

SPLIT_SALT = 0x5350_4C54

RED, BLUE, GREEN, YELLOW, MAGENTA, CYAN = (
    (255, 0, 0),
    (0, 0, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
)
CLASS_TINTS = (RED, BLUE, GREEN, YELLOW, MAGENTA, CYAN)
OVERLAY_BASE_WEIGHT = 0.6


class FoldError(PipelineError):
    """A cross-validation run failed; ``cause`` holds the original exception."""

    def __init__(self, fold, cause):
        super().__init__(f"fold {fold} failed: {type(cause).__name__}: {cause}")
        self.fold = fold
        self.cause = cause


# splitters


def _shuffled(ids, seed):
    ids = list(ids)
    perm = item_rng(seed, SPLIT_SALT).permutation(len(ids))
    return [ids[i] for i in perm]


def kfold_split(ids, k, seed=0):
    """Shuffle ``ids`` and cut them into ``k`` folds whose sizes differ by at most one."""
    ids = list(ids)
    if not 2 <= k <= len(ids):
        raise InvalidK(f"k must lie in [2, {len(ids)}], got {k}")
    shuffled = _shuffled(ids, seed)
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(shuffled[start : start + size])
        start += size
    return folds


def loo_split(ids):
    ids = list(ids)
    if len(ids) < 2:
        raise TooFewSamples("leave-one-out needs at least two samples")
    return [[i] for i in ids]


def percentage_split(ids, test_fraction, seed=0):
    """Random ``(train, test)`` split with ``round(fraction * n)`` test ids."""
    ids = list(ids)
    if not 0 < test_fraction < 1:
        raise InvalidFraction(f"test fraction must lie in (0, 1), got {test_fraction}")
    if len(ids) < 2:
        raise TooFewSamples("a percentage split needs at least two samples")
    n_test = min(max(round_half_up(test_fraction * len(ids)), 1), len(ids) - 1)
    shuffled = _shuffled(ids, seed)
    return shuffled[n_test:], shuffled[:n_test]


def detailed_split(train_ids, test_ids, known_ids=None):
    train_ids, test_ids = list(train_ids), list(test_ids)
    if not train_ids or not test_ids:
        raise DataError("detailed split needs non-empty train and test lists")
    shared = sorted(set(train_ids) & set(test_ids))
    if shared:
        raise OverlappingSets(f"ids in both train and test: {', '.join(shared)}")
    if known_ids is not None:
        unknown = sorted(set(train_ids + test_ids) - set(known_ids))
        if unknown:
            raise UnknownId(f"unknown sample ids: {', '.join(unknown)}")
    return train_ids, test_ids


def evaluation_runs(config, ids):
    """List of ``(train_ids, test_ids)`` runs for the configured technique."""
    ids = list(ids)
    if config.evaluation == "kfold":
        folds = kfold_split(ids, config.k_folds, config.seed)
    elif config.evaluation == "loo":
        folds = loo_split(ids)
    elif config.evaluation == "split":
        return [percentage_split(ids, config.test_fraction, config.seed)]
    else:
        return [detailed_split(config.train_ids, config.test_ids, ids)]
    return [
        ([x for j, f in enumerate(folds) if j != i for x in f], fold) for i, fold in enumerate(folds)
    ]


# per-sample metrics


def metric_columns(n_classes):
    cols = [f"dice_c{c}" for c in range(n_classes)]
    cols += [f"jaccard_c{c}" for c in range(n_classes)]
    return cols + ["dice_soft", "tversky_loss", "crossentropy", "combined_loss"]


def sample_metrics(pred, truth, n_classes, tversky_alpha=0.5, tversky_beta=0.5):
    """All report metrics for one hard prediction against its ground truth."""
    out = {}
    counts = [confusion_counts(pred, truth, c) for c in range(n_classes)]
    for c, cc in enumerate(counts):
        d = 2 * cc.tp + cc.fp + cc.fn
        out[f"dice_c{c}"] = 1.0 if d == 0 else 2.0 * cc.tp / d
    for c, cc in enumerate(counts):
        d = cc.tp + cc.fp + cc.fn
        out[f"jaccard_c{c}"] = 1.0 if d == 0 else cc.tp / d
    p = one_hot_encode(pred, n_classes, np.float64)
    g = one_hot_encode(truth, n_classes, np.float64)
    soft = dice_soft(p, g)
    ce = categorical_crossentropy(p, g)
    out["dice_soft"] = soft
    out["tversky_loss"] = tversky_loss(p, g, tversky_alpha, tversky_beta)
    out["crossentropy"] = ce
    out["combined_loss"] = ce - soft
    return out


def evaluate_samples(model, sample_io, ids, config, overlay_dir=None):
    """Predict and score every id; return one metrics dict per sample."""
    rows = []
    for sid in ids:
        image, truth = sample_io.load_sample(sid)
        pred = predict(model, image, config, sample_io, sid)
        if truth is None:
            raise DataError(f"sample '{sid}' has no segmentation to evaluate against")
        row = {"sample_id": sid}
        row.update(
            sample_metrics(pred, truth, config.n_classes, config.tversky_alpha, config.tversky_beta)
        )
        rows.append(row)
        if overlay_dir is not None:
            export_overlay(image, truth, pred, overlay_dir, sid)
        log.info("%s  dice %s", sid, " ".join(f"{row[f'dice_c{c}']:.4f}" for c in range(config.n_classes)))
    return rows


def run_cross_validation(config, sample_io=None, model_factory=None):
    """Fit and evaluate every run of the configured evaluation technique.

    Writes to ``config.output_dir``: ``fold_<i>_fitting.tsv`` and
    ``fold_<i>_model.mscm`` per run, ``evaluation.tsv`` (one row per run plus
    a ``mean`` row) and ``evaluation_samples.tsv`` (one row per test sample).
    Predictions are saved through ``sample_io``.
    """
    if sample_io is None:
        sample_io = NiftiSampleIO(config.data_dir, config.output_dir, config.n_classes)
    if model_factory is None:
        model_factory = ReferenceModel
    out_dir = Path(config.output_dir)
    ids = [sid for sid in sample_io.sample_ids() if sample_io.has_labels(sid)]
    runs = evaluation_runs(config, ids)
    columns = metric_columns(config.n_classes)

    fold_rows, sample_rows = [], []
    for i, (train, test) in enumerate(runs, start=1):
        log.info("fold %d/%d: %d train, %d test", i, len(runs), len(train), len(test))
        try:
            model = model_factory().initialize(config)
            fit(
                model,
                sample_io,
                train,
                config,
                fitting_path=out_dir / f"fold_{i}_fitting.tsv",
                cache_dir=Path(config.cache_dir) / f"fold_{i}",
            )
            model.save(out_dir / f"fold_{i}_model.mscm")
            overlay_dir = out_dir / "overlays" if config.overlay else None
            rows = evaluate_samples(model, sample_io, test, config, overlay_dir)
        except PipelineError as exc:
            raise FoldError(i, exc) from exc
        except (OSError, ValueError, ArithmeticError) as exc:
            raise FoldError(i, exc) from exc
        for r in rows:
            sample_rows.append([str(i), r["sample_id"]] + [r[c] for c in columns])
        means = [float(np.mean([r[c] for r in rows])) for c in columns]
        fold_rows.append([str(i), len(rows)] + means)

    mean_row = ["mean", float(np.mean([r[1] for r in fold_rows]))]
    mean_row += [float(np.mean([r[j] for r in fold_rows])) for j in range(2, 2 + len(columns))]
    header = ["fold", "sample_count"] + [f"mean_{c}" for c in columns]
    report_path = write_tsv(out_dir / "evaluation.tsv", header, fold_rows + [mean_row])
    write_tsv(
        out_dir / "evaluation_samples.tsv", ["fold", "sample_id"] + columns, sample_rows
    )
    return {
        "columns": columns,
        "folds": [dict(zip(header, r)) for r in fold_rows],
        "mean": dict(zip(header, mean_row)),
        "report": report_path,
    }


# dataset analysis


def analyze_dataset(sample_io, ids=None, path=None):
    """Intensity statistics and class frequencies per sample (optionally as TSV)."""
    if ids is None:
        ids = sample_io.sample_ids()
    n_classes = sample_io.n_classes
    rows = []
    for sid in ids:
        image, labels = sample_io.load_sample(sid)
        data = np.asarray(image.data, dtype=np.float64)
        row = {
            "sample_id": sid,
            "shape": "x".join(str(n) for n in image.shape),
            "min": float(data.min()),
            "max": float(data.max()),
            "mean": float(data.mean()),
            "std": float(data.std()),
        }
        counts = (
            np.bincount(labels.data.ravel(), minlength=n_classes)
            if labels is not None
            else np.zeros(n_classes, dtype=np.int64)
        )
        total = labels.data.size if labels is not None else 0
        for c in range(n_classes):
            row[f"count_c{c}"] = int(counts[c])
        for c in range(n_classes):
            row[f"fraction_c{c}"] = counts[c] / total if total else float("nan")
        rows.append(row)
    if path is not None and rows:
        header = list(rows[0])
        write_tsv(path, header, [[r[h] if isinstance(r[h], str) else r[h] for h in header] for r in rows])
    return rows


# overlays


def _gray(image):
    data = np.asarray(image, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo) * 255.0


def _tint(gray_slice, label_slice):
    rgb = np.repeat(gray_slice[..., np.newaxis], 3, axis=-1)
    for c in np.unique(label_slice):
        if c == 0:
            continue
        tint = np.array(CLASS_TINTS[(c - 1) % len(CLASS_TINTS)], dtype=np.float64)
        mask = label_slice == c
        rgb[mask] = OVERLAY_BASE_WEIGHT * rgb[mask] + (1.0 - OVERLAY_BASE_WEIGHT) * tint
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
    return path


def export_overlay(image, labels, pred=None, directory=".", sample_id="sample"):
    """One PPM per axial slice: ground truth overlay, prediction overlay to its right.

    Class 1 is tinted red, class 2 blue; the grayscale base is windowed to
    the volume's min/max.
    """
    img = image.data if isinstance(image, Volume) else np.asarray(image)
    lab = labels.data if isinstance(labels, ClassMap) else np.asarray(labels)
    if lab.shape != img.shape:
        raise ShapeMismatch(f"labels {lab.shape} vs image {img.shape}")
    prd = None
    if pred is not None:
        prd = pred.data if isinstance(pred, ClassMap) else np.asarray(pred)
        if prd.shape != img.shape:
            raise ShapeMismatch(f"prediction {prd.shape} vs image {img.shape}")
    gray = _gray(img)
    if img.ndim == 2:
        gray, lab = gray[np.newaxis], lab[np.newaxis]
        prd = None if prd is None else prd[np.newaxis]
    paths = []
    for k in range(gray.shape[0]):
        panels = [_tint(gray[k], lab[k])]
        if prd is not None:
            panels.append(_tint(gray[k], prd[k]))
        rgb = np.concatenate(panels, axis=1)
        paths.append(write_ppm(Path(directory) / f"{sample_id}_slice_{k}.ppm", rgb))
    return paths
