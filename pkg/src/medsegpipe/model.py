"""Model interface, reference per-voxel classifier, training and prediction.

Any model implementing :class:`ModelInterface` can be dropped into
:func:`fit` and :func:`predict`.  :class:`ReferenceModel` is a linear
softmax classifier over five local intensity features per voxel; it is
small enough to train on a CPU in seconds and has an exact gradient.

Model file layout (``*.mscm``, little-endian)::

    b"MSCMODEL" | version u32 | n_features u32 | n_classes u32 |
    weights float64[n_features * n_classes]  (row-major, features x classes)
"""

import abc
import logging
import os
import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import batching
from .batching import BatchPlan, Item, build_batches, shuffle_order
from .errors import CorruptModel, EmptyInput, NonFiniteLoss, UntrainedModel
from .metrics import SOFT_METRICS, loss_and_grad
from .patching import compute_grid, extract_patches, merge_patches
from .preprocess import one_hot_decode, preprocess_image, resample
from .tsv import fmt
from .volume import ClassMap

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MSCMODEL"
MODEL_VERSION = 1
N_FEATURES = 5
FEATURE_NAMES = ("intensity", "box_mean_r1", "box_mean_r2", "box_std_r1", "bias")


class ModelInterface(abc.ABC):
    """Contract between the pipeline and a segmentation model.

    ``predict_scores`` must return per-voxel class scores in [0, 1] that sum
    to 1 over the class axis, shaped ``(batch, n_classes, *spatial)``.
    """

    @abc.abstractmethod
    def initialize(self, config):
        ...

    @abc.abstractmethod
    def train_step(self, batch, learning_rate):
        """Update the model on one batch; return the loss before the update."""

    @abc.abstractmethod
    def predict_scores(self, batch):
        ...

    @abc.abstractmethod
    def save(self, path):
        ...

    @classmethod
    @abc.abstractmethod
    def load(cls, path):
        ...


def compute_features(patch):
    """Per-voxel features of an image patch, shape ``(5, *patch.shape)``.

    Channels: raw intensity, box mean over radius 1 and 2, box standard
    deviation over radius 1, constant 1.  Windows are clamped at the edges.
    """
    x = np.asarray(patch, dtype=np.float64)
    mean1 = ndimage.uniform_filter(x, size=3, mode="nearest")
    mean2 = ndimage.uniform_filter(x, size=5, mode="nearest")
    sq1 = ndimage.uniform_filter(x * x, size=3, mode="nearest")
    var1 = sq1 - mean1 * mean1
    # cancellation noise on flat regions must not turn into sqrt(eps)-sized std
    var1[var1 < 1e-12 * (1.0 + sq1)] = 0.0
    return np.stack([x, mean1, mean2, np.sqrt(var1), np.ones_like(x)])


def softmax(logits, axis=0):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def forward(weights, features):
    """Class scores for features ``(K, *spatial)`` -> ``(C, *spatial)``."""
    k = features.shape[0]
    logits = np.tensordot(weights.T, features.reshape(k, -1), axes=1)
    return softmax(logits, axis=0).reshape((weights.shape[1],) + features.shape[1:])


def loss_and_weight_grad(weights, features, onehot, loss, alpha=0.5, beta=0.5):
    """Loss and its gradient w.r.t. ``weights`` (K x C).

    ``features`` is ``(K, M)`` and ``onehot`` is ``(C, M)`` over M voxels.
    """
    p = softmax(weights.T @ features, axis=0)
    value, d_p = loss_and_grad(loss, p, onehot, alpha, beta)
    # softmax Jacobian-vector product, per voxel
    d_logits = p * (d_p - (p * d_p).sum(axis=0, keepdims=True))
    return value, features @ d_logits.T


def _batch_features(batch):
    feats = [compute_features(img[0]).reshape(N_FEATURES, -1) for img in batch.images]
    return np.concatenate(feats, axis=1)


def _batch_onehot(batch):
    c = batch.labels.shape[1]
    return np.concatenate([lab.reshape(c, -1) for lab in batch.labels], axis=1).astype(np.float64)


class ReferenceModel(ModelInterface):
    def __init__(self, n_classes=None, loss="tversky", tversky_alpha=0.5, tversky_beta=0.5):
        self.n_classes = n_classes
        self.loss = loss
        self.tversky_alpha = tversky_alpha
        self.tversky_beta = tversky_beta
        self.weights = None
        if n_classes is not None:
            self.weights = np.zeros((N_FEATURES, n_classes))

    def initialize(self, config):
        self.n_classes = config.n_classes
        self.loss = config.loss
        self.tversky_alpha = config.tversky_alpha
        self.tversky_beta = config.tversky_beta
        self.weights = np.zeros((N_FEATURES, config.n_classes))
        return self

    def _require_weights(self):
        if self.weights is None:
            raise UntrainedModel("model weights were never initialized")

    def train_step(self, batch, learning_rate):
        self._require_weights()
        features = _batch_features(batch)
        onehot = _batch_onehot(batch)
        value, grad = loss_and_weight_grad(
            self.weights, features, onehot, self.loss, self.tversky_alpha, self.tversky_beta
        )
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteLoss(
                f"non-finite {self.loss} loss ({value}) on batch {batch.batch_id} "
                f"from samples {', '.join(batch.sample_ids)}"
            )
        self.weights = self.weights - learning_rate * grad
        return value

    def predict_scores(self, batch):
        self._require_weights()
        return np.stack([forward(self.weights, compute_features(img[0])) for img in batch.images])

    def save(self, path):
        self._require_weights()
        k, c = self.weights.shape
        payload = struct.pack("<8sIII", MODEL_MAGIC, MODEL_VERSION, k, c)
        payload += np.ascontiguousarray(self.weights, dtype="<f8").tobytes()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if len(data) < 20:
            raise CorruptModel(f"{path}: file too short")
        magic, version, k, c = struct.unpack_from("<8sIII", data, 0)
        if magic != MODEL_MAGIC:
            raise CorruptModel(f"{path}: bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise CorruptModel(f"{path}: unsupported model version {version}")
        if k != N_FEATURES or c < 2:
            raise CorruptModel(f"{path}: unexpected weight shape {k}x{c}")
        if len(data) != 20 + 8 * k * c:
            raise CorruptModel(f"{path}: expected {20 + 8 * k * c} bytes, found {len(data)}")
        model = cls(c)
        model.weights = np.frombuffer(data, "<f8", k * c, 20).reshape(k, c).astype(np.float64)
        if not np.all(np.isfinite(model.weights)):
            raise CorruptModel(f"{path}: non-finite weights")
        return model


def _batch_stream(plan, config, cache_dir):
    """Return ``epoch_batches(order)`` for the configured batch mode."""
    if config.batch_mode == "cache":
        paths = batching.write_cache(plan, cache_dir, config.workers, config.prefetch)
        return lambda order: batching.cached_iterator(paths, order)
    return lambda order: batching.on_the_fly_iterator(plan, order, config.workers, config.prefetch)


def fit(model, sample_io, sample_ids, config, fitting_path=None, cache_dir=None):
    """Train ``model`` for ``config.epochs`` epochs; return ``(model, history)``.

    ``history`` holds one dict per epoch with the mean loss and the mean of
    every metric in ``config.fit_metrics`` over the epoch's batches.  When
    ``fitting_path`` is given, each epoch is appended to that TSV as soon as
    it finishes.
    """
    plan = BatchPlan(sample_io, sample_ids, config)
    if len(plan) == 0:
        raise EmptyInput("training set produced no batches (all patches blank?)")
    epoch_batches = _batch_stream(plan, config, cache_dir or config.cache_dir)

    metric_names = list(config.fit_metrics)
    history = []
    out = None
    if fitting_path is not None:
        fitting_path = Path(fitting_path)
        fitting_path.parent.mkdir(parents=True, exist_ok=True)
        out = open(fitting_path, "w", encoding="utf-8", newline="\n")
        out.write("\t".join(["epoch", "mean_loss"] + metric_names) + "\n")
    try:
        for epoch in range(config.epochs):
            if config.shuffle:
                order = shuffle_order(len(plan), epoch, config.seed)
            else:
                order = range(len(plan))
            losses = []
            sums = dict.fromkeys(metric_names, 0.0)
            for batch in epoch_batches(order):
                if metric_names:
                    scores = model.predict_scores(batch)
                    for name in metric_names:
                        sums[name] += SOFT_METRICS[name](scores, batch.labels, axis=1)
                losses.append(model.train_step(batch, config.learning_rate))
            row = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses))}
            row.update({name: sums[name] / len(losses) for name in metric_names})
            history.append(row)
            log.info("epoch %d/%d  loss %.5f", epoch + 1, config.epochs, row["mean_loss"])
            if out is not None:
                cells = [str(row["epoch"])] + [fmt(row[k]) for k in ["mean_loss"] + metric_names]
                out.write("\t".join(cells) + "\n")
                out.flush()
    finally:
        if out is not None:
            out.close()
    return model, history


def _model_ready(model):
    if getattr(model, "weights", True) is None:
        raise UntrainedModel("model weights were never initialized")


def predict_scores_volume(model, image, config):
    """Score volume ``(C, *spatial)`` of an already preprocessed Volume."""
    _model_ready(model)
    data = image.data
    if config.analysis == "2d_slice" and data.ndim == 3:
        items = [Item(data[z]) for z in range(data.shape[0])]
        scores = [s for b in build_batches(items, config.batch_size) for s in model.predict_scores(b)]
        return np.stack(scores, axis=1)
    if config.analysis == "full_image" or (config.analysis == "2d_slice" and data.ndim == 2):
        (batch,) = build_batches([Item(data)], 1)
        return model.predict_scores(batch)[0]
    if config.prediction_policy == "overlap":
        overlap = config.prediction_overlap
    else:
        overlap = (0,) * len(config.patch_shape)
    grid = compute_grid(data.shape, config.patch_shape, overlap)
    patches = extract_patches(data, grid)
    batches = build_batches([Item(p) for p in patches], config.batch_size)
    scores = [s for b in batches for s in model.predict_scores(b)]
    return merge_patches(scores, grid)


def predict(model, image, config, sample_io=None, sample_id=None):
    """Segment ``image``; return a ClassMap on the original voxel grid.

    preprocess -> patch grid -> per-patch scores -> mean merge -> argmax ->
    nearest-neighbour resampling back to the input geometry.  If
    ``sample_io`` is given the result is saved through it.
    """
    processed = preprocess_image(image, config)
    scores = predict_scores_volume(model, processed, config)
    labels = one_hot_decode(scores, processed.spacing)
    if labels.shape != image.shape or labels.spacing != image.spacing:
        labels = resample(labels, image.spacing, "nearest", shape=image.shape)
    labels = ClassMap(labels.data, image.spacing, config.n_classes)
    if sample_io is not None:
        sample_io.save_prediction(sample_id, labels)
    return labels
