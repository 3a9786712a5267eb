"""Batch assembly, on-disk batch cache and per-epoch batch shuffling.

Training data flows in two steps.  :class:`BatchPlan` first decides which
patches make up the training set (grid patches or random crops, blank
patches skipped) and records only their origins.  Batches are then
materialized from the plan, either once into the disk cache
(``batch_mode = cache``) or on demand each epoch (``on_the_fly``).  Both
paths run the same deterministic code, so they yield identical arrays.

Batch cache file layout (all integers little-endian u32)::

    b"MSCBATCH" | version | rank | dims[rank] | n_classes |
    batch_id | ids_nbytes | ids (UTF-8, newline separated) |
    images (float32 LE, C order) | labels (float32 LE, C order)

``dims`` is the image array shape ``(batch, 1, *spatial)``; the label array
shape is the same with the channel extent replaced by ``n_classes``
(``n_classes == 0`` means the batch carries no labels).
"""

import logging
import os
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import islice
from pathlib import Path

import numpy as np

from .augment import apply_pipeline, item_rng, random_crop_origin
from .errors import CorruptCache, DataError, EmptyInput, ShapeMismatch
from .patching import compute_grid, is_blank, pad_to
from .preprocess import one_hot_encode, preprocess_sample

log = logging.getLogger(__name__)

CACHE_MAGIC = b"MSCBATCH"
CACHE_VERSION = 1
CACHE_SUFFIX = ".mscb"
SHUFFLE_SALT = 0x5348_5546  # keeps shuffle streams apart from augmentation streams


@dataclass(eq=False)
class Batch:
    """``images``: (batch, 1, *spatial); ``labels``: (batch, classes, *spatial) one-hot."""

    images: np.ndarray
    labels: np.ndarray = None
    batch_id: int = 0
    sample_ids: tuple = ()

    def __len__(self):
        return self.images.shape[0]

    @property
    def spatial_shape(self):
        return self.images.shape[2:]


@dataclass(eq=False)
class Item:
    image: np.ndarray
    labels: np.ndarray = None  # integer label patch or one-hot (classes, *spatial)
    sample_id: str = ""


def _as_item(x):
    if isinstance(x, Item):
        return x
    return Item(*x)


def build_batches(items, batch_size, n_classes=None, start_id=0):
    """Group items into batches of ``batch_size``; the last one may be smaller."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = [_as_item(x) for x in items]
    if not items:
        raise EmptyInput("no items to batch")
    batches = []
    for k, i in enumerate(range(0, len(items), batch_size)):
        chunk = items[i : i + batch_size]
        batches.append(_stack(chunk, n_classes, start_id + k))
    return batches


def _stack(chunk, n_classes, batch_id):
    spatial = {np.shape(it.image) for it in chunk}
    if len(spatial) != 1:
        raise ShapeMismatch(f"items in one batch differ in shape: {sorted(spatial)}")
    images = np.stack([np.asarray(it.image, dtype=np.float32) for it in chunk])[:, np.newaxis]
    labels = None
    if all(it.labels is not None for it in chunk):
        encoded = []
        for it in chunk:
            lab = np.asarray(it.labels)
            if lab.ndim == images.ndim - 2:
                if n_classes is None:
                    raise ValueError("n_classes is needed to one-hot encode label patches")
                lab = one_hot_encode(lab, n_classes, dtype=np.float32)
            encoded.append(np.asarray(lab, dtype=np.float32))
        labels = np.stack(encoded)
        if labels.shape[0] != images.shape[0] or labels.shape[2:] != images.shape[2:]:
            raise ShapeMismatch(f"label batch {labels.shape} vs image batch {images.shape}")
    return Batch(images, labels, batch_id, tuple(it.sample_id for it in chunk))


# cache files


def cache_path(directory, batch_id):
    return Path(directory) / f"batch_{batch_id}{CACHE_SUFFIX}"


def _encode_batch(batch):
    images = np.ascontiguousarray(batch.images, dtype="<f4")
    labels = None if batch.labels is None else np.ascontiguousarray(batch.labels, dtype="<f4")
    n_classes = 0 if labels is None else labels.shape[1]
    ids = "\n".join(batch.sample_ids).encode("utf-8")
    head = struct.pack("<8sII", CACHE_MAGIC, CACHE_VERSION, images.ndim)
    head += struct.pack(f"<{images.ndim}I", *images.shape)
    head += struct.pack("<III", n_classes, batch.batch_id, len(ids)) + ids
    body = images.tobytes() + (b"" if labels is None else labels.tobytes())
    return head + body


def cache_write(batch, directory):
    """Write ``batch`` atomically to ``<directory>/batch_<id>.mscb``."""
    path = cache_path(directory, batch.batch_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(_encode_batch(batch))
    os.replace(tmp, path)
    return path


def cache_read(path):
    data = Path(path).read_bytes()
    return decode_batch(data, path)


def decode_batch(data, source="<bytes>"):
    def fail(reason):
        raise CorruptCache(f"{source}: {reason}")

    if len(data) < 16:
        fail("file too short for a batch header")
    magic, version, rank = struct.unpack_from("<8sII", data, 0)
    if magic != CACHE_MAGIC:
        fail(f"bad magic {magic!r}")
    if version != CACHE_VERSION:
        fail(f"unsupported cache version {version}")
    if not 2 <= rank <= 8:
        fail(f"implausible rank {rank}")
    pos = 16
    if len(data) < pos + 4 * rank + 12:
        fail("truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    n_classes, batch_id, ids_len = struct.unpack_from("<III", data, pos)
    pos += 12
    if len(data) < pos + ids_len:
        fail("truncated sample id block")
    ids_blob = data[pos : pos + ids_len]
    pos += ids_len
    n_image = int(np.prod(dims))
    label_dims = (dims[0], n_classes) + tuple(dims[2:])
    n_label = int(np.prod(label_dims)) if n_classes else 0
    expected = pos + 4 * (n_image + n_label)
    if len(data) != expected:
        fail(f"expected {expected} bytes, found {len(data)}")
    images = np.frombuffer(data, "<f4", n_image, pos).reshape(dims).astype(np.float32)
    labels = None
    if n_classes:
        labels = np.frombuffer(data, "<f4", n_label, pos + 4 * n_image)
        labels = labels.reshape(label_dims).astype(np.float32)
    ids = tuple(ids_blob.decode("utf-8").split("\n")) if ids_len else ()
    return Batch(images, labels, batch_id, ids)


# shuffling


def shuffle_order(n_batches, epoch, seed):
    """Fisher-Yates permutation of ``range(n_batches)`` for one epoch.

    Only the processing order changes; batch contents are never resampled.
    """
    if n_batches < 1:
        raise ValueError("need at least one batch to shuffle")
    rng = item_rng(seed, SHUFFLE_SALT, epoch)
    order = list(range(n_batches))
    for i in range(n_batches - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


# planning and materialization


@dataclass(frozen=True)
class ItemSpec:
    sample_index: int
    sample_id: str
    key: int
    origin: tuple = None  # window origin; None = whole (padded) image


def load_preprocessed(sample_io, sample_id, config, require_labels=True):
    image, labels = sample_io.load_sample(sample_id)
    if labels is None and require_labels:
        raise DataError(f"sample '{sample_id}' has no segmentation for training")
    return preprocess_sample(image, labels, config)


class BatchPlan:
    """Deterministic list of training items for a set of samples.

    The plan stores origins only; :meth:`make_batch` rebuilds the arrays of
    batch ``k`` from scratch, so any worker can build any batch and get
    the same bytes.
    """

    def __init__(self, sample_io, sample_ids, config, seed=None):
        self.sample_io = sample_io
        self.sample_ids = list(sample_ids)
        self.config = config
        self.seed = config.seed if seed is None else seed
        self._load = lru_cache(maxsize=config.sample_cache)(self._load_uncached)
        self.items = []
        for s, sid in enumerate(self.sample_ids):
            self.items.extend(self._plan_sample(s, sid))
        b = config.batch_size
        self.batches = [self.items[i : i + b] for i in range(0, len(self.items), b)]
        log.info(
            "planned %d items in %d batches from %d samples",
            len(self.items),
            len(self.batches),
            len(self.sample_ids),
        )

    def __len__(self):
        return len(self.batches)

    def _load_uncached(self, sample_id):
        image, labels = load_preprocessed(self.sample_io, sample_id, self.config)
        return image.data, labels.data

    def _window_shape(self, image):
        cfg = self.config
        if cfg.analysis == "3d_patch":
            if len(cfg.patch_shape) != image.ndim:
                raise ShapeMismatch(
                    f"patch_shape {cfg.patch_shape} does not match {image.ndim}D images"
                )
            return tuple(cfg.patch_shape)
        if cfg.analysis == "2d_slice" and image.ndim == 3:
            return (1,) + image.shape[1:]
        return image.shape

    def _plan_sample(self, s, sid):
        cfg = self.config
        image, labels = self._load(sid)
        window = self._window_shape(image)
        if cfg.analysis == "full_image" or (cfg.analysis == "2d_slice" and image.ndim == 2):
            if cfg.skip_blank and is_blank(labels):
                return []
            return [ItemSpec(s, sid, 0, None)]

        grid = compute_grid(image.shape, window, cfg.patch_overlap if cfg.analysis == "3d_patch" else None)
        padded = pad_to(labels, grid.padded_shape)
        specs = []
        for k, grid_origin in enumerate(grid.origins):
            if cfg.augment and cfg.analysis == "3d_patch":
                rng = item_rng(self.seed, s, k)
                origin = random_crop_origin(padded, grid.padded_shape, window, rng, cfg.skip_blank)
            else:
                origin = grid_origin
            sl = tuple(slice(o, o + w) for o, w in zip(origin, window))
            if cfg.skip_blank and is_blank(padded[sl]):
                continue
            specs.append(ItemSpec(s, sid, k, tuple(origin)))
        return specs

    def _materialize(self, spec):
        cfg = self.config
        image, labels = self._load(spec.sample_id)
        if spec.origin is not None:
            window = self._window_shape(image)
            shape = tuple(max(n, w) for n, w in zip(image.shape, window))
            sl = tuple(slice(o, o + w) for o, w in zip(spec.origin, window))
            image = pad_to(image, shape)[sl]
            labels = pad_to(labels, shape)[sl]
            if cfg.analysis == "2d_slice":
                image, labels = image[0], labels[0]
        if cfg.augment:
            rng = item_rng(self.seed, spec.sample_index, spec.key, 1)
            image, labels = apply_pipeline(image, labels, cfg.augmentation, rng)
        return Item(image, labels, spec.sample_id)

    def make_batch(self, k):
        items = [self._materialize(spec) for spec in self.batches[k]]
        return _stack(items, self.config.n_classes, k)


def prefetch_map(fn, keys, workers=1, depth=2):
    """Ordered ``map(fn, keys)`` with at most ``depth`` results in flight.

    Output order never depends on ``workers``.
    """
    keys = iter(keys)
    if workers <= 1:
        for k in keys:
            yield fn(k)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque(pool.submit(fn, k) for k in islice(keys, depth))
        while pending:
            result = pending.popleft().result()
            nxt = next(keys, None)
            if nxt is not None:
                pending.append(pool.submit(fn, nxt))
            yield result


def on_the_fly_iterator(plan, order=None, workers=1, prefetch=2):
    """Stream batches of ``plan`` in ``order`` (default: build order), built in memory."""
    if order is None:
        order = range(len(plan))
    return prefetch_map(plan.make_batch, order, workers, prefetch)


def write_cache(plan, directory, workers=1, prefetch=2):
    """Materialize every batch of ``plan`` under ``directory``; return the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob(f"batch_*{CACHE_SUFFIX}"):
        stale.unlink()
    return [cache_write(b, directory) for b in on_the_fly_iterator(plan, None, workers, prefetch)]


def cached_iterator(paths, order=None):
    if order is None:
        order = range(len(paths))
    for k in order:
        yield cache_read(paths[k])
