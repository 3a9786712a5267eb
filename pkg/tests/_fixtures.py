"""Test helpers shared across modules (hand-built files, tiny configs)."""

import struct

import numpy as np

from medsegpipe.config import PipelineConfig
from medsegpipe.nifti_io import SampleIO
from medsegpipe.synthetic import make_phantom

# NIfTI-1 field offsets, typed in from the format description rather than
# taken from the package, so the fixture is an independent oracle.
OFF_SIZEOF_HDR = 0
OFF_DIM = 40
OFF_DATATYPE = 70
OFF_BITPIX = 72
OFF_PIXDIM = 76
OFF_VOX_OFFSET = 108
OFF_SCL_SLOPE = 112
OFF_SCL_INTER = 116
OFF_MAGIC = 344

DTYPES = {2: ("B", 8), 4: ("h", 16), 8: ("i", 32), 16: ("f", 32), 64: ("d", 64), 512: ("H", 16)}


def nifti_bytes(
    values,
    dims=(2, 2, 2),
    datatype=16,
    pixdim=(1.0, 1.0, 1.0),
    endian="<",
    slope=0.0,
    inter=0.0,
    magic=b"n+1\x00",
    vox_offset=352,
):
    """Single-file NIfTI-1 bytes; ``values`` in file order (x fastest)."""
    code, bitpix = DTYPES[datatype]
    hdr = bytearray(vox_offset)
    struct.pack_into(endian + "i", hdr, OFF_SIZEOF_HDR, 348)
    dim = [len(dims), *dims] + [1] * (7 - len(dims))
    struct.pack_into(endian + "8h", hdr, OFF_DIM, *dim)
    struct.pack_into(endian + "h", hdr, OFF_DATATYPE, datatype)
    struct.pack_into(endian + "h", hdr, OFF_BITPIX, bitpix)
    pd = [1.0, *pixdim] + [1.0] * (7 - len(pixdim))
    struct.pack_into(endian + "8f", hdr, OFF_PIXDIM, *pd)
    struct.pack_into(endian + "f", hdr, OFF_VOX_OFFSET, float(vox_offset))
    struct.pack_into(endian + "f", hdr, OFF_SCL_SLOPE, slope)
    struct.pack_into(endian + "f", hdr, OFF_SCL_INTER, inter)
    hdr[OFF_MAGIC : OFF_MAGIC + 4] = magic
    data = struct.pack(endian + f"{len(values)}{code}", *values)
    return bytes(hdr) + data


def fixture_222(endian="<"):
    """The 2x2x2 float32 ramp 0..7 with unit spacing: 352 + 32 bytes."""
    return nifti_bytes([float(i) for i in range(8)], endian=endian)


def tiny_config(tmp_path, **overrides):
    values = dict(
        data_dir=tmp_path / "data",
        output_dir=tmp_path / "out",
        n_classes=2,
        patch_shape=(8, 8, 8),
        batch_size=2,
        epochs=2,
        workers=1,
    )
    values.update(overrides)
    return PipelineConfig(**values).validate()


def random_onehot(rng, n_classes, shape):
    labels = rng.integers(0, n_classes, size=shape)
    return (labels[np.newaxis] == np.arange(n_classes).reshape((-1,) + (1,) * len(shape))).astype(
        np.float64
    )


def random_scores(rng, n_classes, shape):
    z = rng.normal(size=(n_classes,) + tuple(shape))
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


class MemorySampleIO(SampleIO):
    """Samples held in a dict: ``{id: (Volume, ClassMap or None)}``."""

    def __init__(self, samples, n_classes):
        self.samples = dict(samples)
        self.n_classes = n_classes
        self.saved = {}

    def sample_ids(self):
        return sorted(self.samples)

    def load_sample(self, sample_id):
        return self.samples[sample_id]

    def save_prediction(self, sample_id, labels):
        self.saved[sample_id] = labels


def phantom_io(count, shape=(16, 16, 16), n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    samples = {}
    for i in range(count):
        image, labels, _ = make_phantom(rng, shape, n_classes)
        samples[f"case_{i:03d}"] = (image, labels)
    return MemorySampleIO(samples, n_classes)
