"""NIfTI-1 reading/writing and the sample I/O interface.

The parser is written directly against the 348-byte NIfTI-1 header layout.
Voxel data is stored on disk with x varying fastest, so a C-order reshape to
``(nz, ny, nx)`` yields the internal ``(z, y, x)`` axis order without copying.
qform/sform orientation fields are parsed but not used for geometry.
"""

import abc
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvalidHeader,
    NonFiniteVoxel,
    SampleNotFound,
    ShapeMismatch,
    TooManyClasses,
    TruncatedData,
    UnsupportedDatatype,
)
from .volume import ClassMap, Volume

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352

MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# datatype code -> (numpy base dtype, bitpix)
DATATYPES = {
    2: (np.dtype(np.uint8), 8),
    4: (np.dtype(np.int16), 16),
    8: (np.dtype(np.int32), 32),
    16: (np.dtype(np.float32), 32),
    64: (np.dtype(np.float64), 64),
    512: (np.dtype(np.uint16), 16),
}

DATATYPE_NAMES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64", 512: "uint16"}

NIFTI_UNITS_MM = 2

# (name, struct format) in on-disk order; offsets sum to 348
_HEADER_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p", "3f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern", "3f"),
    ("qoffset", "3f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_HEADER_FORMAT = "".join(fmt for _, fmt in _HEADER_FIELDS)
assert struct.calcsize("<" + _HEADER_FORMAT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    """Decoded NIfTI-1 header fields.

    ``extra`` keeps every remaining raw field (qform, sform, descrip, ...)
    so that nothing parsed is thrown away, even though geometry only uses
    ``pixdim``.
    """

    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endian: str = "<"
    extra: dict = field(default_factory=dict)

    @property
    def rank(self):
        return self.dim[0]

    @property
    def datatype_name(self):
        return DATATYPE_NAMES.get(self.datatype, f"code {self.datatype}")


def _unpack_header(raw, endian):
    values = struct.unpack(endian + _HEADER_FORMAT, raw[:HEADER_SIZE])
    fields = {}
    i = 0
    for name, fmt in _HEADER_FIELDS:
        count = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] != "s" else 1
        if count == 1:
            fields[name] = values[i]
        else:
            fields[name] = tuple(values[i : i + count])
        i += count
    return fields


def detect_endian(raw):
    """Return ``'<'`` or ``'>'`` depending on which byte order makes dim[0] sane."""
    (dim0,) = struct.unpack("<h", raw[40:42])
    if 1 <= dim0 <= 7:
        return "<"
    (dim0,) = struct.unpack(">h", raw[40:42])
    if 1 <= dim0 <= 7:
        return ">"
    raise InvalidHeader("dim[0] is outside [1, 7] in both byte orders")


def parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(HEADER_SIZE, len(raw))
    endian = detect_endian(raw)
    f = _unpack_header(raw, endian)
    if f["sizeof_hdr"] != HEADER_SIZE:
        raise InvalidHeader(f"sizeof_hdr is {f['sizeof_hdr']}, expected 348")
    if f["magic"] not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"bad NIfTI magic {f['magic']!r}")
    core = {
        "sizeof_hdr",
        "dim",
        "datatype",
        "bitpix",
        "pixdim",
        "vox_offset",
        "scl_slope",
        "scl_inter",
        "magic",
    }
    header = NiftiHeader(
        sizeof_hdr=f["sizeof_hdr"],
        dim=f["dim"],
        datatype=f["datatype"],
        bitpix=f["bitpix"],
        pixdim=f["pixdim"],
        vox_offset=f["vox_offset"],
        scl_slope=f["scl_slope"],
        scl_inter=f["scl_inter"],
        magic=f["magic"],
        endian=endian,
        extra={k: v for k, v in f.items() if k not in core},
    )
    _validate_header(header)
    return header


def _validate_header(header):
    rank = header.dim[0]
    used = header.dim[1 : rank + 1]
    if any(d < 1 for d in used):
        raise InvalidHeader(f"non-positive extent in dim {header.dim}")
    if header.datatype not in DATATYPES:
        raise UnsupportedDatatype(header.datatype)
    expected_bits = DATATYPES[header.datatype][1]
    if header.bitpix != expected_bits:
        raise InvalidHeader(
            f"bitpix {header.bitpix} inconsistent with datatype {header.datatype} "
            f"(expected {expected_bits})"
        )
    if rank > 3 and any(d != 1 for d in header.dim[4 : rank + 1]):
        raise InvalidHeader(f"only 2D/3D images are supported, got dim {header.dim}")
    if header.magic == MAGIC_SINGLE and header.vox_offset < SINGLE_FILE_OFFSET:
        raise InvalidHeader(f"vox_offset {header.vox_offset} < 352 in single-file NIfTI")


def _maybe_gunzip(data):
    data = bytes(data)
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def read_nifti(data, image_data=None):
    """Parse NIfTI-1 bytes into ``(NiftiHeader, Volume)``.

    ``data`` may be gzip-compressed.  For a paired ``.hdr``/``.img`` file
    (magic ``ni1``) pass the image file's bytes as ``image_data``.

    Float32 data without intensity scaling stays float32 (so a written
    volume reads back bit-identically); everything else is returned as
    float64.
    """
    raw = _maybe_gunzip(data)
    header = parse_header(raw)

    if header.magic == MAGIC_PAIR:
        if image_data is None:
            raise InvalidHeader("paired NIfTI header (ni1) needs the .img data")
        payload = _maybe_gunzip(image_data)
    else:
        payload = raw
    offset = int(header.vox_offset)

    rank = header.dim[0]
    nx, ny, nz = (header.dim[i] if i <= rank else 1 for i in (1, 2, 3))
    base, bitpix = DATATYPES[header.datatype]
    count = nx * ny * nz
    nbytes = count * bitpix // 8
    available = max(len(payload) - offset, 0)
    if available < nbytes:
        raise TruncatedData(nbytes, available)

    dtype = base.newbyteorder(header.endian)
    flat = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)

    if header.scl_slope != 0 and not (header.scl_slope == 1 and header.scl_inter == 0):
        values = flat.astype(np.float64) * header.scl_slope + header.scl_inter
    elif header.datatype == 16:
        values = flat.astype(np.float32)
    else:
        values = flat.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteVoxel("voxel data contains NaN or Inf")

    sx, sy, sz = (float(header.pixdim[i]) for i in (1, 2, 3))
    if rank <= 2:
        arr = values.reshape(ny, nx)
        spacing = (sy, sx)
    else:
        arr = values.reshape(nz, ny, nx)
        spacing = (sz, sy, sx)
    spacing = tuple(s if s > 0 else 1.0 for s in spacing)
    return header, Volume(arr.copy(), spacing)


def write_nifti(image, compress=False):
    """Serialize a Volume (float32) or ClassMap (uint8) as single-file NIfTI-1."""
    if isinstance(image, ClassMap):
        if image.n_classes > 256:
            raise TooManyClasses(f"{image.n_classes} classes do not fit in uint8")
        datatype, payload = 2, image.data.astype("<u1")
    else:
        datatype, payload = 16, np.asarray(image.data).astype("<f4")
    bitpix = DATATYPES[datatype][1]

    if image.ndim == 2:
        ny, nx = image.shape
        sy, sx = image.spacing
        dim = (2, nx, ny, 1, 1, 1, 1, 1)
        pixdim = (1.0, sx, sy, 1.0, 0.0, 0.0, 0.0, 0.0)
    else:
        nz, ny, nx = image.shape
        sz, sy, sx = image.spacing
        dim = (3, nx, ny, nz, 1, 1, 1, 1)
        pixdim = (1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)

    fields = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": b"r",
        "dim_info": 0,
        "dim": dim,
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0,
        "datatype": datatype,
        "bitpix": bitpix,
        "slice_start": 0,
        "pixdim": pixdim,
        "vox_offset": float(SINGLE_FILE_OFFSET),
        "scl_slope": 0.0,
        "scl_inter": 0.0,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": NIFTI_UNITS_MM,
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": b"medsegpipe",
        "aux_file": b"",
        "qform_code": 0,
        "sform_code": 0,
        "quatern": (0.0, 0.0, 0.0),
        "qoffset": (0.0, 0.0, 0.0),
        "srow_x": (0.0, 0.0, 0.0, 0.0),
        "srow_y": (0.0, 0.0, 0.0, 0.0),
        "srow_z": (0.0, 0.0, 0.0, 0.0),
        "intent_name": b"",
        "magic": MAGIC_SINGLE,
    }
    values = []
    for name, _ in _HEADER_FIELDS:
        v = fields[name]
        values.extend(v if isinstance(v, tuple) else (v,))
    header = struct.pack("<" + _HEADER_FORMAT, *values)
    out = header + b"\x00\x00\x00\x00" + payload.tobytes(order="C")
    if compress:
        return gzip.compress(out, mtime=0)
    return out


def load_nifti(path):
    """Read a ``.nii``, ``.nii.gz`` or ``.hdr``/``.img`` pair from disk."""
    path = Path(path)
    data = path.read_bytes()
    image_data = None
    if path.suffix == ".hdr":
        image_data = path.with_suffix(".img").read_bytes()
    return read_nifti(data, image_data)


def save_nifti(path, image):
    path = Path(path)
    compress = path.name.endswith(".gz")
    _atomic_write(path, write_nifti(image, compress=compress))


def _atomic_write(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class SampleIO(abc.ABC):
    """Pluggable source of samples for the pipeline.

    Implementations return images as :class:`Volume` and labels as
    :class:`ClassMap`; format-specific handling stays inside the interface.
    """

    n_classes: int

    @abc.abstractmethod
    def sample_ids(self):
        """All sample ids available to this interface, sorted."""

    @abc.abstractmethod
    def load_sample(self, sample_id):
        """Return ``(Volume, ClassMap or None)``."""

    @abc.abstractmethod
    def save_prediction(self, sample_id, labels):
        """Persist a predicted ClassMap."""

    def has_labels(self, sample_id):
        return self.load_sample(sample_id)[1] is not None


class NiftiSampleIO(SampleIO):
    """Directory layout ``<data_dir>/<id>/imaging.nii[.gz]`` (+ ``segmentation.nii[.gz]``).

    Predictions go to ``<output_dir>/<id>.nii``.
    """

    image_names = ("imaging.nii", "imaging.nii.gz")
    label_names = ("segmentation.nii", "segmentation.nii.gz")

    def __init__(self, data_dir, output_dir, n_classes):
        self.data_dir = Path(data_dir)
        self.output_dir = Path(output_dir)
        self.n_classes = n_classes

    def _find(self, sample_id, names):
        for name in names:
            p = self.data_dir / sample_id / name
            if p.is_file():
                return p
        return None

    def sample_ids(self):
        if not self.data_dir.is_dir():
            raise SampleNotFound(f"data directory {self.data_dir} does not exist")
        return sorted(
            p.name
            for p in self.data_dir.iterdir()
            if p.is_dir() and self._find(p.name, self.image_names) is not None
        )

    def load_sample(self, sample_id):
        image_path = self._find(sample_id, self.image_names)
        if image_path is None:
            raise SampleNotFound(f"no imaging.nii for sample '{sample_id}' under {self.data_dir}")
        _, image = load_nifti(image_path)
        label_path = self._find(sample_id, self.label_names)
        if label_path is None:
            return image, None
        _, raw = load_nifti(label_path)
        if raw.shape != image.shape:
            raise ShapeMismatch(
                f"sample '{sample_id}': image shape {image.shape} vs segmentation {raw.shape}"
            )
        return image, ClassMap(raw.data, image.spacing, self.n_classes)

    def has_labels(self, sample_id):
        return self._find(sample_id, self.label_names) is not None

    def prediction_path(self, sample_id):
        return self.output_dir / f"{sample_id}.nii"

    def save_prediction(self, sample_id, labels):
        save_nifti(self.prediction_path(sample_id), labels)
