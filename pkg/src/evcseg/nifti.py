"""NIfTI-1 reading and writing, plus a tiny raw format for tests.

Only the single-precision slice of NIfTI-1 that this pipeline needs:
datatypes uint8/int16/int32/float32/float64, gzip detected by magic bytes
rather than extension, transparent byte-swapped (big-endian) headers, and
the sform-over-qform affine precedence. Values come back as float64 with
scl_slope/scl_inter applied whenever slope is nonzero.

The raw format is 12 bytes of little-endian uint32 shape followed by
float32 voxels, x fastest. It exists so tests can build files by hand.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    GeometryError,
    TruncatedFileError,
    UnsupportedDatatypeError,
)
from .volume import LabelMask, ProbMap, Volume

# --------------------------------------------------------------------------
# header layout
# --------------------------------------------------------------------------

HEADER_SIZE = 348
GZIP_MAGIC = b"\x1f\x8b"
SWAPPED_SIZEOF_HDR = 1543569408  # 348 seen through the wrong byte order

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

HEADER_DTYPE_LE = np.dtype([(f[0], "<" + f[1], *f[2:]) for f in _HEADER_FIELDS])
HEADER_DTYPE_BE = np.dtype([(f[0], ">" + f[1], *f[2:]) for f in _HEADER_FIELDS])
assert HEADER_DTYPE_LE.itemsize == HEADER_SIZE

# NIfTI-1 datatype code -> numpy dtype (little endian; flipped when swapped)
DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
_DTYPE_CODES = {np.dtype(d.str[1:]): code for code, d in DATATYPES.items()}


@dataclass
class NiftiHeader:
    """The header fields this reader acts on, already byte-order sorted."""

    dim: np.ndarray
    datatype: int
    bitpix: int
    pixdim: np.ndarray
    vox_offset: int
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srow: np.ndarray
    magic: bytes
    byteswapped: bool

    @property
    def ndim(self) -> int:
        return int(self.dim[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dim[1 : 1 + self.ndim])

    def affine(self) -> np.ndarray:
        """sform when present, else qform, else pixdim on the diagonal."""
        if self.sform_code > 0:
            aff = np.eye(4)
            aff[:3] = self.srow
            return aff
        if self.qform_code > 0:
            return self._qform_affine()
        aff = np.eye(4)
        for a in range(3):
            aff[a, a] = self.pixdim[1 + a] if self.pixdim[1 + a] != 0 else 1.0
        return aff

    def _qform_affine(self) -> np.ndarray:
        b, c, d = (float(q) for q in self.quatern)
        a2 = 1.0 - (b * b + c * c + d * d)
        a = np.sqrt(a2) if a2 > 0 else 0.0
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
            ]
        )
        qfac = -1.0 if self.pixdim[0] < 0 else 1.0
        scale = np.array([self.pixdim[1], self.pixdim[2], self.pixdim[3] * qfac])
        aff = np.eye(4)
        aff[:3, :3] = rot * scale
        aff[:3, 3] = self.qoffset
        return aff


def _parse_header(buf: bytes, path) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(
            f"{path}: file holds {len(buf)} bytes, a NIfTI-1 header needs {HEADER_SIZE}"
        )
    raw = np.frombuffer(buf[:HEADER_SIZE], dtype=HEADER_DTYPE_LE)[0]
    swapped = False
    if int(raw["sizeof_hdr"]) != HEADER_SIZE:
        raw_be = np.frombuffer(buf[:HEADER_SIZE], dtype=HEADER_DTYPE_BE)[0]
        if int(raw_be["sizeof_hdr"]) == HEADER_SIZE:
            raw, swapped = raw_be, True
        else:
            raise BadMagicError(
                f"{path}: sizeof_hdr is {int(raw['sizeof_hdr'])}, not a NIfTI-1 file"
            )
    magic = bytes(raw["magic"])
    if magic not in (b"n+1", b"ni1"):
        raise BadMagicError(f"{path}: magic {magic!r} is not 'n+1' or 'ni1'")
    ndim = int(raw["dim"][0])
    if not 1 <= ndim <= 7:
        raise GeometryError(f"{path}: dim[0] must be 1..7, got {ndim}")
    if any(int(d) < 1 for d in raw["dim"][1 : 1 + ndim]):
        raise GeometryError(f"{path}: non-positive axis length in dim")
    return NiftiHeader(
        dim=np.array(raw["dim"], dtype=np.int64),
        datatype=int(raw["datatype"]),
        bitpix=int(raw["bitpix"]),
        pixdim=np.array(raw["pixdim"], dtype=np.float64),
        vox_offset=int(raw["vox_offset"]),
        scl_slope=float(raw["scl_slope"]),
        scl_inter=float(raw["scl_inter"]),
        qform_code=int(raw["qform_code"]),
        sform_code=int(raw["sform_code"]),
        quatern=(float(raw["quatern_b"]), float(raw["quatern_c"]), float(raw["quatern_d"])),
        qoffset=(float(raw["qoffset_x"]), float(raw["qoffset_y"]), float(raw["qoffset_z"])),
        srow=np.stack([raw["srow_x"], raw["srow_y"], raw["srow_z"]]).astype(np.float64),
        magic=magic,
        byteswapped=swapped,
    )


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    buf = head + rest
    if head == GZIP_MAGIC:
        return gzip.decompress(buf)
    return buf


def _read_array(path) -> tuple[np.ndarray, NiftiHeader]:
    path = Path(path)
    buf = _read_bytes(path)
    hdr = _parse_header(buf, path)

    if hdr.magic == b"ni1":
        # header/payload pair: voxels live in the sibling .img file
        img = path.with_suffix(".img")
        if not img.exists():
            raise DataError(f"{path}: header pair is missing its image file {img}")
        buf = _read_bytes(img)
        offset = hdr.vox_offset
    else:
        offset = max(hdr.vox_offset, HEADER_SIZE)

    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatypeError(
            f"{path}: datatype code {hdr.datatype} is not supported "
            f"(supported: {sorted(DATATYPES)})"
        )
    dtype = DATATYPES[hdr.datatype]
    if hdr.byteswapped:
        dtype = dtype.newbyteorder(">")

    count = int(np.prod(hdr.shape))
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFileError(
            f"{path}: payload needs {need} bytes for shape {hdr.shape}, file has {len(buf)}"
        )
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(hdr.shape, order="F").astype(np.float64)

    slope, inter = hdr.scl_slope, hdr.scl_inter
    if slope != 0.0 and np.isfinite(slope) and (slope, inter) != (1.0, 0.0):
        data = data * slope + inter
    return data, hdr


def _squeeze_to_3d(data: np.ndarray, hdr: NiftiHeader, path) -> np.ndarray:
    if data.ndim == 3:
        return data
    extra = data.shape[3:]
    if all(s == 1 for s in extra):
        return data.reshape(data.shape[:3])
    raise GeometryError(
        f"{path}: expected a 3D volume, file is {data.shape} (use read_probmap for 4D)"
    )


def read_nifti(path) -> Volume:
    """Read a 3D NIfTI-1 volume (values float64, scaling applied)."""
    data, hdr = _read_array(path)
    return Volume(data=_squeeze_to_3d(data, hdr, path), affine=hdr.affine())


def read_mask(path) -> LabelMask:
    """Read a NIfTI-1 file that must contain only 0s and 1s."""
    data, hdr = _read_array(path)
    data = _squeeze_to_3d(data, hdr, path)
    if not np.isin(data, (0.0, 1.0)).all():
        raise DataError(f"{path}: mask file contains values other than 0 and 1")
    return LabelMask(data=data.astype(np.uint8), affine=hdr.affine())


def read_probmap(path) -> ProbMap:
    """Read a 4D NIfTI-1 probability map; the 4th axis holds the labels."""
    data, hdr = _read_array(path)
    if data.ndim != 4:
        raise GeometryError(f"{path}: expected 4D probability map, file is {data.shape}")
    return ProbMap(data=np.moveaxis(data, 3, 0), affine=hdr.affine())


def read_header(path) -> NiftiHeader:
    """Parse just the header, without touching the payload."""
    path = Path(path)
    return _parse_header(_read_bytes(path), path)


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------


def _build_header(shape4, affine, dtype: np.dtype) -> bytes:
    raw = np.zeros((), dtype=HEADER_DTYPE_LE)
    raw["sizeof_hdr"] = HEADER_SIZE
    raw["regular"] = b"r"
    ndim = 4 if shape4[3] > 1 else 3
    raw["dim"][0] = ndim
    raw["dim"][1:5] = shape4
    raw["dim"][5:] = 1
    raw["datatype"] = _DTYPE_CODES[np.dtype(dtype)]
    raw["bitpix"] = np.dtype(dtype).itemsize * 8
    raw["pixdim"][0] = 1.0
    raw["pixdim"][1:4] = np.linalg.norm(np.asarray(affine)[:3, :3], axis=0)
    raw["pixdim"][4] = 1.0
    raw["vox_offset"] = 352.0
    raw["scl_slope"] = 1.0
    raw["scl_inter"] = 0.0
    raw["sform_code"] = 1
    raw["qform_code"] = 0
    raw["srow_x"] = affine[0]
    raw["srow_y"] = affine[1]
    raw["srow_z"] = affine[2]
    raw["magic"] = b"n+1"
    return raw.tobytes() + b"\x00" * 4  # no header extensions


def write_nifti(obj, path, dtype=None) -> None:
    """Write a Volume, LabelMask, or ProbMap as single-file NIfTI-1.

    Intensities default to float32 and masks to uint8; `dtype` may name any
    supported datatype instead. Output is gzipped when the path ends in .gz.

    Args:
        obj: Volume, LabelMask, or ProbMap.
        path: destination; '.gz' suffix selects gzip.
        dtype: optional numpy dtype overriding the default on-disk type.
    """
    if isinstance(obj, LabelMask):
        data, default = obj.data, np.uint8
    elif isinstance(obj, ProbMap):
        data, default = np.moveaxis(obj.data, 0, 3), np.float32
    elif isinstance(obj, Volume):
        data, default = obj.data, np.float32
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as NIfTI")

    dtype = np.dtype(dtype if dtype is not None else default)
    if dtype not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(
            f"cannot write datatype {dtype}; supported: {sorted(_DTYPE_CODES)}"
        )
    shape4 = list(data.shape[:3]) + [data.shape[3] if data.ndim == 4 else 1]
    payload = np.asfortranarray(data.astype(dtype.newbyteorder("<"))).tobytes(order="F")
    blob = _build_header(shape4, obj.affine, dtype) + payload

    path = str(path)
    if path.endswith(".gz"):
        # fixed mtime, no embedded filename: identical volumes, identical files
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
                fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


# --------------------------------------------------------------------------
# raw test format
# --------------------------------------------------------------------------


def write_raw_volume(v: Volume, path) -> None:
    """Write shape as 3 little-endian uint32 words, then float32 voxels, x fastest."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *v.shape))
        fh.write(np.asfortranarray(v.data.astype("<f4")).tobytes(order="F"))


def read_raw_volume(path) -> Volume:
    """Read the raw test format; the grid is 1 mm isotropic at the origin."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise TruncatedFileError(f"{path}: raw header needs 12 bytes, file has {len(buf)}")
    shape = struct.unpack("<3I", buf[:12])
    count = int(np.prod(shape))
    if len(buf) < 12 + 4 * count:
        raise TruncatedFileError(
            f"{path}: raw payload needs {4 * count} bytes for shape {shape}, "
            f"file has {len(buf) - 12}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=12)
    return Volume(data=data.reshape(shape, order="F").astype(np.float64))
