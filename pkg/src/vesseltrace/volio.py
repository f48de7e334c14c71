"""Volume and tensor-field file I/O.

Two interchangeable on-disk forms:

* NIfTI-1 (.nii / .nii.gz), float32, x-fastest as the standard mandates.
  The writer emits a minimal single-file header (sform = diag(spacing));
  the reader handles the common scalar datatypes and scl_slope/scl_inter.
  Gzip members are written with mtime=0 so identical data gives identical
  bytes.
* A headered raw format: ASCII header lines (dims, spacing, dtype), then a
  little-endian payload. Tensor fields are 4D with 6 components per voxel,
  component order xx, xy, xz, yy, yz, zz.
"""

from __future__ import annotations

import gzip
import io
import struct
from pathlib import Path

import numpy as np

from .volume import ScalarVolume, TensorFieldLE

__all__ = [
    "read_volume",
    "write_volume",
    "read_tensor_field",
    "write_tensor_field",
]

_RAW_MAGIC = "vesseltrace-raw v1"

# NIfTI-1 datatype codes we accept.
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def _write_bytes(path: Path, blob: bytes) -> None:
    if path.name.endswith(".gz"):
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", fileobj=buf, mode="wb", mtime=0) as gz:
            gz.write(blob)
        blob = buf.getvalue()
    path.write_bytes(blob)


def _read_bytes(path: Path) -> bytes:
    blob = path.read_bytes()
    if path.name.endswith(".gz"):
        blob = gzip.decompress(blob)
    return blob


def _nifti_header(dims, spacing, ncomp: int) -> bytes:
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    ndim = 3 if ncomp == 1 else 4
    dim = [ndim, dims[0], dims[1], dims[2], 1, 1, 1, 1]
    if ncomp != 1:
        dim[4] = ncomp
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)    # scl_inter
    struct.pack_into("<b", hdr, 123, 2)      # xyzt_units: mm
    struct.pack_into("<h", hdr, 254, 1)      # sform_code
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write_nifti(path: Path, data: np.ndarray, spacing) -> None:
    ncomp = 1 if data.ndim == 3 else data.shape[3]
    payload = np.asarray(data, dtype="<f4").ravel(order="F").tobytes()
    hdr = _nifti_header(data.shape[:3], spacing, ncomp)
    _write_bytes(path, hdr + b"\x00\x00\x00\x00" + payload)


def _read_nifti(path: Path):
    raw = _read_bytes(path)
    if len(raw) < 352:
        raise ValueError("%s: truncated NIfTI file" % path)
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != 348:
        raise ValueError("%s: not a little-endian NIfTI-1 file" % path)
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise ValueError("%s: bad NIfTI magic %r" % (path, raw[344:348]))
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise ValueError("%s: unsupported dimensionality %d" % (path, ndim))
    dims = dim[1:4]
    ncomp = dim[4] if ndim == 4 else 1
    dtype_code = struct.unpack_from("<h", raw, 70)[0]
    if dtype_code not in _NIFTI_DTYPES:
        raise ValueError("%s: unsupported NIfTI datatype %d" % (path, dtype_code))
    np_dtype = _NIFTI_DTYPES[dtype_code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    slope = struct.unpack_from("<f", raw, 112)[0]
    inter = struct.unpack_from("<f", raw, 116)[0]
    count = dims[0] * dims[1] * dims[2] * ncomp
    flat = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<"),
                         count=count, offset=vox_offset)
    shape = tuple(dims) + ((ncomp,) if ncomp != 1 else ())
    data = flat.reshape(shape, order="F").astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        scale = slope if slope != 0.0 else 1.0
        data = data * scale + inter
    return data, spacing


def _write_raw(path: Path, data: np.ndarray, spacing, dtype: str) -> None:
    if dtype not in ("float32", "float64"):
        raise ValueError("raw dtype must be float32 or float64, got %r" % dtype)
    payload = np.asarray(data, dtype="<" + ("f4" if dtype == "float32" else "f8"))
    payload = payload.ravel(order="F").tobytes()
    dims = " ".join(str(d) for d in data.shape)
    header = (
        "%s\n" % _RAW_MAGIC
        + "dims %s\n" % dims
        + "spacing %.9g %.9g %.9g\n" % tuple(spacing)
        + "dtype %s\n" % dtype
        + "order x-fastest\n"
        + "payload %d\n" % len(payload)
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def _read_raw(path: Path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").strip()
        if magic != _RAW_MAGIC:
            raise ValueError("%s: bad raw magic %r" % (path, magic))
        fields = {}
        while True:
            line = fh.readline().decode("ascii").strip()
            key, _, value = line.partition(" ")
            fields[key] = value
            if key == "payload":
                break
        shape = tuple(int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        dtype = "<f4" if fields["dtype"] == "float32" else "<f8"
        nbytes = int(fields["payload"])
        payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise ValueError("%s: truncated payload" % path)
    flat = np.frombuffer(payload, dtype=dtype)
    return flat.reshape(shape, order="F").astype(np.float64), spacing


def _is_nifti(path: Path) -> bool:
    name = path.name
    return name.endswith(".nii") or name.endswith(".nii.gz")


def write_volume(path, v: ScalarVolume, dtype: str = "float32") -> None:
    """Write a scalar volume as NIfTI (.nii/.nii.gz) or headered raw (.vraw)."""
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, v.data, v.spacing)
    else:
        _write_raw(path, v.data, v.spacing, dtype)


def read_volume(path) -> ScalarVolume:
    """Read a scalar volume; the format is chosen by file extension."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if _is_nifti(path):
        data, spacing = _read_nifti(path)
    else:
        data, spacing = _read_raw(path)
    if data.ndim != 3:
        raise ValueError("%s holds a %dD array, expected a scalar volume"
                         % (path, data.ndim))
    return ScalarVolume(data=data, spacing=spacing)


def write_tensor_field(path, tf: TensorFieldLE, dtype: str = "float32") -> None:
    """Write a tensor field as a 4D volume (6 components per voxel)."""
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, tf.data, tf.spacing)
    else:
        _write_raw(path, tf.data, tf.spacing, dtype)


def read_tensor_field(path) -> TensorFieldLE:
    """Read a 4D 6-component tensor field."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if _is_nifti(path):
        data, spacing = _read_nifti(path)
    else:
        data, spacing = _read_raw(path)
    if data.ndim != 4 or data.shape[3] != 6:
        raise ValueError("%s does not hold a 6-component tensor field" % path)
    return TensorFieldLE(data=data, spacing=spacing)
