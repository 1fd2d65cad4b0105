"""Binary and tabular file formats.

Tensor file (little-endian)::

    magic "QPIT" | u32 version=1 | u8 dtype (0=f64, 1=f32) | u8 ndim | ndim x u32 extents | payload

Checkpoint (little-endian)::

    magic "QPIC" | u32 version | u32 count | count x (u32 name length | UTF-8 name | tensor blob)

The IDX reader accepts the big-endian MNIST image layout (magic 0x00000803).
"""

import csv
import gzip
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"QPIT"
CHECKPOINT_MAGIC = b"QPIC"
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}

PathLike = Union[str, os.PathLike]


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array as a tensor blob (f32 stays f32, everything else becomes f64)."""
    arr = np.asarray(array)
    code = _DTYPE_CODES.get(arr.dtype, 0)
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    header = TENSOR_MAGIC + struct.pack("<IBB", TENSOR_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0):
    """Decode one tensor blob starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise DataError("not a tensor blob (bad magic)", hint="Expected a file written by qpi-explain.")
    version, code, ndim = struct.unpack_from("<IBB", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise DataError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise DataError(f"unknown tensor dtype code {code}")
    pos = offset + 10
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(buf):
        raise DataError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via temp file + rename so readers never see a partial file."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=str(target.parent), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, target)
        tmp_path = None
    finally:
        if tmp_path and os.path.exists(tmp_path):
            try:
                os.unlink(tmp_path)
            except OSError:
                pass


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, _ = decode_tensor(buf)
    return arr


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> None:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", version, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(encode_tensor(arr))
    atomic_write_bytes(path, out.getvalue())


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint file: {path}", hint="Produce one with 'qpi-explain train'.")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + length].decode("utf-8")
        pos += length
        tensors[name], pos = decode_tensor(buf, pos)
    return tensors


def read_idx_images(path: PathLike) -> np.ndarray:
    """Read an MNIST-style IDX image file (optionally gzipped) as float64 in [0, 1]."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16:
        raise DataError(f"IDX file too short: {path}")
    magic, count, rows, cols = struct.unpack_from(">IIII", buf, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad IDX magic 0x{magic:08x} in {path}", hint="Expected an MNIST image file (0x00000803).")
    data = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return data.reshape(count, rows, cols).astype(np.float64) / 255.0


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_json(path: PathLike, data: Any) -> None:
    text = json.dumps(data, indent=2, sort_keys=True, default=_json_default)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def read_json(path: PathLike) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _fmt(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (bool, np.bool_)):
        return int(bool(value))
    return value


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
