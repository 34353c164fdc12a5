"""Raw little-endian array files with size checks."""
import numpy as np

from .errors import MalformedHeaderError, TruncatedDataError


def write_array(path, arr, dtype):
    np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tofile(path)


def read_array(path, dtype, shape):
    dtype = np.dtype(dtype)
    expected = int(np.prod(shape)) * dtype.itemsize
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise MalformedHeaderError(f"cannot read {path}: {e}") from e
    if len(raw) != expected:
        raise TruncatedDataError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
