"""Input validation helpers."""

import numpy as np

from .exceptions import InvalidData, InvalidShape


def as_float_array(a, name="array", ndim=None, allow_empty=False):
    """Convert ``a`` to a finite float64 array.

    Raises
    ------
    InvalidData
        If ``a`` is empty (unless ``allow_empty``) or has non-finite entries.
    InvalidShape
        If ``ndim`` is given and does not match.
    """
    arr = np.asarray(a, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InvalidShape(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise InvalidData(f"{name}: empty input")
    if not np.all(np.isfinite(arr)):
        raise InvalidData(f"{name}: contains non-finite entries")
    return arr


def as_matrix(a, name="matrix"):
    """Finite 2-D float64 array; 1-D input becomes a single column."""
    arr = as_float_array(a, name)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidShape(f"{name}: expected 2-D array, got shape {arr.shape}")
    return arr


def as_rows(a, width, name="input"):
    """Return ``a`` as an (N, width) matrix.

    A 1-D vector of length ``width`` is treated as a single row, and a 1-D
    vector of other length is treated as N rows when ``width == 1``.
    """
    arr = as_float_array(a, name)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[None, :] if arr.shape[0] == width else arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise InvalidShape(f"{name}: expected {width} columns, got shape {arr.shape}")
    return arr


def check_same_length(*arrays, names=None):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        label = ", ".join(names) if names else "arrays"
        raise InvalidShape(f"{label}: inconsistent lengths {sorted(lengths)}")
