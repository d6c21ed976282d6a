"""Input validation helpers used across the estimator and pipeline APIs."""

import numpy as np

from .errors import DataError


def check_feature_matrix(x, name="feature matrix"):
    """Validate a (frames, dim) array: 2-D, at least 1x1, all finite.

    Returns the array as float contiguous; raises DataError otherwise.
    """
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"{name} is empty: shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_embeddings(x, dim=None, name="embeddings"):
    """Validate a stack of embeddings, optionally against an expected dim.

    Accepts a single vector or an (n, dim) matrix; always returns a 2-D
    float64 array.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"{name} must be a vector or (n, dim) matrix, got shape {np.shape(x)}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contain non-finite values")
    if dim is not None and arr.shape[1] != dim:
        raise DataError(f"{name} have dim {arr.shape[1]}, expected {dim}")
    return arr


def check_vector(x, dim=None, name="vector"):
    """Validate a 1-D finite float64 vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise DataError(f"{name} must be 1-D and non-empty, got shape {np.shape(x)}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    if dim is not None and arr.shape[0] != dim:
        raise DataError(f"{name} has dim {arr.shape[0]}, expected {dim}")
    return arr


def check_square(m, dim=None, name="matrix"):
    """Validate a square finite float64 matrix."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DataError(f"{name} must be square, got shape {np.shape(m)}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    if dim is not None and arr.shape[0] != dim:
        raise DataError(f"{name} has dim {arr.shape[0]}, expected {dim}")
    return arr


def check_labels(y, n, name="labels"):
    """Validate a label sequence of length n; returns a list of str."""
    labels = [str(v) for v in y]
    if len(labels) != n:
        raise DataError(f"{name} length {len(labels)} does not match {n} samples")
    return labels


def check_positive(value, name):
    if not value > 0:
        raise DataError(f"{name} must be positive, got {value!r}")
    return value
