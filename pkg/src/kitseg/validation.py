"""Input validation helpers used by the estimators and pipeline entry points."""
import numpy as np

from .exceptions import GeometryError, LabelError, ShapeError


def check_volume(v, labels=False):
    from .volume_io import LabelVolume, Volume

    if not isinstance(v, Volume):
        raise TypeError(f"expected a Volume, got {type(v).__name__}")
    if labels and not isinstance(v, LabelVolume):
        raise TypeError("expected a LabelVolume")
    return v


def check_same_geometry(a, b):
    if a.shape != b.shape:
        raise GeometryError(f"geometry mismatch: {a.shape} vs {b.shape}")
    if hasattr(a, "spacing") and hasattr(b, "spacing") and a.spacing != b.spacing:
        raise GeometryError(f"spacing mismatch: {a.spacing} vs {b.spacing}")


def check_slab_arrays(X, y=None, n_channels=5):
    """Validate a slab batch ``X[N,5,H,W]`` and optional labels ``y[N,H,W]``.

    Returns float32 / uint8 contiguous copies.
    """
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != n_channels:
        raise ShapeError(f"X must have shape [N,{n_channels},H,W], got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("X contains no samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    X = np.ascontiguousarray(X, dtype=np.float32)
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ShapeError(f"y must have shape {(X.shape[0],) + X.shape[2:]}, got {y.shape}")
    if y.size and (y.min() < 0 or y.max() > 2):
        raise LabelError("labels must be in {0, 1, 2}")
    return X, np.ascontiguousarray(y, dtype=np.uint8)


def check_binary_mask(mask):
    mask = np.asarray(getattr(mask, "data", mask))
    return mask.astype(bool)
