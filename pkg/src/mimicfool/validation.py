"""Input validation helpers shared by the estimators and the harness."""

from __future__ import annotations

import numpy as np

_RANGE_TOL = 1e-9


def check_image_u8(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a ``(H, W, 3)`` uint8 array or raise ``ValueError``."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    if not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"{name}: expected numeric values, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"{name}: byte values must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
    if np.issubdtype(arr.dtype, np.floating) and not np.all(arr == np.round(arr)):
        raise ValueError(f"{name}: byte image has non-integer values")
    return arr.astype(np.uint8)


def check_images_u8(images, name: str = "X") -> np.ndarray:
    """Stack of byte images, shape ``(N, H, W, 3)``."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"{name}: expected a non-empty (N, H, W, 3) stack, got {arr.shape}")
    return np.stack([check_image_u8(a, f"{name}[{i}]") for i, a in enumerate(arr)])


def check_in_range(values: np.ndarray, lo: float, hi: float, name: str) -> None:
    vmin, vmax = float(np.min(values)), float(np.max(values))
    if not (np.isfinite(vmin) and np.isfinite(vmax)):
        raise ValueError(f"{name}: non-finite values")
    if vmin < lo - _RANGE_TOL:
        raise ValueError(f"{name}: value {vmin} below allowed minimum {lo}")
    if vmax > hi + _RANGE_TOL:
        raise ValueError(f"{name}: value {vmax} above allowed maximum {hi}")


def check_feature(feature, dim: int, name: str = "feature") -> np.ndarray:
    arr = np.asarray(feature.data if hasattr(feature, "data") else feature, dtype=np.float64)
    arr = arr.reshape(-1)
    if arr.size != dim:
        raise ValueError(f"{name}: expected length {dim}, got {arr.size}")
    return arr


def check_features(features, dim: int, name: str = "F") -> np.ndarray:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[1] != dim:
        raise ValueError(f"{name}: expected feature dimension {dim}, got {arr.shape[1]}")
    return arr
