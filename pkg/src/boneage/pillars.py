"""Feature pillars: the backbone feature vector under each projected ROI center."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ProjectionError(IndexError):
    pass


def project_position(center, s: int, map_shape: tuple[int, int] | None = None) -> tuple[int, int]:
    """Map an image-space center (I, J) to feature-map cell (floor(I/s), floor(J/s))."""
    if s <= 0:
        raise ValueError(f"down-sampling factor must be positive, got {s}")
    I, J = int(center[0]), int(center[1])
    i, j = I // s, J // s
    if map_shape is not None:
        h, w = map_shape
        if not (0 <= i < h and 0 <= j < w):
            raise ProjectionError(f"center ({I}, {J}) projects to ({i}, {j}), outside the {h}x{w} feature map")
    return i, j


def project_centers(centers: np.ndarray, s: int, map_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 2) integer centers; returns row and column index arrays."""
    centers = np.asarray(centers)
    if np.any(centers < 0):
        raise ProjectionError("ROI centers must be non-negative")
    idx = centers.astype(np.int64) // s
    i, j = idx[..., 0], idx[..., 1]
    h, w = map_shape
    bad = (i >= h) | (j >= w)
    if np.any(bad):
        where = tuple(np.argwhere(bad)[0])
        raise ProjectionError(f"center {tuple(centers[where])} at {where} projects outside the {h}x{w} feature map")
    return i, j


def extract_pillars(feature_map: Tensor, centers: np.ndarray, s: int = 16) -> Tensor:
    """Gather (batch, N, C) pillars from a (batch, C, h, w) map at (batch, N, 2) centers."""
    if feature_map.ndim != 4:
        raise T.ShapeError("extract_pillars", f"expected (batch, C, h, w), got {feature_map.shape}")
    centers = np.asarray(centers)
    if centers.ndim != 3 or centers.shape[0] != feature_map.shape[0] or centers.shape[2] != 2:
        raise T.ShapeError("extract_pillars", f"centers {centers.shape} do not match map {feature_map.shape}")
    i, j = project_centers(centers, s, feature_map.shape[2:])
    b = np.arange(centers.shape[0])[:, None]
    # advanced indices split by a slice: result axes are (batch, N, C)
    return feature_map[b, :, i, j]


def augment_pillars(raw: Tensor, gender, centers: np.ndarray, image_size: tuple[int, int]) -> Tensor:
    """Append [gender, I/H, J/W] to every pillar, giving f = C + 3 columns."""
    centers = np.asarray(centers, dtype=np.float64)
    B, N = raw.shape[:2]
    gender = np.broadcast_to(np.asarray(gender, dtype=np.float64).reshape(-1, 1), (B, N))
    H, W = image_size
    extra = np.stack([gender, centers[..., 0] / H, centers[..., 1] / W], axis=-1)
    return T.concat([raw, Tensor(extra)], axis=-1)
