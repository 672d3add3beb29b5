"""Input checks shared by the estimator API."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.utils import check_array


def check_images(X, input_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Accept ``[n, H, W]`` or ``[n, 1, H, W]``; return finite float32 ``[n, 1, H, W]``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images shaped [n, H, W] or [n, 1, H, W], got {X.shape}")
    if input_size is not None and X.shape[2:] != tuple(input_size):
        raise ValueError(f"images are {X.shape[2]}x{X.shape[3]}, estimator was fitted on "
                         f"{input_size[0]}x{input_size[1]}")
    return X


def check_masks(y, images: np.ndarray) -> np.ndarray:
    """Binary ``[n, H, W]`` masks matching ``images``; returned as uint8."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    expected = (images.shape[0],) + images.shape[2:]
    if y.shape != expected:
        raise ValueError(f"masks shaped {y.shape} do not match images {images.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary (0 = background, 1 = foreground)")
    return y.astype(np.uint8)
