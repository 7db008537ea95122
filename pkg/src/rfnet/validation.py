"""Input checks for the array-level estimator interface."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datagen import SamplePair
from .network import DOWNSAMPLE


def check_rgbd(X) -> np.ndarray:
    """Validate a stack of RGB-D inputs shaped (N, 4, H, W); returns float32.

    Channels 0-2 hold RGB and channel 3 holds depth, all in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 4:
        raise ValueError(f"expected RGB-D input of shape (N, 4, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("input holds no samples")
    H, W = X.shape[2:]
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"height and width must be multiples of {DOWNSAMPLE}, got {H}x{W}")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"input must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("input values must lie in [0, 1]")
    return X


def check_masks(y, n: Optional[int] = None, hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Validate binary masks shaped (N, H, W) or (N, 1, H, W); returns float32 (N, 1, H, W)."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4 or y.shape[1] != 1:
        raise ValueError(f"expected masks of shape (N, H, W) or (N, 1, H, W), got {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} masks for {n} inputs")
    if hw is not None and tuple(y.shape[2:]) != tuple(hw):
        raise ValueError(f"mask size {y.shape[2:]} differs from input size {tuple(hw)}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary (0 or 1)")
    return y.astype(np.float32)


def samples_to_arrays(samples: Sequence[SamplePair]) -> Tuple[np.ndarray, np.ndarray]:
    X = np.stack([np.concatenate([s.rgb, s.depth], axis=0) for s in samples]).astype(np.float32)
    y = np.stack([s.gt for s in samples]).astype(np.float32)
    return X, y


def arrays_to_samples(X: np.ndarray, y: Optional[np.ndarray] = None) -> List[SamplePair]:
    out = []
    for i in range(X.shape[0]):
        gt = y[i] if y is not None else np.zeros((1,) + X.shape[2:], dtype=np.float32)
        out.append(SamplePair(rgb=np.ascontiguousarray(X[i, :3]), depth=np.ascontiguousarray(X[i, 3:]), gt=gt))
    return out
