"""Frequency-domain and noise-residual feature pipelines.

The DCT here is the orthonormal 2-D DCT-II, computed per axis with a cached
basis matrix so the inverse is the exact transpose (Parseval holds to
rounding error).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class DctConfig:
    log_epsilon: float = 1e-12

    def __post_init__(self):
        if self.log_epsilon <= 0:
            raise ValueError(f"log_epsilon must be > 0, got {self.log_epsilon}")


_BASIS_CACHE: dict[int, np.ndarray] = {}


def dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis matrix C with (C @ x) the 1-D transform."""
    c = _BASIS_CACHE.get(n)
    if c is None:
        k = np.arange(n)[:, None]
        m = np.arange(n)[None, :]
        c = np.sqrt(2.0 / n) * np.cos(np.pi * (2.0 * m + 1.0) * k / (2.0 * n))
        c[0, :] = np.sqrt(1.0 / n)
        c.setflags(write=False)
        _BASIS_CACHE[n] = c
    return c


def _require_square(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square image(s), got shape {x.shape}")
    return x


def dct2d(image) -> np.ndarray:
    """Orthonormal 2-D DCT-II; broadcasts over leading batch axes."""
    x = _require_square(image)
    c = dct_basis(x.shape[-1])
    return c @ x @ c.T


def idct2d(coeffs) -> np.ndarray:
    x = _require_square(coeffs)
    c = dct_basis(x.shape[-1])
    return c.T @ x @ c


def log_dct_features(image, config: DctConfig = DctConfig()) -> np.ndarray:
    """flatten(log(|DCT(x)| + eps)); batched inputs give (N, H*W)."""
    coeffs = dct2d(image)
    feats = np.log(np.abs(coeffs) + config.log_epsilon)
    return feats.reshape(*feats.shape[:-2], -1)


def median_denoise(image, k: int = 3) -> np.ndarray:
    """Window-median filter with edge-clamped padding; batched over leading axes."""
    if k % 2 == 0 or k < 1:
        raise ValueError(f"window size must be odd and positive, got {k}")
    x = np.asarray(image, dtype=np.float64)
    r = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad, mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(-2, -1))
    return np.median(win, axis=(-2, -1))


def residual_features(image, config: DctConfig = DctConfig()) -> np.ndarray:
    """log-DCT of the noise residual (image minus its median-denoised version)."""
    x = np.asarray(image, dtype=np.float64)
    return log_dct_features(x - median_denoise(x), config)


def combined_features(image, config: DctConfig = DctConfig()) -> np.ndarray:
    """[log-DCT of image, log-DCT of residual] concatenated; length 2*H*W."""
    return np.concatenate(
        [log_dct_features(image, config), residual_features(image, config)], axis=-1
    )
