"""Quantitative instruments: recall degradation, KID, semantic similarity, spectra."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .features import DctConfig, dct2d


def delta_recall(r1: float, r2: float) -> float:
    """Percentage degradation in fake-class recall, 100*(R1-R2)/R1.

    Inputs are percentages in [0, 100]; R1 must be positive. Negative output
    means recall improved under the studied shift.
    """
    if not (0.0 <= r1 <= 100.0 and 0.0 <= r2 <= 100.0):
        raise ValueError(f"recalls must lie in [0, 100], got R1={r1}, R2={r2}")
    if r1 == 0.0:
        raise ValueError("R1 = 0: degradation undefined")
    return 100.0 * (r1 - r2) / r1


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "polynomial"
    degree: int = 3
    offset: float = 1.0
    subset_size: int = 100
    n_subsets: int = 10

    def __post_init__(self):
        if self.kind != "polynomial":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.subset_size < 2:
            raise ValueError(f"subset_size must be >= 2, got {self.subset_size}")
        if self.n_subsets < 1:
            raise ValueError(f"n_subsets must be >= 1, got {self.n_subsets}")


def polynomial_kernel(x: np.ndarray, y: np.ndarray, config: KernelConfig) -> np.ndarray:
    """k(u, v) = (u.v/d + offset)^degree with d the feature dimension."""
    d = x.shape[1]
    return (x @ y.T / d + config.offset) ** config.degree


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, config: KernelConfig) -> float:
    """Unbiased MMD^2 estimator with diagonal-excluded within-set sums.

    The cross term is evaluated in a canonical operand order so that
    swapping x and y returns the bit-identical float.
    """
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError(f"need at least 2 points per set, got {m} and {n}")
    kxx = polynomial_kernel(x, x, config)
    kyy = polynomial_kernel(y, y, config)
    u, v = (x, y) if x.tobytes() <= y.tobytes() else (y, x)
    kuv = polynomial_kernel(u, v, config)
    term_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_xx + term_yy - 2.0 * kuv.mean())


def _content_stream(features: np.ndarray, seed: int) -> np.random.Generator:
    # Keyed on the set's bytes so swapping the two arguments of kid() swaps
    # the subset draws identically, making the estimate exactly symmetric.
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    h.update(np.ascontiguousarray(features).tobytes())
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def kid(x, y, config: KernelConfig = KernelConfig(), seed: int = 0) -> float:
    """Subset-averaged unbiased MMD^2 between two embedding sets."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"feature sets must be 2-D with equal dim, got {x.shape}, {y.shape}")
    m = min(config.subset_size, len(x), len(y))
    if m < 2:
        raise ValueError(f"sets too small for KID: {len(x)}, {len(y)} (need >= 2)")
    rng_x = _content_stream(x, seed)
    rng_y = _content_stream(y, seed)
    total = 0.0
    for _ in range(config.n_subsets):
        ix = rng_x.choice(len(x), size=m, replace=False)
        iy = rng_y.choice(len(y), size=m, replace=False)
        total += mmd2_unbiased(x[ix], y[iy], config)
    return total / config.n_subsets


def semantic_score(encoder, image, condition) -> float:
    """Cosine similarity between encoder-predicted attributes and the condition."""
    pred = np.asarray(encoder.predict_attributes(image), dtype=np.float64).ravel()
    cond = np.asarray(condition, dtype=np.float64).ravel()
    if pred.shape != cond.shape:
        raise ValueError(f"attribute dim mismatch: {pred.shape} vs {cond.shape}")
    np_, nc = np.linalg.norm(pred), np.linalg.norm(cond)
    if np_ == 0.0 or nc == 0.0:
        raise ValueError("zero-norm vector in semantic score")
    return float(pred @ cond / (np_ * nc))


def semantic_scores(encoder, images, conditions) -> np.ndarray:
    preds = np.asarray(encoder.predict_attributes(images), dtype=np.float64)
    conds = np.asarray(conditions, dtype=np.float64)
    if preds.shape != conds.shape:
        raise ValueError(f"attribute dim mismatch: {preds.shape} vs {conds.shape}")
    norms = np.linalg.norm(preds, axis=1) * np.linalg.norm(conds, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm vector in semantic score")
    return np.sum(preds * conds, axis=1) / norms


def avg_log_spectrum(images, config: DctConfig = DctConfig()) -> np.ndarray:
    """Elementwise mean of log(|DCT(x)| + eps) over an image set."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError(f"expected a nonempty stack of 2-D images, got shape {x.shape}")
    return np.log(np.abs(dct2d(x)) + config.log_epsilon).mean(axis=0)


def compare_spectra(s_a, s_b) -> float:
    """Frobenius distance between two spectrum matrices."""
    a = np.asarray(s_a, dtype=np.float64)
    b = np.asarray(s_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"spectrum shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def stride_peak_ratio(spectrum, lines=None) -> float:
    """Peak-to-background contrast of stride-harmonic lines in a log spectrum.

    Returns exp(mean over peak lines - mean over high-frequency background);
    > 1 means the harmonic rows/columns stand out. Default lines sit at the
    half-band and top-band positions produced by stride-2 upsampling.
    """
    s = np.asarray(spectrum, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square spectrum, got {s.shape}")
    n = s.shape[0]
    if lines is None:
        half = n // 2
        lines = (half - 1, half, half + 1, n - 2, n - 1)
    lines = sorted({int(k) for k in lines})
    mask = np.zeros((n, n), dtype=bool)
    for k in lines:
        mask[k, :] = True
        mask[:, k] = True
    idx = np.arange(n)
    highband = (idx[:, None] + idx[None, :]) >= n // 2
    peak = s[mask & highband]
    background = s[~mask & highband]
    if peak.size == 0 or background.size == 0:
        raise ValueError("peak/background partition empty; check line indices")
    return float(np.exp(peak.mean() - background.mean()))


@dataclass
class MetricsReport:
    """Container for one experiment's numbers; validate() re-derives ΔR."""

    config_digest: str = ""
    seed: int = 0
    f1_table: dict = field(default_factory=dict)  # id -> (P, R, F1) in percent
    delta_recall_table: dict = field(default_factory=dict)  # id -> (R1, R2, dR)
    kid_values: dict = field(default_factory=dict)
    kid_settings: dict = field(default_factory=dict)
    semantic_means: dict = field(default_factory=dict)
    spectra: dict = field(default_factory=dict)  # id -> 2-D array

    def validate(self):
        for det, (r1, r2, dr) in self.delta_recall_table.items():
            if abs(delta_recall(r1, r2) - dr) > 1e-9:
                raise ValueError(f"inconsistent delta recall for {det}: {(r1, r2, dr)}")
        for table in (self.f1_table, self.delta_recall_table, self.kid_values, self.semantic_means):
            for key, value in table.items():
                if not np.all(np.isfinite(np.asarray(value, dtype=np.float64))):
                    raise ValueError(f"non-finite metric for {key}: {value}")
        for key, spec in self.spectra.items():
            if not np.all(np.isfinite(spec)):
                raise ValueError(f"non-finite spectrum {key}")
        return self
