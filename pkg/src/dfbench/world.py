"""Procedural grayscale image world with eight controllable attributes.

Every image is a pure function of (config, condition, seed). Content draws
(texture phase, noise field, blob layout, highlight position, gradient
direction) depend only on the seed, so the same seed can be re-rendered
under a different condition to form a translation pair that shares content.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

ATTRIBUTES = (
    "brightness",
    "blob_count",
    "orientation",
    "contrast",
    "sharpness",
    "highlight",
    "gradient",
    "texture_scale",
)

_MAX_BLOBS = 6

# Named distribution shifts. Values are per-attribute condition biases,
# except __noise_scale which rescales the additive noise amplitude.
_SHIFTS: dict[str, dict[str, float]] = {
    "identity": {},
    "brightness+": {"brightness": 0.10},
    "detail+": {"blob_count": 0.20},
    "sharpness+": {"sharpness": 0.18},
    "contrast+": {"contrast": 0.15},
    "denoise": {"sharpness": -0.15, "texture_scale": -0.12},
    "texture+": {"texture_scale": 0.15},
    "highlight+": {"highlight": 0.18},
    "gradient+": {"gradient": 0.18},
}

VARIANT_NAMES = tuple(sorted(n for n in _SHIFTS if n != "identity"))


def derive_seed(root: int, *parts) -> int:
    """Stable 64-bit stream seed from a root seed and labelling parts."""
    text = str(int(root)) + "".join("|" + str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 64
    noise_floor: float = 0.02
    noise_scale: float = 1.0
    attribute_bias: tuple = (0.0,) * 8

    def __post_init__(self):
        s = self.image_size
        if s < 32 or (s & (s - 1)) != 0:
            raise ValueError(f"image_size must be a power of two >= 32, got {s}")
        if self.noise_floor < 0 or self.noise_scale < 0:
            raise ValueError("noise floor/scale must be non-negative")
        bias = tuple(float(v) for v in self.attribute_bias)
        if len(bias) != len(ATTRIBUTES):
            raise ValueError(f"attribute_bias needs {len(ATTRIBUTES)} entries, got {len(bias)}")
        object.__setattr__(self, "attribute_bias", bias)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (S, S) float64 in [0, 1]
    condition: np.ndarray  # (8,) float64 in [0, 1]
    provenance: str  # real | fake-base | fake-custom:<id> | fake-adversarial
    seed: int

    @property
    def is_fake(self) -> bool:
        return self.provenance != "real"


@dataclass
class DatasetSplit:
    config: WorldConfig
    train: list
    val: list
    test: list

    def slices(self):
        return ("train", self.train), ("val", self.val), ("test", self.test)

    def class_counts(self, name: str) -> tuple[int, int]:
        items = getattr(self, name)
        fakes = sum(1 for im in items if im.is_fake)
        return len(items) - fakes, fakes


def validate_condition(condition) -> np.ndarray:
    c = np.asarray(condition, dtype=np.float64)
    if c.shape != (len(ATTRIBUTES),):
        raise ValueError(f"condition must have shape ({len(ATTRIBUTES)},), got {c.shape}")
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError(f"condition components must lie in [0, 1], got {c}")
    return c


def _smooth3(img: np.ndarray) -> np.ndarray:
    """Edge-padded 3x3 binomial blur, the reference low-pass for unsharp masking."""
    p = np.pad(img, 1, mode="edge")
    h = 0.25 * (p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:])
    return 0.25 * (h[:-2, :] + 2.0 * h[1:-1, :] + h[2:, :])


def render(config: WorldConfig, condition, seed: int) -> np.ndarray:
    """Render one image. The draw order below is part of the format."""
    cond = validate_condition(condition)
    s = config.image_size
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    grad_angle = rng.uniform(0.0, 2.0 * np.pi)
    blob_pos = rng.uniform(0.12, 0.88, size=(_MAX_BLOBS, 2))
    blob_sign = rng.integers(0, 2, size=_MAX_BLOBS) * 2.0 - 1.0
    blob_rad = rng.uniform(0.045, 0.085, size=_MAX_BLOBS)
    hi_pos = rng.uniform(0.2, 0.8, size=2)
    noise = rng.standard_normal((s, s))

    e = np.clip(cond + np.asarray(config.attribute_bias), 0.0, 1.0)
    bright, blobs, orient, contrast, sharp, highlight, gradient, tscale = e

    ax = (np.arange(s) + 0.5) / s - 0.5
    yy, xx = np.meshgrid(ax, ax, indexing="ij")

    theta = orient * np.pi
    freq = 2.0 + 6.0 * tscale
    u = xx * np.cos(theta) + yy * np.sin(theta)
    img = (0.32 + 0.36 * bright) + (0.07 + 0.20 * contrast) * np.sin(2.0 * np.pi * freq * u + phase)

    v = xx * np.cos(grad_angle) + yy * np.sin(grad_angle)
    img += 0.30 * gradient * v

    count = 1 + int(blobs * (_MAX_BLOBS - 1) + 1e-9)
    for j in range(count):
        px, py = blob_pos[j] - 0.5
        d2 = (xx - px) ** 2 + (yy - py) ** 2
        img += 0.14 * blob_sign[j] * np.exp(-d2 / (2.0 * blob_rad[j] ** 2))

    hx, hy = hi_pos - 0.5
    img += 0.30 * highlight * np.exp(-((xx - hx) ** 2 + (yy - hy) ** 2) / (2.0 * 0.05 ** 2))

    img = img + 1.2 * sharp * (img - _smooth3(img))
    img = img + config.noise_floor * config.noise_scale * noise
    return np.clip(img, 0.0, 1.0)


def sample_real(config: WorldConfig, condition, seed: int) -> LabeledImage:
    cond = validate_condition(condition)
    return LabeledImage(render(config, cond, seed), cond, "real", seed)


def shift_distribution(config: WorldConfig, variant_spec: str) -> WorldConfig:
    """Return a config rendering a small, named shift of the base distribution."""
    if variant_spec not in _SHIFTS:
        raise ValueError(
            f"unknown variant {variant_spec!r}; valid: {', '.join(sorted(_SHIFTS))}"
        )
    spec = _SHIFTS[variant_spec]
    bias = list(config.attribute_bias)
    noise_scale = config.noise_scale
    for key, value in spec.items():
        if key == "__noise_scale":
            noise_scale = config.noise_scale * value
        else:
            bias[ATTRIBUTES.index(key)] += value
    return replace(config, attribute_bias=tuple(bias), noise_scale=noise_scale)


def draw_conditions(n: int, seed: int) -> np.ndarray:
    """The shared condition list: one uniform draw per image, reused across classes."""
    return np.random.default_rng(seed).random((n, len(ATTRIBUTES)))


def build_split(
    config: WorldConfig,
    n_per_class: int,
    generator: Optional[object],
    seed: int,
) -> DatasetSplit:
    """Assemble class-balanced train/val/test (8:1:1) with matched conditions.

    With generator=None a real-only split is produced (for encoder training
    and reference statistics). Otherwise each condition is used once for a
    real image and once for a fake drawn from generator.generate.
    """
    if n_per_class < 10 or n_per_class % 10 != 0:
        raise ValueError(
            f"n_per_class must be a positive multiple of 10 for 8:1:1 splits, got {n_per_class}"
        )
    conds = draw_conditions(n_per_class, derive_seed(seed, "conditions"))
    bounds = (0, n_per_class * 8 // 10, n_per_class * 9 // 10, n_per_class)
    out = {}
    for k, name in enumerate(("train", "val", "test")):
        lo, hi = bounds[k], bounds[k + 1]
        reals = [
            sample_real(config, conds[i], derive_seed(seed, "real", i)) for i in range(lo, hi)
        ]
        fakes = []
        if generator is not None:
            fakes = [
                generator.generate(conds[i], derive_seed(seed, "fake", i)) for i in range(lo, hi)
            ]
        out[name] = reals + fakes
    return DatasetSplit(config=config, **out)


def images_of(items: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in items])


def labels_of(items: Sequence[LabeledImage]) -> np.ndarray:
    """1.0 for fake, 0.0 for real; fake is the positive detection class."""
    return np.array([1.0 if im.is_fake else 0.0 for im in items])


def conditions_of(items: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([im.condition for im in items])
