"""Frozen convolutional encoders standing in for pretrained foundation models.

An encoder is trained once on attribute regression over real images, then
frozen; detectors, surrogates, and perceptual losses consume its features
but never change its weights (checksum-enforced contract). The large tier
uses twice the width and ten times the training data of the small tier.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, collect_params, params_checksum, set_requires_grad
from .optim import Optimizer, OptimizerConfig
from .world import ATTRIBUTES, WorldConfig, build_split, conditions_of, derive_seed, images_of


@dataclass(frozen=True)
class EncoderConfig:
    tier: str = "small"
    base_channels: int = 8
    n_train: int = 500  # images drawn for training (8:1:1 internally)
    epochs: int = 30
    batch_size: int = 50
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.tier not in ("small", "large"):
            raise ValueError(f"tier must be small or large, got {self.tier!r}")
        if self.base_channels < 1 or self.n_train < 10 or self.epochs < 1:
            raise ValueError("invalid encoder config")


# Large tier: 2x width, 10x data (fewer epochs keep step counts comparable).
TIER_CONFIGS = {
    "small": EncoderConfig(),
    "large": EncoderConfig(tier="large", base_channels=16, n_train=5000, epochs=3),
}


class FrozenEncoder:
    """Three conv blocks with pooling, a pooled feature vector, attribute head."""

    def __init__(self, config: EncoderConfig, seed: int):
        self.config = config
        self.seed = seed
        self.frozen = False
        self._checksum = None
        c = config.base_channels
        rng = np.random.default_rng(derive_seed(seed, "encoder-init", config.tier))
        self.conv1 = Conv2d(1, c, 4, stride=2, pad=1, rng=rng)
        self.conv2 = Conv2d(c, 2 * c, 4, stride=2, pad=1, rng=rng)
        self.conv3 = Conv2d(2 * c, 4 * c, 4, stride=2, pad=1, rng=rng)
        # Fixed 3x3 high-pass kernel (center delta minus binomial smoothing) so
        # the feature vector keeps an explicit fine-texture energy readout.
        hp = -np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
        hp[1, 1] += 1.0
        self._hp_w = T.Tensor(hp[None, None])
        self.head = Linear(self.feature_dim, len(ATTRIBUTES), rng=rng)
        # Per-dim embedding calibration, fitted on the training reals after
        # attribute training. Identity until then.
        self.feat_shift = np.zeros(self.feature_dim)
        self.feat_scale = np.ones(self.feature_dim)

    @property
    def feature_dim(self) -> int:
        # pooled 2x2 grid of the last block, a 2x2 grid of per-channel RMS
        # energies for every block, and the 2x2 high-pass RMS grid:
        # 16c + 4*(c + 2c + 4c) + 4
        return 44 * self.config.base_channels + 4

    def named_params(self):
        return collect_params(
            [("conv1", self.conv1), ("conv2", self.conv2), ("conv3", self.conv3), ("head", self.head)]
        )

    def params(self):
        return [p for _, p in self.named_params()]

    def checksum(self) -> str:
        h = hashlib.sha256(params_checksum(self.named_params()).encode())
        h.update(np.ascontiguousarray(self.feat_shift).tobytes())
        h.update(np.ascontiguousarray(self.feat_scale).tobytes())
        return h.hexdigest()

    def freeze(self):
        set_requires_grad(self.named_params(), False)
        self.frozen = True
        self._checksum = self.checksum()
        return self

    def require_frozen(self):
        if not self.frozen:
            raise RuntimeError("encoder must be frozen before use as a fixed feature net")
        if self.checksum() != self._checksum:
            raise RuntimeError("frozen encoder weights changed; contract violated")

    def forward(self, x: T.Tensor, want_taps: bool = False):
        """x: (N,1,S,S) tensor. Returns (features (N,D), taps) with taps the
        post-activation maps of each conv block.

        Features are the pooled 2x2 grid of the last block joined with a 2x2
        grid of per-channel RMS energies for each block, so they carry both
        coarse layout and localized texture statistics. The returned features
        are calibrated (shifted/scaled per dim to the training reals); the
        attribute head consumes them directly."""
        x0 = x + T.Tensor(np.array(-0.5))  # center pixels; differentiable for attacks
        h1 = T.leaky_relu(self.conv1(x0))
        h2 = T.leaky_relu(self.conv2(h1))
        h3 = T.leaky_relu(self.conv3(h2))
        s = h3.shape[-1]
        pooled = T.avg_pool2d(h3, s // 2) if s > 2 else h3
        n = x.shape[0]
        grid = T.reshape(pooled, (n, 16 * self.config.base_channels))
        eps = T.Tensor(np.array(1e-8))
        energies = [
            T.reshape(T.tsqrt(T.avg_pool2d(T.mul(h, h), h.shape[-1] // 2) + eps), (n, -1))
            for h in (h1, h2, h3)
        ]
        # High-pass residual on the unpadded interior; its 2x2 RMS grid is the
        # finest-texture readout the conv blocks only carry diluted.
        hp = T.conv2d(x0, self._hp_w, 1, 0)
        hp_energy = T.reshape(
            T.tsqrt(T.avg_pool2d(T.mul(hp, hp), hp.shape[-1] // 2) + eps), (n, -1)
        )
        raw = T.concat([grid] + energies + [hp_energy], axis=1)
        feats = T.mul(raw + T.Tensor(-self.feat_shift[None]), T.Tensor((1.0 / self.feat_scale)[None]))
        return (feats, (h1, h2, h3)) if want_taps else (feats, None)

    def _as_batch_tensor(self, images) -> tuple[T.Tensor, bool]:
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        return T.Tensor(arr[:, None, :, :]), single

    def features(self, images) -> np.ndarray:
        """(N,S,S) or (S,S) images -> (N,D) or (D,) feature embeddings."""
        x, single = self._as_batch_tensor(images)
        feats, _ = self.forward(x)
        return feats.data[0] if single else feats.data

    def predict_attributes(self, images) -> np.ndarray:
        x, single = self._as_batch_tensor(images)
        feats, _ = self.forward(x)
        out = self.head(feats)
        return out.data[0] if single else out.data


def train_encoder(
    world: WorldConfig,
    tier: str = "small",
    seed: int = 0,
    config: EncoderConfig | None = None,
) -> FrozenEncoder:
    """Attribute-regression training on real images only, then freeze."""
    if config is None:
        if tier not in TIER_CONFIGS:
            raise ValueError(f"unknown tier {tier!r}; valid: {sorted(TIER_CONFIGS)}")
        config = TIER_CONFIGS[tier]
    enc = FrozenEncoder(config, seed)
    split = build_split(world, config.n_train, None, derive_seed(seed, "encoder-data", config.tier))
    imgs = images_of(split.train)
    conds = conditions_of(split.train)
    opt = Optimizer(enc.params(), OptimizerConfig(kind="adam", learning_rate=config.learning_rate))
    n = len(imgs)
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(seed, "encoder-epoch", epoch)).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            x = T.Tensor(imgs[idx][:, None, :, :])
            feats, _ = enc.forward(x)
            loss = T.mse(enc.head(feats), T.Tensor(conds[idx]))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    _calibrate(enc, imgs)
    val_pred = enc.predict_attributes(images_of(split.val))
    enc.val_mse = float(np.mean((val_pred - conditions_of(split.val)) ** 2))
    return enc.freeze()


def _calibrate(enc: FrozenEncoder, imgs: np.ndarray, chunk: int = 256):
    """Fit the per-dim embedding calibration on the training reals and fold
    the affine change into the attribute head, leaving predictions intact.
    Calibrated embeddings put every dim on a comparable scale, which keeps
    kernel statistics over them from being dominated by a few large dims."""
    feats = np.concatenate([enc.features(imgs[i : i + chunk]) for i in range(0, len(imgs), chunk)])
    shift = feats.mean(axis=0)
    # Half-unit target scale: keeps every dim comparable for kernel statistics
    # without letting per-dim sampling noise dominate polynomial-kernel sums.
    # Energy-type dims vary narrowly around a nonzero level, so spread alone
    # would magnify tiny absolute offsets; the level floor keeps their
    # calibrated range comparable too.
    scale = np.maximum(2.0 * feats.std(axis=0), 0.5 * np.abs(shift))
    scale = np.maximum(scale, 1e-6)
    w = enc.head.w.data
    enc.head.b.data[...] = enc.head.b.data + shift @ w
    enc.head.w.data[...] = w * scale[:, None]
    enc.feat_shift = shift
    enc.feat_scale = scale
