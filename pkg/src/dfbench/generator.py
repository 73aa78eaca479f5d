"""Conditional toy generator plus low-rank and full-model customization.

The generator is a conditional autoencoder: a conv encoder compresses the
image, the attribute vector is injected at the bottleneck, and a
transposed-conv decoder reconstructs it. Fakes are lossy re-renders of
procedural images, and the transposed-conv upsampling path is what stamps
the periodic frequency fingerprints detectors rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .features import dct2d
from .nn import Conv2d, ConvTranspose2d, Linear, collect_params, params_checksum
from .optim import Optimizer, OptimizerConfig
from .world import (
    DatasetSplit,
    LabeledImage,
    WorldConfig,
    derive_seed,
    render,
    validate_condition,
)

LORA_TARGETS = ("cond_proj.w", "mix.w", "cond_gate.w")


class GeneratorDivergence(RuntimeError):
    def __init__(self, last_loss: float):
        super().__init__(f"training diverged; last finite loss {last_loss:.6g}")
        self.last_loss = last_loss


@dataclass(frozen=True)
class GeneratorConfig:
    channels: tuple = (12, 24, 32)
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 2e-3
    lr_decay: float = 0.3  # applied to the learning rate after 75% of epochs
    val_mse_threshold: float = 0.02

    def __post_init__(self):
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError(f"channels must be three positive ints, got {self.channels}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


class ConditionalGenerator:
    """Downsampling conv encoder, condition injected at the bottleneck,
    transposed-conv decoder with sigmoid output."""

    def __init__(self, world: WorldConfig, config: GeneratorConfig, seed: int, tag: str = "fake-base"):
        self.world = world
        self.config = config
        self.seed = seed
        self.tag = tag
        c1, c2, c3 = config.channels
        rng = np.random.default_rng(derive_seed(seed, "generator-init"))
        self.enc1 = Conv2d(1, c1, 4, stride=2, pad=1, rng=rng)
        self.enc2 = Conv2d(c1, c2, 4, stride=2, pad=1, rng=rng)
        self.enc3 = Conv2d(c2, c3, 4, stride=2, pad=1, rng=rng)
        self.cond_proj = Linear(8, c3, rng=rng)
        self.mix = Conv2d(c3, c3, 1, stride=1, pad=0, rng=rng)
        self.dec1 = ConvTranspose2d(c3, c2, 4, stride=2, pad=1, rng=rng)
        self.dec2 = ConvTranspose2d(c2, c1, 4, stride=2, pad=1, rng=rng)
        self.cond_gate = Linear(8, c1, rng=rng)  # multiplicative injection on the decoder
        self.dec3 = ConvTranspose2d(c1, 1, 4, stride=2, pad=1, rng=rng)
        self.val_mse: Optional[float] = None
        self.noise_std = 0.0  # output noise model, fitted after training

    def named_params(self):
        return collect_params(
            [
                ("enc1", self.enc1),
                ("enc2", self.enc2),
                ("enc3", self.enc3),
                ("cond_proj", self.cond_proj),
                ("mix", self.mix),
                ("dec1", self.dec1),
                ("dec2", self.dec2),
                ("cond_gate", self.cond_gate),
                ("dec3", self.dec3),
            ]
        )

    def params(self):
        return [p for _, p in self.named_params()]

    def checksum(self) -> str:
        return params_checksum(self.named_params())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def arch_descriptor(self) -> dict:
        return {
            "model": "conditional-generator",
            "image_size": self.world.image_size,
            "channels": list(self.config.channels),
        }

    def clone(self, tag: Optional[str] = None) -> "ConditionalGenerator":
        out = ConditionalGenerator(self.world, self.config, self.seed, tag or self.tag)
        for (_, dst), (_, src) in zip(out.named_params(), self.named_params()):
            dst.data = src.data.copy()
        out.val_mse = self.val_mse
        out.noise_std = self.noise_std
        return out

    def forward(self, x: T.Tensor, conditions: np.ndarray, overrides: Optional[dict] = None) -> T.Tensor:
        """x: (N,1,S,S); conditions: (N,8). overrides maps a LoRA target name
        to a replacement weight tensor (used during adapter training)."""
        ov = overrides or {}
        h1 = T.leaky_relu(self.enc1(x))
        h2 = T.leaky_relu(self.enc2(h1))
        h3 = T.leaky_relu(self.enc3(h2))
        w_cp = ov.get("cond_proj.w", self.cond_proj.w)
        pc = T.matmul(T.Tensor(conditions), w_cp) + self.cond_proj.b.reshape(1, -1)
        z = h3 + T.reshape(pc, (x.shape[0], -1, 1, 1))
        w_mix = ov.get("mix.w", self.mix.w)
        m = T.leaky_relu(
            T.conv2d(z, T.reshape(w_mix, self.mix.w.shape), 1, 0) + self.mix.b.reshape(1, -1, 1, 1)
        )
        d1 = T.leaky_relu(self.dec1(m))
        d2 = T.leaky_relu(self.dec2(d1))
        w_gate = ov.get("cond_gate.w", self.cond_gate.w)
        gate = T.matmul(T.Tensor(conditions), w_gate) + self.cond_gate.b.reshape(1, -1)
        one = T.Tensor(np.array(1.0))
        d2 = T.mul(d2, T.reshape(gate + one, (x.shape[0], -1, 1, 1)))
        return T.sigmoid(self.dec3(d2))

    def _source_for(self, condition: np.ndarray, seed: int) -> np.ndarray:
        """Procedural source image at the requested condition; the latent seed
        picks the content draws."""
        return render(self.world, condition, derive_seed(seed, "source-content"))

    def _finish(self, decoded: np.ndarray, seed: int) -> np.ndarray:
        """Apply the fitted output noise model; part of the forward pass, keyed
        on the latent seed so generation stays deterministic."""
        if self.noise_std <= 0.0:
            return decoded
        s = self.world.image_size
        eta = np.random.default_rng(derive_seed(seed, "output-noise")).normal(0.0, 1.0, (s, s))
        return np.clip(decoded + self.noise_std * eta, 0.0, 1.0)

    def generate(self, condition, seed: int) -> LabeledImage:
        cond = validate_condition(condition)
        img = self._source_for(cond, seed)
        out = self.forward(T.Tensor(img[None, None]), cond[None])
        return LabeledImage(self._finish(out.data[0, 0], seed), cond, self.tag, seed)

    def generate_batch(self, conditions: np.ndarray, seeds, chunk: int = 128) -> np.ndarray:
        seeds = list(seeds)
        conds = np.stack([validate_condition(c) for c in conditions])
        sources = np.stack([self._source_for(c, s) for c, s in zip(conds, seeds)])
        out = np.empty_like(sources)
        for start in range(0, len(sources), chunk):
            sl = slice(start, start + chunk)
            decoded = self.forward(T.Tensor(sources[sl, None]), conds[sl]).data[:, 0]
            for row, seed in enumerate(seeds[sl]):
                out[start + row] = self._finish(decoded[row], seed)
        return out


def train_generator(split: DatasetSplit, config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> ConditionalGenerator:
    """Fit the conditional autoencoder on a real split: reconstruct each image
    given its own attribute vector."""
    if not split.train:
        raise ValueError("training split is empty")
    gen = ConditionalGenerator(split.config, config, seed)
    opt = Optimizer(gen.params(), OptimizerConfig(kind="adam", learning_rate=config.learning_rate))
    imgs = np.stack([im.pixels for im in split.train])
    conds = np.stack([im.condition for im in split.train])
    n = len(imgs)
    last_loss = float("nan")
    decay_at = int(round(0.75 * config.epochs))
    for epoch in range(config.epochs):
        if epoch == decay_at and config.lr_decay < 1.0:
            opt.config.learning_rate = config.learning_rate * config.lr_decay
        order = np.random.default_rng(derive_seed(seed, "generator-epoch", epoch)).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                out = gen.forward(T.Tensor(imgs[idx][:, None]), conds[idx])
                loss = T.mse(out, T.Tensor(imgs[idx][:, None]))
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            except T.NonFiniteValues:
                raise GeneratorDivergence(last_loss) from None
            last_loss = loss.item()
    gen.val_mse = _validation_mse(gen, split)
    gen.noise_std = _noise_level(gen, split)
    return gen


def _validation_mse(gen: ConditionalGenerator, split: DatasetSplit, chunk: int = 128) -> float:
    items = split.val or split.train
    imgs = np.stack([im.pixels for im in items])
    conds = np.stack([im.condition for im in items])
    err = 0.0
    for start in range(0, len(imgs), chunk):
        sl = slice(start, start + chunk)
        out = gen.forward(T.Tensor(imgs[sl, None]), conds[sl])
        err += float(np.sum((out.data[:, 0] - imgs[sl]) ** 2))
    return err / imgs.size


# The stochastic layer slightly overdrives the data's noise floor. The
# excess is one of the generator's fingerprints, like its deconv lattice.
NOISE_FILL = 1.15


def _noise_level(gen: ConditionalGenerator, split: DatasetSplit) -> float:
    """Std of the output noise model: NOISE_FILL times the training images'
    high-frequency floor, estimated as the median absolute deviation of the
    finest-quadrant DCT coefficients, which that distribution's white noise
    dominates. The median is robust to the sparse texture tails that share
    the band."""
    items = split.val or split.train
    imgs = np.stack([im.pixels for im in items])
    q = 3 * gen.world.image_size // 4
    coeffs = dct2d(imgs)[:, q:, q:]
    return float(NOISE_FILL * np.median(np.abs(coeffs)) / 0.6745)


@dataclass
class LowRankAdapter:
    """Per-target (A: r x n, B: m x r) pairs; delta W = alpha * B @ A.

    ``world`` records the distribution the adapter was fitted on; applying
    the adapter moves the generator to that distribution."""

    rank: int
    alpha: float
    layers: dict = field(default_factory=dict)  # name -> (A, B) ndarrays
    world: Optional[WorldConfig] = None

    def delta(self, name: str) -> np.ndarray:
        a, b = self.layers[name]
        return self.alpha * (b @ a)

    def param_count(self) -> int:
        return sum(a.size + b.size for a, b in self.layers.values())


def _target_matrix_shape(gen: ConditionalGenerator, name: str) -> tuple[int, int]:
    if name == "cond_proj.w":
        return gen.cond_proj.w.shape  # (in, out) for the linear map
    if name == "cond_gate.w":
        return gen.cond_gate.w.shape
    if name == "mix.w":
        o, i, kh, kw = gen.mix.w.shape
        return (o, i * kh * kw)
    raise ValueError(f"unknown adapter target {name!r}; valid: {LORA_TARGETS}")


def customize_lora(
    gen: ConditionalGenerator,
    shifted: DatasetSplit,
    rank: int = 4,
    steps: int = 200,
    seed: int = 0,
    alpha: float = 0.5,
    learning_rate: float = 2e-3,
    batch_size: int = 32,
) -> LowRankAdapter:
    """Train A/B pairs on the condition-injection layers; base weights untouched."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    before = gen.checksum()
    rng = np.random.default_rng(derive_seed(seed, "lora-init"))
    adapter = LowRankAdapter(rank=rank, alpha=alpha, world=shifted.config)
    trainable = []
    for name in LORA_TARGETS:
        m, n = _target_matrix_shape(gen, name)
        if rank > min(m, n):
            raise ValueError(f"rank {rank} exceeds min dim of {name} ({min(m, n)})")
        a = T.Tensor(rng.normal(0.0, 0.02, size=(rank, n)), requires_grad=True)
        b = T.Tensor(np.zeros((m, rank)), requires_grad=True)  # zero-init B
        adapter.layers[name] = (a.data, b.data)
        trainable.append((name, a, b))
    if steps > 0:
        opt = Optimizer(
            [t for _, a, b in trainable for t in (a, b)],
            OptimizerConfig(kind="adam", learning_rate=learning_rate),
        )
        items = shifted.train
        step_rng = np.random.default_rng(derive_seed(seed, "lora-steps"))
        for _ in range(steps):
            idx = step_rng.integers(0, len(items), size=min(batch_size, len(items)))
            sources, conds, targets = _customization_batch(items, idx)
            overrides = {}
            for name, a, b in trainable:
                base = T.Tensor(gen_weight_matrix(gen, name))
                overrides[name] = base + T.mul(T.Tensor(np.array(alpha)), T.matmul(b, a))
            out = gen.forward(T.Tensor(sources[:, None]), conds, overrides=overrides)
            loss = T.mse(out, T.Tensor(targets[:, None]))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        for name, a, b in trainable:
            adapter.layers[name] = (a.data, b.data)
    if gen.checksum() != before:
        raise RuntimeError("base generator mutated during LoRA customization")
    return adapter


def gen_weight_matrix(gen: ConditionalGenerator, name: str) -> np.ndarray:
    if name == "cond_proj.w":
        return gen.cond_proj.w.data
    if name == "cond_gate.w":
        return gen.cond_gate.w.data
    if name == "mix.w":
        o = gen.mix.w.shape[0]
        return gen.mix.w.data.reshape(o, -1)
    raise ValueError(f"unknown adapter target {name!r}")


def _customization_batch(items, idx):
    """Reconstruction pairs drawn from the fine-tuning set itself."""
    sources = np.stack([items[i].pixels for i in idx])
    conds = np.stack([items[i].condition for i in idx])
    return sources, conds, sources


def reconstruction_loss(
    gen: ConditionalGenerator,
    split: DatasetSplit,
    adapter: Optional[LowRankAdapter] = None,
    chunk: int = 128,
) -> float:
    """Mean reconstruction MSE on a split's train slice (diagnostic)."""
    items = split.train
    overrides = None
    if adapter is not None:
        overrides = {
            name: T.Tensor(gen_weight_matrix(gen, name) + adapter.delta(name))
            for name in adapter.layers
        }
    imgs = np.stack([im.pixels for im in items])
    conds = np.stack([im.condition for im in items])
    err = 0.0
    for start in range(0, len(imgs), chunk):
        sl = slice(start, start + chunk)
        out = gen.forward(T.Tensor(imgs[sl, None]), conds[sl], overrides=overrides)
        err += float(np.sum((out.data[:, 0] - imgs[sl]) ** 2))
    return err / imgs.size


def apply_lora(gen: ConditionalGenerator, adapter: LowRankAdapter, alpha: Optional[float] = None, tag: Optional[str] = None) -> ConditionalGenerator:
    """Return a new generator with W' = W + alpha * B @ A on each target layer.
    The result also adopts the adapter's training distribution for its source
    renders, mirroring a customized model prompted with its owner's content."""
    scale = adapter.alpha if alpha is None else alpha
    out = gen.clone(tag=tag or "fake-custom:lora")
    if adapter.world is not None:
        out.world = adapter.world
    for name, (a, b) in adapter.layers.items():
        m, n = _target_matrix_shape(gen, name)
        if a.shape != (adapter.rank, n) or b.shape != (m, adapter.rank):
            raise ValueError(
                f"adapter for {name} has shapes A{a.shape}, B{b.shape}; expected "
                f"A({adapter.rank}, {n}), B({m}, {adapter.rank})"
            )
        if scale == 0.0:
            continue
        delta = scale * (b @ a)
        if name == "cond_proj.w":
            out.cond_proj.w.data = out.cond_proj.w.data + delta
        elif name == "cond_gate.w":
            out.cond_gate.w.data = out.cond_gate.w.data + delta
        else:
            out.mix.w.data = out.mix.w.data + delta.reshape(out.mix.w.shape)
    return out


def customize_full(
    gen: ConditionalGenerator,
    shifted: DatasetSplit,
    steps: int = 200,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    tag: Optional[str] = None,
) -> ConditionalGenerator:
    """Full-model fine-tuning on the shifted set; base generator untouched.
    The returned model renders its sources from the shifted distribution."""
    before = gen.checksum()
    out = gen.clone(tag=tag or "fake-custom:fm")
    out.world = shifted.config
    if steps > 0:
        opt = Optimizer(out.params(), OptimizerConfig(kind="adam", learning_rate=learning_rate))
        items = shifted.train
        step_rng = np.random.default_rng(derive_seed(seed, "fm-steps"))
        for _ in range(steps):
            idx = step_rng.integers(0, len(items), size=min(batch_size, len(items)))
            sources, conds, targets = _customization_batch(items, idx)
            outp = out.forward(T.Tensor(sources[:, None]), conds)
            loss = T.mse(outp, T.Tensor(targets[:, None]))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    # noise_std stays at the base value: the stochastic output layer has no
    # gradient path, so fine-tuning never reaches it.
    if gen.checksum() != before:
        raise RuntimeError("base generator mutated during full fine-tune")
    return out
