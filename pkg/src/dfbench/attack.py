"""Surrogate-guided adversarial customization of the generator.

The attacker trains a logistic head on a frozen encoder to score images as
real or fake, then fine-tunes a private copy of the generator weights per
image so the surrogate scores the output as real while a perceptual term
keeps it close to the original render. No pixel-space perturbation exists
anywhere in this module; the only degrees of freedom are generator weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .encoders import FrozenEncoder
from .optim import Optimizer, OptimizerConfig
from .world import derive_seed, validate_condition

POOL_SIZE = 8


class AttackPrerequisiteError(RuntimeError):
    """Surrogate quality below the floor needed for a meaningful attack."""


class AttackDiverged(ArithmeticError):
    """Non-finite loss during the per-image update; carries the partial trace."""

    def __init__(self, trace: Sequence[float]):
        super().__init__(f"attack loss went non-finite after {len(trace)} finite steps")
        self.trace = tuple(trace)


@dataclass(frozen=True)
class SurrogateConfig:
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 2e-3
    weight_decay: float = 1e-3
    holdout_fraction: float = 0.2  # held out per class for the F1 gate
    min_f1: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 0.5:
            raise ValueError("holdout_fraction must lie in (0, 0.5)")


class SurrogateClassifier:
    """Logistic real/fake head on a frozen encoder; frozen after training.

    Scores satisfy p_real + p_fake = 1 by construction (single sigmoid).
    """

    def __init__(self, encoder: FrozenEncoder):
        encoder.require_frozen()
        self.encoder = encoder
        self.w = np.zeros(encoder.feature_dim)
        self.b = 0.0
        self.test_f1 = float("nan")
        self._checksum: Optional[str] = None

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256(self.encoder.checksum().encode())
        h.update(np.ascontiguousarray(self.w).tobytes())
        h.update(np.float64(self.b).tobytes())
        return h.hexdigest()

    def freeze(self) -> "SurrogateClassifier":
        self._checksum = self.checksum()
        return self

    def require_frozen(self):
        if self._checksum is None:
            raise RuntimeError("surrogate must be frozen before use")
        if self.checksum() != self._checksum:
            raise RuntimeError("frozen surrogate changed; contract violated")

    def logits_tensor(self, feats: T.Tensor) -> T.Tensor:
        """Differentiable fake-logit from encoder features; shape (N,)."""
        z = T.matmul(feats, T.Tensor(self.w.reshape(-1, 1)))
        return T.reshape(z, (feats.shape[0],)) + T.Tensor(np.array(self.b))

    def p_fake(self, images) -> np.ndarray:
        feats = self.encoder.features(images)
        if feats.ndim == 1:
            feats = feats[None]
        z = feats @ self.w + self.b
        out = 1.0 / (1.0 + np.exp(-z))
        return out[0] if np.asarray(images).ndim == 2 else out

    def p_real(self, images) -> np.ndarray:
        return 1.0 - self.p_fake(images)


def _f1(labels: np.ndarray, flagged: np.ndarray) -> float:
    tp = int(np.sum(flagged & (labels == 1.0)))
    fp = int(np.sum(flagged & (labels == 0.0)))
    fn = int(np.sum(~flagged & (labels == 1.0)))
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


def train_surrogate(
    fakes: np.ndarray,
    reals: np.ndarray,
    encoder: FrozenEncoder,
    config: SurrogateConfig = SurrogateConfig(),
    seed: int = 0,
) -> SurrogateClassifier:
    """Fit the logistic head on encoder features; the encoder stays frozen.

    Callers must supply reals disjoint from any defender training set; in the
    pipelines this is enforced by giving the attacker its own seed lineage.
    The tail of each class is held out to measure the head's test F1.
    """
    fakes = np.asarray(fakes, dtype=np.float64)
    reals = np.asarray(reals, dtype=np.float64)
    if len(fakes) < 10 or len(reals) < 10:
        raise ValueError(f"need at least 10 images per class, got {len(fakes)}/{len(reals)}")
    sur = SurrogateClassifier(encoder)
    n_hf = max(1, int(len(fakes) * config.holdout_fraction))
    n_hr = max(1, int(len(reals) * config.holdout_fraction))
    train_x = np.concatenate([fakes[:-n_hf], reals[:-n_hr]])
    train_y = np.concatenate([np.ones(len(fakes) - n_hf), np.zeros(len(reals) - n_hr)])
    feats = np.concatenate(
        [encoder.features(train_x[i : i + 256]) for i in range(0, len(train_x), 256)]
    )

    rng = np.random.default_rng(derive_seed(seed, "surrogate-init"))
    w = T.Tensor(rng.normal(0.0, 0.01, feats.shape[1]), requires_grad=True)
    b = T.Tensor(np.array(0.0), requires_grad=True)
    opt = Optimizer([w, b], OptimizerConfig(kind="adam", learning_rate=config.learning_rate))
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(seed, "surrogate-epoch", epoch)).permutation(
            len(feats)
        )
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            z = T.reshape(T.matmul(T.Tensor(feats[idx]), T.reshape(w, (-1, 1))), (len(idx),)) + b
            loss = T.bce_with_logits(z, train_y[idx])
            if config.weight_decay > 0:
                loss = loss + config.weight_decay * (w * w).sum()
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    sur.w = w.data
    sur.b = float(b.data)

    test_x = np.concatenate([fakes[-n_hf:], reals[-n_hr:]])
    test_y = np.concatenate([np.ones(n_hf), np.zeros(n_hr)])
    sur.test_f1 = _f1(test_y, sur.p_fake(test_x) >= 0.5)
    if sur.test_f1 < config.min_f1:
        raise AttackPrerequisiteError(
            f"surrogate test F1 {sur.test_f1:.3f} below {config.min_f1}; attack prerequisite unmet"
        )
    return sur.freeze()


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 0.1  # classification term coefficient
    delta: float = 1.0  # perceptual term coefficient
    iterations: int = 50
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(kind="adam", learning_rate=2e-3)
    )

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ValueError("gamma and delta must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @staticmethod
    def large_encoder_preset() -> "AttackConfig":
        """Softer classification pull for the higher-capacity surrogate tier."""
        return AttackConfig(gamma=0.02)


@dataclass
class AttackInstance:
    index: int
    condition: np.ndarray
    seed: int
    x_prime: np.ndarray  # output before the attack
    x_adv: np.ndarray  # output after the attack, same latent seed
    p_real_before: float
    p_real_after: float
    trace: tuple  # per-iteration total loss


def _unit_taps(taps) -> list:
    """Per-image L2-normalized activation tensors, one per conv block."""
    out = []
    for t in taps:
        n = t.shape[0]
        flat = T.reshape(t, (n, -1))
        norm = T.tsqrt(T.tsum(T.mul(flat, flat), axis=1, keepdims=True) + T.Tensor(np.array(1e-12)))
        out.append(T.div(flat, norm))
    return out


def perceptual_loss(feature_net: FrozenEncoder, a: np.ndarray, b: np.ndarray) -> float:
    """Sum over conv blocks of the MSE between unit-normalized activations.

    Symmetric in its image arguments and zero exactly when every block's
    activations match.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    feature_net.require_frozen()
    _, taps_a = feature_net.forward(T.Tensor(a[None, None]), want_taps=True)
    _, taps_b = feature_net.forward(T.Tensor(b[None, None]), want_taps=True)
    total = 0.0
    for ua, ub in zip(_unit_taps(taps_a), _unit_taps(taps_b)):
        total += float(np.mean((ua.data - ub.data) ** 2))
    return total


def adversarial_update(
    gen,
    source: np.ndarray,
    condition,
    surrogate: SurrogateClassifier,
    config: AttackConfig = AttackConfig(),
    percept_encoder: Optional[FrozenEncoder] = None,
    seed: int = 0,
):
    """Per-image attack: fine-tune a private copy of the generator so the
    surrogate scores its output real, anchored perceptually to the initial
    output. Returns (adv_generator, x_adv, trace).

    The latent seed keys the stochastic output layer, so the pre- and
    post-attack outputs share the same noise draw and differ only through
    the updated weights.
    """
    surrogate.require_frozen()
    percept = percept_encoder if percept_encoder is not None else surrogate.encoder
    percept.require_frozen()
    cond = validate_condition(condition)
    src = T.Tensor(np.asarray(source, dtype=np.float64)[None, None])

    work = gen.clone(tag="fake-adv")
    decode0 = work.forward(src, cond[None]).data
    _, taps0 = percept.forward(T.Tensor(decode0), want_taps=True)
    anchors = [T.Tensor(u.data.copy()) for u in _unit_taps(taps0)]

    opt = Optimizer(work.params(), config.optimizer)
    trace: list[float] = []
    shared = percept is surrogate.encoder
    try:
        for _ in range(config.iterations):
            decode = work.forward(src, cond[None])
            if shared:
                feats, taps = percept.forward(decode, want_taps=True)
            else:
                feats, _ = surrogate.encoder.forward(decode)
                _, taps = percept.forward(decode, want_taps=True)
            z = surrogate.logits_tensor(feats)
            l_cls = T.bce_with_logits(z, np.zeros(1))  # pull toward the real class
            l_percept = None
            for u, ref in zip(_unit_taps(taps), anchors):
                term = T.mse(u, ref)
                l_percept = term if l_percept is None else l_percept + term
            loss = config.gamma * l_cls + config.delta * l_percept
            trace.append(loss.item())
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    except T.NonFiniteValues:
        raise AttackDiverged(trace) from None

    final = work.forward(src, cond[None]).data[0, 0]
    return work, work._finish(final, seed), trace


def _craft_one(gen, surrogate, percept, config, pool, root_seed, index):
    rng = np.random.default_rng(derive_seed(root_seed, "attack-pick", index))
    cond = pool[int(rng.integers(len(pool)))]
    latent = derive_seed(root_seed, "attack-latent", index)
    source = gen._source_for(validate_condition(cond), latent)
    x_prime = gen.generate(cond, latent).pixels
    _, x_adv, trace = adversarial_update(
        gen, source, cond, surrogate, config, percept_encoder=percept, seed=latent
    )
    p_before, p_after = surrogate.p_real(np.stack([x_prime, x_adv]))
    return AttackInstance(
        index=index,
        condition=validate_condition(cond),
        seed=latent,
        x_prime=x_prime,
        x_adv=x_adv,
        p_real_before=float(p_before),
        p_real_after=float(p_after),
        trace=tuple(trace),
    )


_POOL_STATE: dict = {}


def _pool_init(gen, surrogate, percept, config, pool, root_seed):
    _POOL_STATE.update(
        gen=gen, surrogate=surrogate, percept=percept, config=config, pool=pool, seed=root_seed
    )


def _pool_task(index: int) -> AttackInstance:
    s = _POOL_STATE
    return _craft_one(s["gen"], s["surrogate"], s["percept"], s["config"], s["pool"], s["seed"], index)


def craft_adversarial_set(
    gen,
    surrogate: SurrogateClassifier,
    pool: np.ndarray,
    n_instances: int,
    config: AttackConfig = AttackConfig(),
    seed: int = 0,
    percept_encoder: Optional[FrozenEncoder] = None,
    n_jobs: int = 1,
) -> list[AttackInstance]:
    """One attack instance per requested source; each draws its target
    condition from the pool and renders its source content at that
    condition, so the pre-attack output is a standard fake restricted to
    the pool. Generator weights are reset to base before every instance.

    Instances are independent, so they can run on a worker pool; the result
    is identical for any n_jobs.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or len(pool) != POOL_SIZE:
        raise ValueError(f"condition pool must hold exactly {POOL_SIZE} conditions, got {pool.shape}")
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    surrogate.require_frozen()
    percept = percept_encoder if percept_encoder is not None else surrogate.encoder

    if n_jobs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(
            n_jobs, initializer=_pool_init, initargs=(gen, surrogate, percept, config, pool, seed)
        ) as workers:
            return workers.map(_pool_task, range(n_instances), chunksize=8)
    return [
        _craft_one(gen, surrogate, percept, config, pool, seed, i) for i in range(n_instances)
    ]
