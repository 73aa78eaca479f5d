"""Binary real/fake classifiers over the spectral and embedding feature
pipelines, plus an OR-ensemble and adversarial fine-tuning."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import FrozenEncoder
from .features import DctConfig, combined_features, log_dct_features
from .nn import Conv2d, Linear, collect_params, params_checksum
from .optim import Optimizer, OptimizerConfig
from .world import DatasetSplit, derive_seed, images_of, labels_of

KINDS = ("dct-lr", "residual-dct-lr", "cnn", "embedding")

# per-kind training defaults, used when DetectorConfig leaves the field unset.
# The spectral heads are linearly separable in a handful of epochs; stopping
# there keeps their margins on the strongest feature axes.
_EPOCHS = {"dct-lr": 6, "residual-dct-lr": 6, "cnn": 8, "embedding": 25}
_LEARNING_RATES = {"dct-lr": 2e-2, "residual-dct-lr": 2e-2, "cnn": 1e-3, "embedding": 2e-3}


@dataclass(frozen=True)
class DetectorConfig:
    epochs: int | None = None  # None -> per-kind default
    batch_size: int = 64
    learning_rate: float | None = None  # None -> per-kind default
    weight_decay: float = 1e-3  # L2 penalty on classifier weights, not biases
    threshold: float = 0.5
    cnn_channels: tuple = (8, 16, 32)
    dct: DctConfig = field(default_factory=DctConfig)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1 when given")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def epochs_for(self, kind: str) -> int:
        return self.epochs if self.epochs is not None else _EPOCHS[kind]

    def learning_rate_for(self, kind: str) -> float:
        return self.learning_rate if self.learning_rate is not None else _LEARNING_RATES[kind]


class _ConvNet:
    """Small conv net scoring 64x64 grayscale images with a single logit."""

    def __init__(self, channels: tuple, seed: int):
        c1, c2, c3 = channels
        rng = np.random.default_rng(derive_seed(seed, "detector-cnn-init"))
        self.conv1 = Conv2d(1, c1, 4, stride=2, pad=1, rng=rng)
        self.conv2 = Conv2d(c1, c2, 4, stride=2, pad=1, rng=rng)
        self.conv3 = Conv2d(c2, c3, 4, stride=2, pad=1, rng=rng)
        self.head = Linear(4 * c3, 1, rng=rng)
        self.channels = tuple(channels)

    def named_params(self):
        return collect_params(
            [("conv1", self.conv1), ("conv2", self.conv2), ("conv3", self.conv3), ("head", self.head)]
        )

    def logits(self, x: T.Tensor) -> T.Tensor:
        x0 = x + T.Tensor(np.array(-0.5))
        h1 = T.leaky_relu(self.conv1(x0))
        h2 = T.leaky_relu(self.conv2(h1))
        h3 = T.leaky_relu(self.conv3(h2))
        s = h3.shape[-1]
        pooled = T.avg_pool2d(h3, s // 2)
        flat = T.reshape(pooled, (x.shape[0], 4 * self.channels[2]))
        return T.reshape(self.head(flat), (x.shape[0],))


@dataclass
class Detector:
    """A trained classifier: feature recipe, parameters, decision threshold.

    Labels are booleans with True = fake; an image is flagged fake iff its
    score reaches the threshold (ties count as fake).
    """

    kind: str
    threshold: float = 0.5
    dct: DctConfig = field(default_factory=DctConfig)
    weights: np.ndarray | None = None  # linear kinds: (d,) on standardized features
    bias: float = 0.0
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    net: _ConvNet | None = None  # cnn kind
    encoder: FrozenEncoder | None = None  # embedding kind
    val_f1: float = float("nan")
    warnings: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind '{self.kind}'; expected one of {KINDS}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def detector_id(self) -> str:
        if self.kind == "embedding":
            return f"embedding-{self.encoder.config.tier}"
        return self.kind

    def trained(self) -> bool:
        return self.net is not None if self.kind == "cnn" else self.weights is not None

    def raw_features(self, images: np.ndarray) -> np.ndarray:
        """(N,S,S) images -> (N,d) unstandardized features for linear kinds."""
        if self.kind == "dct-lr":
            return np.stack([log_dct_features(im, self.dct) for im in images])
        if self.kind == "residual-dct-lr":
            return np.stack([combined_features(im, self.dct) for im in images])
        if self.kind == "embedding":
            self.encoder.require_frozen()
            return self.encoder.features(images)
        raise ValueError(f"kind '{self.kind}' has no feature vector form")

    def scores(self, images, chunk: int = 256) -> np.ndarray:
        """Fake-probability per image; accepts (S,S) or (N,S,S)."""
        if not self.trained():
            raise RuntimeError("detector is untrained")
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        out = np.empty(arr.shape[0])
        for start in range(0, arr.shape[0], chunk):
            batch = arr[start : start + chunk]
            if self.kind == "cnn":
                z = self.net.logits(T.Tensor(batch[:, None])).data
            else:
                f = (self.raw_features(batch) - self.feature_mean) / self.feature_std
                z = f @ self.weights + self.bias
            out[start : start + len(batch)] = 1.0 / (1.0 + np.exp(-z))
        return out[0] if single else out


def predict(detector: Detector, images):
    """Score and label; label True means fake. Ties at the threshold flag fake."""
    s = detector.scores(images)
    return s, s >= detector.threshold


def _standardize_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd[sd < 1e-8] = 1.0  # constant features carry no signal; leave them unscaled
    return mu, sd


def _fit_linear(detector, feats, labels, config, seed, epochs, lr):
    """Logistic regression by minibatch gradient descent on given features."""
    f = (feats - detector.feature_mean) / detector.feature_std
    w = T.Tensor(detector.weights.copy(), requires_grad=True)
    b = T.Tensor(np.array(detector.bias), requires_grad=True)
    opt = Optimizer([w, b], OptimizerConfig(kind="adam", learning_rate=lr))
    n = len(f)
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "detector-epoch", detector.kind, epoch))
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            z = T.matmul(T.Tensor(f[idx]), T.reshape(w, (-1, 1)))
            z = T.reshape(z, (len(idx),)) + b
            loss = T.bce_with_logits(z, labels[idx])
            if config.weight_decay > 0:
                loss = loss + config.weight_decay * (w * w).sum()
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    detector.weights = w.data
    detector.bias = float(b.data)


def _fit_cnn(detector, images, labels, config, seed, epochs, lr):
    params = [p for _, p in detector.net.named_params()]
    opt = Optimizer(params, OptimizerConfig(kind="adam", learning_rate=lr))
    n = len(images)
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "detector-epoch", "cnn", epoch))
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            z = detector.net.logits(T.Tensor(images[idx][:, None]))
            loss = T.bce_with_logits(z, labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()


def train_detector(
    kind: str,
    split: DatasetSplit,
    config: DetectorConfig = DetectorConfig(),
    encoder: FrozenEncoder | None = None,
    seed: int = 0,
) -> Detector:
    """Fit one detector kind on a labeled split; embedding kind needs a frozen encoder."""
    if kind not in KINDS:
        raise ValueError(f"unknown detector kind '{kind}'; expected one of {KINDS}")
    if kind == "embedding":
        if encoder is None:
            raise ValueError("embedding detector requires a frozen encoder")
        encoder.require_frozen()
    if not split.train:
        raise ValueError("training split is empty")

    det = Detector(kind=kind, threshold=config.threshold, dct=config.dct, encoder=encoder)
    images = images_of(split.train)
    labels = labels_of(split.train)
    epochs = config.epochs_for(kind)
    lr = config.learning_rate_for(kind)

    if kind == "cnn":
        det.net = _ConvNet(config.cnn_channels, seed)
        _fit_cnn(det, images, labels, config, seed, epochs, lr)
    else:
        feats = det.raw_features(images)
        det.feature_mean, det.feature_std = _standardize_stats(feats)
        rng = np.random.default_rng(derive_seed(seed, "detector-init", kind))
        det.weights = rng.normal(0.0, 0.01, feats.shape[1])
        det.bias = 0.0
        _fit_linear(det, feats, labels, config, seed, epochs, lr)

    if split.val:
        result = evaluate(det, split.val)
        det.val_f1 = result.f1
        if result.f1 < 0.6:
            det.warnings = det.warnings + (
                f"validation F1 {result.f1:.3f} below 0.6; treat as non-converged",
            )
    return det


@dataclass(frozen=True)
class EvalResult:
    """Fake-class precision/recall/F1 with raw confusion counts."""

    precision: float
    recall: float
    f1: float
    n: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    flags: tuple = ()


def _prf(tp: int, fp: int, fn: int, tn: int) -> EvalResult:
    flags = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, flags = 0.0, flags + ["zero-denominator:precision"]
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, flags = 0.0, flags + ["zero-denominator:recall"]
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, flags = 0.0, flags + ["zero-denominator:f1"]
    return EvalResult(precision, recall, f1, tp + fp + fn + tn, tp, fp, fn, tn, tuple(flags))


def evaluate(detector: Detector, items) -> EvalResult:
    """Fake-class precision/recall/F1 over labeled images."""
    if len(items) == 0:
        raise ValueError("evaluation set is empty")
    truth = labels_of(items) >= 0.5
    _, flagged = predict(detector, images_of(items))
    tp = int(np.sum(flagged & truth))
    fp = int(np.sum(flagged & ~truth))
    fn = int(np.sum(~flagged & truth))
    tn = int(np.sum(~flagged & ~truth))
    return _prf(tp, fp, fn, tn)


def ensemble_predict(detectors, images):
    """Flag fake if any member flags fake. Needs at least two members."""
    if len(detectors) < 2:
        raise ValueError(f"ensemble needs >= 2 detectors, got {len(detectors)}")
    flagged = None
    for det in detectors:
        _, labels = predict(det, images)
        flagged = labels if flagged is None else (flagged | labels)
    return flagged


def evaluate_ensemble(detectors, items) -> EvalResult:
    if len(items) == 0:
        raise ValueError("evaluation set is empty")
    truth = labels_of(items) >= 0.5
    flagged = ensemble_predict(detectors, images_of(items))
    tp = int(np.sum(flagged & truth))
    fp = int(np.sum(flagged & ~truth))
    fn = int(np.sum(~flagged & truth))
    tn = int(np.sum(~flagged & ~truth))
    return _prf(tp, fp, fn, tn)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 3e-4
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def adversarial_finetune(
    detector: Detector, adv_split: DatasetSplit, config: FinetuneConfig = FinetuneConfig(), seed: int = 0
) -> Detector:
    """Continue training a copy of the detector on adversarial fakes plus fresh
    reals. Feature standardization stays pinned to the original training stats.
    Zero epochs returns an identical copy."""
    if not detector.trained():
        raise RuntimeError("detector is untrained")
    if not adv_split.train:
        raise ValueError("fine-tuning split is empty")
    # frozen encoders are shared, never copied
    memo = {} if detector.encoder is None else {id(detector.encoder): detector.encoder}
    new = copy.deepcopy(detector, memo)
    if config.epochs == 0:
        return new
    images = images_of(adv_split.train)
    labels = labels_of(adv_split.train)
    det_cfg = DetectorConfig(
        batch_size=config.batch_size, weight_decay=config.weight_decay, threshold=detector.threshold
    )
    if new.kind == "cnn":
        _fit_cnn(new, images, labels, det_cfg, derive_seed(seed, "finetune"), config.epochs, config.learning_rate)
    else:
        feats = new.raw_features(images)
        _fit_linear(new, feats, labels, det_cfg, derive_seed(seed, "finetune"), config.epochs, config.learning_rate)
    if adv_split.val:
        result = evaluate(new, adv_split.val)
        new.val_f1 = result.f1
        if result.f1 < 0.6:
            new.warnings = new.warnings + (
                f"validation F1 {result.f1:.3f} below 0.6; treat as non-converged",
            )
    return new
