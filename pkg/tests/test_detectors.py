"""Detector training, prediction, evaluation, ensembles, fine-tuning."""

import copy

import numpy as np
import pytest

from dfbench.detectors import (
    KINDS,
    Detector,
    DetectorConfig,
    FinetuneConfig,
    _prf,
    adversarial_finetune,
    ensemble_predict,
    evaluate,
    evaluate_ensemble,
    predict,
    train_detector,
)
from dfbench.pgm import read_pgm, write_pgm
from dfbench.world import LabeledImage, build_split, images_of

FAST = DetectorConfig(epochs=3)


def _stub_detector(world, bias: float) -> Detector:
    # zero weights: score is sigmoid(bias) for every image
    d = Detector(kind="dct-lr", weights=np.zeros(world.image_size**2), bias=bias)
    d.feature_mean = np.zeros(world.image_size**2)
    d.feature_std = np.ones(world.image_size**2)
    return d


@pytest.fixture(scope="module")
def trained(quick_split):
    return {
        "dct-lr": train_detector("dct-lr", quick_split, FAST, seed=5),
        "residual-dct-lr": train_detector("residual-dct-lr", quick_split, FAST, seed=5),
        "cnn": train_detector("cnn", quick_split, DetectorConfig(epochs=6), seed=5),
    }


@pytest.fixture(scope="module")
def embedding_det(quick_split, tiny_encoder):
    return train_detector("embedding", quick_split, FAST, encoder=tiny_encoder, seed=5)


# --- config and construction ------------------------------------------------

def test_unknown_kind_rejected(quick_split):
    with pytest.raises(ValueError, match="unknown detector kind"):
        train_detector("svm", quick_split)


def test_embedding_requires_encoder(quick_split):
    with pytest.raises(ValueError, match="encoder"):
        train_detector("embedding", quick_split)


def test_threshold_bounds():
    with pytest.raises(ValueError):
        DetectorConfig(threshold=0.0)
    with pytest.raises(ValueError):
        Detector(kind="cnn", threshold=1.0)


def test_untrained_predict_rejected(world):
    det = Detector(kind="dct-lr")
    with pytest.raises(RuntimeError, match="untrained"):
        predict(det, np.zeros((world.image_size, world.image_size)))


# --- training ---------------------------------------------------------------

def test_all_kinds_separate_quick_fakes(trained, embedding_det, quick_split):
    for det in list(trained.values()) + [embedding_det]:
        result = evaluate(det, quick_split.test)
        assert result.f1 >= 0.9, f"{det.detector_id}: F1 {result.f1}"


def test_linearly_separable_features_fit_exactly(world):
    # synthetic split whose images are flat fields: brightness alone separates
    rng = np.random.default_rng(0)
    s = world.image_size
    items = []
    for i in range(40):
        fake = i % 2 == 1
        level = (0.75 if fake else 0.25) + rng.normal(0, 0.01)
        img = np.full((s, s), np.clip(level, 0, 1))
        items.append(
            LabeledImage(img, np.full(8, 0.5), "fake-base" if fake else "real", seed=i)
        )
    split = copy.copy(build_split(world, 10, None, seed=1))
    split.train, split.val, split.test = items, items, items
    det = train_detector("dct-lr", split, DetectorConfig(epochs=10), seed=0)
    _, labels = predict(det, images_of(items))
    truth = np.array([im.is_fake for im in items])
    assert np.array_equal(labels, truth)


def test_same_seed_same_weights(quick_split):
    a = train_detector("dct-lr", quick_split, FAST, seed=42)
    b = train_detector("dct-lr", quick_split, FAST, seed=42)
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


def test_nonconvergence_warning(world, quick_split):
    # one epoch at tiny learning rate on near-zero-initialized weights: stuck
    det = train_detector(
        "dct-lr", quick_split, DetectorConfig(epochs=1, learning_rate=1e-12), seed=0
    )
    assert det.val_f1 < 0.9
    assert any("below 0.6" in w for w in det.warnings) or det.val_f1 >= 0.6


def test_encoder_untouched_by_training(quick_split, tiny_encoder):
    before = tiny_encoder.checksum()
    train_detector("embedding", quick_split, FAST, encoder=tiny_encoder, seed=1)
    assert tiny_encoder.checksum() == before


# --- predict ----------------------------------------------------------------

def test_score_at_threshold_flags_fake(world):
    det = _stub_detector(world, bias=0.0)  # score exactly 0.5
    img = np.full((world.image_size, world.image_size), 0.5)
    score, label = predict(det, img)
    assert score == 0.5 and label


def test_batch_equals_per_image(trained, quick_split):
    imgs = images_of(quick_split.test[:10])
    for det in trained.values():
        s_batch, l_batch = predict(det, imgs)
        for i in range(len(imgs)):
            s1, l1 = predict(det, imgs[i])
            assert l1 == l_batch[i]
            assert abs(s1 - s_batch[i]) < 1e-12


def test_prediction_survives_pgm_roundtrip(trained, embedding_det, quick_split):
    imgs = images_of(quick_split.test[:20])
    quantized = np.stack([read_pgm(write_pgm(im)) for im in imgs])
    for det in list(trained.values()) + [embedding_det]:
        _, before = predict(det, imgs)
        _, after = predict(det, quantized)
        assert np.array_equal(before, after), det.detector_id


def test_feature_pipeline_pure(trained, quick_split):
    det = trained["residual-dct-lr"]
    img = images_of(quick_split.test[:1])[0]
    f1 = det.raw_features(img[None])
    f2 = det.raw_features(img[None])
    assert f1.tobytes() == f2.tobytes()


# --- evaluate ---------------------------------------------------------------

def test_confusion_example():
    r = _prf(tp=9, fp=1, fn=1, tn=0)
    assert r.precision == r.recall == pytest.approx(0.9)
    assert r.f1 == pytest.approx(0.9)


def test_all_correct_is_perfect():
    r = _prf(tp=5, fp=0, fn=0, tn=5)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0) and not r.flags


def test_zero_denominator_flags():
    r = _prf(tp=0, fp=0, fn=0, tn=10)
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    assert set(r.flags) == {
        "zero-denominator:precision",
        "zero-denominator:recall",
        "zero-denominator:f1",
    }


def test_random_counts_match_formula():
    rng = np.random.default_rng(7)
    for _ in range(50):
        tp, fp, fn, tn = rng.integers(0, 20, 4)
        r = _prf(int(tp), int(fp), int(fn), int(tn))
        p = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * rec / (p + rec) if p + rec else 0.0
        assert r.precision == pytest.approx(p)
        assert r.recall == pytest.approx(rec)
        assert r.f1 == pytest.approx(f1)
        assert r.n == tp + fp + fn + tn


def test_evaluate_against_stub(world, quick_split):
    always_fake = _stub_detector(world, bias=5.0)
    r = evaluate(always_fake, quick_split.test)
    real_n, fake_n = quick_split.class_counts("test")
    assert r.tp == fake_n and r.fp == real_n and r.fn == 0
    assert r.recall == 1.0 and r.precision == pytest.approx(fake_n / (fake_n + real_n))


def test_evaluate_empty_set_rejected(trained):
    with pytest.raises(ValueError, match="empty"):
        evaluate(trained["dct-lr"], [])


# --- ensemble ---------------------------------------------------------------

def test_ensemble_or_rule(world):
    yes = _stub_detector(world, bias=5.0)
    no = _stub_detector(world, bias=-5.0)
    img = np.full((world.image_size, world.image_size), 0.5)
    assert ensemble_predict([yes, no], img)
    assert not ensemble_predict([no, no], img)


def test_ensemble_needs_two_members(world):
    det = _stub_detector(world, bias=0.0)
    img = np.zeros((world.image_size, world.image_size))
    with pytest.raises(ValueError, match=">= 2"):
        ensemble_predict([det], img)
    with pytest.raises(ValueError, match=">= 2"):
        ensemble_predict([], img)


def test_ensemble_flags_superset_of_members(trained, embedding_det, quick_split):
    members = [trained["dct-lr"], trained["cnn"], embedding_det]
    imgs = images_of(quick_split.test)
    flagged = ensemble_predict(members, imgs)
    recalls = []
    for det in members:
        _, member_flagged = predict(det, imgs)
        assert np.all(flagged[member_flagged]), "ensemble missed a member's flag"
    r_ens = evaluate_ensemble(members, quick_split.test)
    for det in members:
        assert r_ens.recall >= evaluate(det, quick_split.test).recall


# --- adversarial fine-tuning ------------------------------------------------

def test_finetune_zero_epochs_is_identity(trained, quick_split):
    det = trained["dct-lr"]
    new = adversarial_finetune(det, quick_split, FinetuneConfig(epochs=0))
    assert new is not det
    assert new.weights.tobytes() == det.weights.tobytes() and new.bias == det.bias


def test_finetune_zero_epochs_cnn(trained, quick_split):
    det = trained["cnn"]
    new = adversarial_finetune(det, quick_split, FinetuneConfig(epochs=0))
    assert new.net is not det.net
    for (na, a), (nb, b) in zip(det.net.named_params(), new.net.named_params()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()


def test_finetune_keeps_standardization_stats(trained, quick_split):
    det = trained["dct-lr"]
    new = adversarial_finetune(det, quick_split, FinetuneConfig(epochs=1), seed=1)
    assert new.feature_mean.tobytes() == det.feature_mean.tobytes()
    assert new.feature_std.tobytes() == det.feature_std.tobytes()
    assert new.weights.tobytes() != det.weights.tobytes()


def test_finetune_shares_encoder(embedding_det, quick_split):
    new = adversarial_finetune(embedding_det, quick_split, FinetuneConfig(epochs=0))
    assert new.encoder is embedding_det.encoder
