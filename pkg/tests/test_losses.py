import numpy as np
import pytest

from delnet.losses import (LOG_HEADER, LossConfig, RandomFeatureExtractor, l1_modified, loss_ms_ssim,
                           loss_perceptual, loss_total)
from delnet.tensor import ShapeError, Tensor

from oracles import loss_by_hand

# fixed 4x4 pair; gt contains exact zeros so the epsilon floor is exercised
GT_4x4 = (np.arange(48).reshape(3, 4, 4) * 7 % 48) / 47.0
PRED_4x4 = np.clip(GT_4x4 + ((np.arange(48).reshape(3, 4, 4) % 5) - 2) * 0.04, 0, 1)
# independent numpy evaluation (tests/oracles.py::loss_by_hand), frozen
FROZEN_TOTAL_4x4 = 0.18885250843065118


def test_loss_of_identical_images_is_zero():
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16)))
    total, parts = loss_total(x, x)
    assert total.item() == 0.0
    assert parts.l1 == parts.ssim == parts.perceptual == 0.0


def test_4x4_matches_hand_computation():
    fx = RandomFeatureExtractor(0)
    want, l1, ss, pc = loss_by_hand(GT_4x4, PRED_4x4, fx.weights)
    total, parts = loss_total(Tensor(GT_4x4[None]), Tensor(PRED_4x4[None]), LossConfig(extractor=fx))
    assert abs(total.item() - want) < 1e-9
    assert abs(total.item() - FROZEN_TOTAL_4x4) < 1e-9
    assert abs(parts.l1 - l1) < 1e-9 and abs(parts.ssim - ss) < 1e-9 and abs(parts.perceptual - pc) < 1e-9


def test_default_weights():
    cfg = LossConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.epsilon) == (0.85, 0.15, 1.0, 1e-3)


def test_l1_modified_scalar_case():
    got = l1_modified(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.full((1, 1, 1, 1), 0.5))).item()
    assert abs(got - (0.5 + np.log(2.0))) < 1e-12


def test_l1_modified_epsilon_floor():
    gt, pred = Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.full((1, 1, 1, 1), 1e-5))
    # both logs floored at log(1e-3): only the plain term survives
    assert abs(l1_modified(gt, pred).item() - 1e-5) < 1e-15


def test_zero_weight_terms_are_skipped():
    class Boom:
        def __call__(self, image):
            raise AssertionError("extractor should not run")

    x = Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 8, 8)))
    y = Tensor(np.random.default_rng(2).uniform(0, 1, (1, 3, 8, 8)))
    total, parts = loss_total(x, y, LossConfig(lambda3=0.0, extractor=Boom()))
    assert parts.perceptual == 0.0 and total.item() > 0


def test_extractor_is_seeded_and_frozen():
    a, b = RandomFeatureExtractor(3), RandomFeatureExtractor(3)
    assert all(np.array_equal(u, v) for u, v in zip(a.weights, b.weights))
    feats = a(Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 16))))
    assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4)]
    assert not any(f.requires_grad for f in feats)


def test_extractor_follows_input_dtype():
    fx = RandomFeatureExtractor(0)
    assert fx(Tensor(np.zeros((1, 3, 4, 4), np.float32)))[0].dtype == np.float32
    assert fx(Tensor(np.zeros((1, 3, 4, 4), np.float64)))[0].dtype == np.float64


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_total(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 6))))
    with pytest.raises(ShapeError):
        loss_perceptual(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))),
                        RandomFeatureExtractor())


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossConfig(lambda2=-1.0)


def test_breakdown_record_is_csv():
    x = Tensor(GT_4x4[None])
    y = Tensor(PRED_4x4[None])
    _, parts = loss_total(x, y)
    fields = parts.record(7).split(",")
    assert len(fields) == len(LOG_HEADER.split(",")) == 5
    assert fields[0] == "7" and float(fields[1]) == pytest.approx(parts.total)


def test_loss_ms_ssim_range():
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 32, 32)))
    assert loss_ms_ssim(x, x).item() == pytest.approx(0.0, abs=1e-12)
