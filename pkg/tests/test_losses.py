import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrcmv.losses import (
    EmptyTripletWarning,
    LossConfig,
    TripletBatch,
    margin_at,
    pseudo_label_loss,
    total_loss,
    triplet_loss,
    uniform_pseudo_label_loss,
)
from mrcmv.numerics import Parameter, Tensor, gradient_check, l2_normalize_row
from mrcmv.verify import naive_pseudo_label_loss, naive_triplet_loss


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.parametrize("epoch,alpha", [(0, 30), (79, 30), (80, 40), (85, 40), (89, 40), (90, 50), (95, 50), (140, 100), (500, 100)])
def test_margin_schedule(epoch, alpha):
    assert margin_at(epoch) == alpha


def test_margin_scale_and_uncapped():
    assert margin_at(85, LossConfig(margin_scale=0.01)) == pytest.approx(0.4)
    assert margin_at(500, LossConfig(margin_cap=None)) == 30 + 10 * 43


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6), alpha=st.floats(0.0, 2.0))
def test_triplet_matches_oracle(seed, n, alpha):
    rng = np.random.default_rng(seed)
    j, m = unit(rng, n, 4), unit(rng, n, 4)
    labels = rng.integers(0, 3, n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTripletWarning)
        got = triplet_loss(TripletBatch(Tensor(j), Tensor(m), labels), alpha).item()
    assert got == pytest.approx(naive_triplet_loss(j, m, labels, alpha), rel=1e-12, abs=1e-12)


def test_triplet_ignores_same_label_negatives(rng):
    j, m = unit(rng, 3, 4), unit(rng, 3, 4)
    a = triplet_loss(TripletBatch(Tensor(j), Tensor(m), [0, 1, 2]), 1.0).item()
    b = triplet_loss(TripletBatch(Tensor(j), Tensor(m), [0, 0, 2]), 1.0).item()
    assert b < a


def test_all_same_label_warns_and_is_zero(rng):
    j, m = unit(rng, 3, 4), unit(rng, 3, 4)
    with pytest.warns(EmptyTripletWarning):
        assert triplet_loss(TripletBatch(Tensor(j), Tensor(m), [1, 1, 1]), 0.5).item() == 0.0


def test_perfectly_separated_batch_has_zero_triplet():
    e = np.eye(3)
    assert triplet_loss(TripletBatch(Tensor(e), Tensor(e), [0, 1, 2]), 1.0).item() == 0.0


def test_pseudo_label_matches_oracle(rng):
    j, m = unit(rng, 4, 5), unit(rng, 4, 5)
    wj, wm = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 2])
    got = pseudo_label_loss(TripletBatch(Tensor(j), Tensor(m), labels), Tensor(wj), Tensor(wm)).item()
    assert got == pytest.approx(naive_pseudo_label_loss(j, m, labels, wj, wm), rel=1e-12)


def test_zero_heads_give_uniform_value(rng):
    j, m = unit(rng, 4, 5), unit(rng, 4, 5)
    z = np.zeros((5, 6))
    got = pseudo_label_loss(TripletBatch(Tensor(j), Tensor(m), [0, 1, 2, 3]), Tensor(z), Tensor(z)).item()
    assert got == pytest.approx(uniform_pseudo_label_loss(4, 6), rel=1e-13)


def test_total_is_weighted_sum(rng):
    j, m = unit(rng, 4, 5), unit(rng, 4, 5)
    wj, wm = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 4)))
    terms = total_loss(TripletBatch(Tensor(j), Tensor(m), [0, 1, 2, 3]), 0.3, LossConfig(lam=0.25), wj, wm)
    total, l1, l2 = terms.floats()
    assert total == pytest.approx(l1 + 0.25 * l2, rel=1e-14)


def test_loss_gradients_through_normalization(rng):
    xj = Parameter("xj", rng.standard_normal((4, 5)))
    xm = Parameter("xm", rng.standard_normal((4, 5)))
    wj, wm = Parameter("wj", rng.standard_normal((5, 3))), Parameter("wm", rng.standard_normal((5, 3)))
    labels = np.array([0, 1, 2, 0])

    def loss():
        batch = TripletBatch(l2_normalize_row(xj), l2_normalize_row(xm), labels)
        return total_loss(batch, 5.0, LossConfig(), wj, wm).total

    assert gradient_check(loss, [xj, xm, wj, wm]) < 1e-6


def test_batch_shape_validation(rng):
    with pytest.raises(ValueError):
        TripletBatch(Tensor(unit(rng, 3, 4)), Tensor(unit(rng, 2, 4)), [0, 1, 2])


@pytest.mark.parametrize("bad", [dict(lam=-1), dict(margin_interval=0), dict(margin_scale=0)])
def test_loss_config_validation(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad)
