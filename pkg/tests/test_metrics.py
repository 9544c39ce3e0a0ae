import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegground.acceptance import naive_balanced_accuracy, naive_weighted_f1
from eegground.metrics import (PSNR_CAP_DB, balanced_accuracy, classification_report, confusion_matrix, psnr,
                               ssim, weighted_f1)

labels = st.integers(2, 6).flatmap(lambda k: st.integers(1, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, k - 1), min_size=n, max_size=n), st.lists(st.integers(0, k - 1), min_size=n, max_size=n))))


@given(labels)
def test_metrics_match_naive_exactly(yy):
    yt, yp = yy
    assert balanced_accuracy(yt, yp) == naive_balanced_accuracy(yt, yp)
    assert weighted_f1(yt, yp) == naive_weighted_f1(yt, yp)


def test_hand_case():
    assert balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(0.75, abs=1e-9)
    assert weighted_f1([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(0.733333333, abs=1e-9)


def test_perfect_and_degenerate():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert weighted_f1([0, 0], [1, 1]) == 0.0
    with pytest.raises(ValueError):
        balanced_accuracy([], [])
    with pytest.raises(ValueError):
        balanced_accuracy([0, 1], [0])


def test_confusion_and_report():
    cm = confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], num_classes=4)
    assert cm.shape == (4, 4) and cm[1, 2] == 1 and cm.sum() == 4
    rep = classification_report([0, 1, 1, 2], [0, 2, 1, 2])
    assert rep.count == 4 and rep.recall[1] == 0.5


def test_psnr_known_value_and_cap():
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0, abs=1e-9)
    img = np.random.default_rng(0).random((4, 4, 3))
    assert psnr(img, img) == PSNR_CAP_DB


def test_psnr_monotone_on_mse_ladder():
    base = np.zeros((8, 8))
    values = [psnr(base, np.full((8, 8), d)) for d in np.linspace(0.01, 0.9, 25)]
    assert all(a > b for a, b in zip(values, values[1:]))


images = arrays(np.float64, st.tuples(st.integers(11, 20), st.integers(11, 20)), elements=st.floats(0, 1))


@given(images)
def test_ssim_identity_exact(a):
    assert ssim(a, a) == 1.0


@given(images, st.integers(0, 2**32 - 1))
def test_ssim_symmetric_and_bounded(a, seed):
    b = np.clip(a + np.random.default_rng(seed).normal(0, 0.2, a.shape), 0, 1)
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1.0 <= s <= 1.0


def test_ssim_rgb_and_small_image():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16, 3))
    assert ssim(img, img) == 1.0
    assert ssim(img, rng.random((16, 16, 3))) < 0.5
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
