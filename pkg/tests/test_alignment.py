import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegground import tensor as T
from eegground.acceptance import naive_info_nce, naive_trimodal
from eegground.alignment import (AlignmentConfig, BatchEmbeddings, info_nce, pairwise_loss, retrieval_accuracy,
                                 train_stage1, trimodal_loss)
from eegground.encoders import Vocabulary
from eegground.tensor import ShapeError, Tensor


def test_identical_pair_gives_ln2():
    v = np.ones((2, 5))
    assert info_nce(Tensor(v), Tensor(v), 0.07).item() == pytest.approx(math.log(2), abs=1e-12)


@given(st.integers(2, 6), st.integers(2, 8), st.floats(0.05, 2.0), st.integers(0, 10**6))
def test_info_nce_oracle_and_scale_invariance(n, d, tau, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    got = info_nce(Tensor(a), Tensor(b), tau).item()
    assert got == pytest.approx(naive_info_nce(a, b, tau), abs=1e-10)
    assert info_nce(Tensor(a * 3.0), Tensor(b * 0.5), tau).item() == pytest.approx(got, abs=1e-10)
    assert got >= 0


def test_info_nce_rejects_bad_input():
    with pytest.raises(ShapeError):
        info_nce(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 0.1)
    with pytest.raises(ValueError):
        info_nce(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), 0.0)


def test_pairwise_regression_uses_stop_gradient(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    hb = Tensor(b, requires_grad=True)
    ha = Tensor(a, requires_grad=True)
    g_a, g_b = T.gradients(pairwise_loss(ha, hb, 0.3, 0.1), [ha, hb])
    (ref_b,) = T.gradients(T.scale(info_nce(Tensor(a), hb, 0.1), 0.3), [hb])
    np.testing.assert_array_equal(g_b, ref_b)
    assert np.any(g_a != 0)


def test_trimodal_mask_and_absent_terms(rng):
    cfg = AlignmentConfig()
    e, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    present = np.array([True, False, False, False])
    br = trimodal_loss(BatchEmbeddings(Tensor(e), Tensor(t), Tensor(rng.normal(size=(1, 3))), present), cfg)
    assert sorted(br.absent) == ["ei", "it"]
    assert br.total.item() == pytest.approx(pairwise_loss(Tensor(e), Tensor(t), 0.5, 0.07).item())
    present = np.array([True, True, False, True])
    img = rng.normal(size=(3, 3))
    br = trimodal_loss(BatchEmbeddings(Tensor(e), Tensor(t), Tensor(img), present), cfg)
    assert br.total.item() == pytest.approx(naive_trimodal(e, t, img, present, cfg), abs=1e-10)


@pytest.mark.parametrize("mode, terms", [("image_only", ["ei"]), ("text_only", ["et"]),
                                         ("trimodal", ["ei", "et", "it"])])
def test_modes_select_terms(rng, mode, terms):
    e, t, i = (rng.normal(size=(4, 3)) for _ in range(3))
    br = trimodal_loss(BatchEmbeddings(Tensor(e), Tensor(t), Tensor(i), np.ones(4, bool)),
                       AlignmentConfig(alignment_mode=mode))
    assert sorted(br.terms) == terms


@pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(alpha=1.0), dict(temperature=0.0),
                                 dict(lambda_ei=-1.0), dict(alignment_mode="dual")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AlignmentConfig(**bad).validate()


def test_training_lowers_loss_and_is_deterministic(tiny_corpora, tiny_enc):
    vis, cl = tiny_corpora
    vocab = Vocabulary.from_texts(vis.prompts + cl.prompts)
    cfg = AlignmentConfig(steps=30, batch_size=8, lr=3e-3)
    a = train_stage1(cfg, [vis, cl], tiny_enc, vocab)
    b = train_stage1(cfg, [vis, cl], tiny_enc, vocab)
    assert np.mean([r["total"] for r in a.log[-5:]]) < np.mean([r["total"] for r in a.log[:5]])
    for (k, x), (_, y) in zip(a.encoders.state_dict().items(), b.encoders.state_dict().items()):
        np.testing.assert_array_equal(x, y, err_msg=k)
    acc, chance = retrieval_accuracy(a.encoders, [vis], "val")
    assert 0 <= acc <= 1 and chance == pytest.approx(1 / len(vis.split("val")))


def test_zero_steps_leaves_init(tiny_corpora, tiny_enc):
    vis, cl = tiny_corpora
    vocab = Vocabulary.from_texts(vis.prompts + cl.prompts)
    res = train_stage1(AlignmentConfig(steps=0), [vis], tiny_enc, vocab)
    from eegground.encoders import Encoders

    init = Encoders(tiny_enc, vocab, 0).state_dict()
    for k, v in res.encoders.state_dict().items():
        np.testing.assert_array_equal(v, init[k])
