import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegground import tensor as T
from eegground.acceptance import naive_similarity_probs
from eegground.alignment import embed_eeg
from eegground.encoders import Encoders, Vocabulary
from eegground.predictor import (PredictorConfig, TokenPredictor, predict_token_grid, token_accuracy, token_loss,
                                 token_probs_similarity, train_stage2)
from eegground.tensor import ShapeError, Tensor
from eegground.tokenizer import Codebook, build_tokenizer


@given(st.integers(0, 10**6), st.floats(0.02, 2.0))
def test_similarity_probs_oracle_and_scale(seed, tau):
    rng = np.random.default_rng(seed)
    codes, h = rng.normal(size=(12, 5)), rng.normal(size=(3, 5))
    p = token_probs_similarity(Tensor(h), codes, tau).data
    np.testing.assert_allclose(p, naive_similarity_probs(h, codes, tau), atol=1e-10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(token_probs_similarity(Tensor(h * 7.5), codes, tau).data, p, atol=1e-12)


def test_similarity_head_recovers_codeword():
    codes = np.random.default_rng(0).normal(size=(256, 64))
    assert token_probs_similarity(Tensor(codes[3:4]), codes, 1e-4).data[0, 3] > 0.999


def test_codebook_gets_no_gradient():
    codes = np.random.default_rng(1).normal(size=(6, 4))
    h = Tensor(np.ones((2, 4)), requires_grad=True)
    (g,) = T.gradients(T.sum_(token_probs_similarity(h, codes, 0.5) * Tensor(np.arange(6.0))), [h])
    assert np.all(np.isfinite(g))
    with pytest.raises(ValueError):
        token_probs_similarity(h, np.zeros((3, 4)), 0.5)
    with pytest.raises(ShapeError):
        token_probs_similarity(h, np.ones((3, 5)), 0.5)


def _setup(tiny_corpora, tiny_enc):
    vis, cl = tiny_corpora
    enc = Encoders(tiny_enc, Vocabulary.from_texts(vis.prompts + cl.prompts), 0)
    pe = enc.enc_img.patch_embed
    tok = build_tokenizer(tiny_enc, pe.weight.data, pe.bias.data, vis.image_stack(vis.split("train")), 8, 0)
    return vis, cl, enc, tok


def test_classifier_init_loss_near_ln_k(tiny_corpora, tiny_enc):
    vis, _, enc, tok = _setup(tiny_corpora, tiny_enc)
    cfg = PredictorConfig(head_mode="classifier", heads=2, layers=1)
    pred = TokenPredictor(cfg, tiny_enc.model_dim, tok.grid_length, tok.codebook.dim, tok.codebook.size)
    feats, _ = embed_eeg(enc, vis.eeg)
    grids = tok.tokenize(vis.image_stack(np.arange(len(vis.eeg))))
    assert token_loss(pred, feats, grids, tok.codebook).item() == pytest.approx(np.log(8), rel=0.05)


def test_train_stage2_improves_and_rejects_clinical(tiny_corpora, tiny_enc):
    vis, cl, enc, tok = _setup(tiny_corpora, tiny_enc)
    cfg = PredictorConfig(steps=60, batch_size=8, heads=2, layers=1, lr=5e-3)
    res = train_stage2(cfg, [vis], enc, tok)
    assert np.mean([r["loss"] for r in res.log[-10:]]) < res.init_loss
    assert res.chance == 1 / 8
    again = train_stage2(cfg, [vis], enc, tok)
    for k, v in res.predictor.state_dict().items():
        np.testing.assert_array_equal(v, again.predictor.state_dict()[k])
    with pytest.raises(ValueError):
        train_stage2(cfg, [cl], enc, tok)


def test_grid_shape_and_argmax(tiny_corpora, tiny_enc):
    vis, _, enc, tok = _setup(tiny_corpora, tiny_enc)
    pred = TokenPredictor(PredictorConfig(heads=2, layers=1), tiny_enc.model_dim, tok.grid_length,
                          tok.codebook.dim, tok.codebook.size)
    grid = predict_token_grid(enc, pred, tok.codebook, vis.eeg[:5])
    assert grid.shape == (5, tok.grid_length)
    feats, _ = embed_eeg(enc, vis.eeg[:5])
    np.testing.assert_array_equal(grid, pred.probs(feats, tok.codebook).argmax(axis=-1))
    assert token_accuracy(grid, grid) == 1.0
    with pytest.raises(ShapeError):
        pred.predict_hidden(np.zeros((1, 4, tiny_enc.model_dim + 1)))


def test_invalid_config():
    with pytest.raises(ValueError):
        PredictorConfig(head_mode="mlp").validate()
    with pytest.raises(ValueError):
        PredictorConfig(temperature=0).validate()
    assert isinstance(Codebook(np.ones((2, 2)), frozen=True).digest(), str)
