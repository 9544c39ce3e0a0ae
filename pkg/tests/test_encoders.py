import numpy as np
import pytest

from eegground import tensor as T
from eegground.alignment import info_nce, pairwise_loss
from eegground.encoders import EncoderConfig, Encoders, Vocabulary, patchify_image, unpatchify_image
from eegground.gradcheck import grad_check
from eegground.tensor import ShapeError, Tensor


@pytest.fixture
def vocab():
    return Vocabulary.from_texts(["eeg of happy", "eeg of sad", "eeg of fear"])


def test_default_shapes(vocab):
    enc = Encoders(EncoderConfig(), vocab, seed=0)
    feats, pooled = enc.encode_eeg(np.zeros((2, 8, 256)))
    assert feats.shape == (2, 64, 64) and pooled.shape == (2, 64)
    assert np.all(np.isfinite(pooled.data))
    img_feats, img_pooled = enc.encode_image(np.full((1, 32, 32, 3), 0.5))
    assert img_feats.shape == (1, 16, 64) and img_pooled.shape == (1, 64)
    assert enc.encode_text(["eeg of happy"]).shape == (1, 64)


def test_eeg_determinism_and_bad_patching(vocab, tiny_enc, rng):
    enc = Encoders(tiny_enc, vocab, seed=1)
    x = rng.normal(size=(1, 2, 32))
    np.testing.assert_array_equal(enc.encode_eeg(x)[1].data, enc.encode_eeg(x)[1].data)
    with pytest.raises(ShapeError):
        Encoders(EncoderConfig(samples=250), vocab, seed=0)
    with pytest.raises(ShapeError):
        enc.encode_eeg(rng.normal(size=(1, 3, 32)))


def test_image_patch_symmetry_and_position(vocab, tiny_enc, rng):
    enc = Encoders(tiny_enc, vocab, seed=2)
    patches = enc.enc_img.embed_patches(np.full((1, 16, 16, 3), 0.3)).data[0]
    np.testing.assert_allclose(patches, np.repeat(patches[:1], len(patches), axis=0))
    img = rng.random((16, 16, 3))
    swapped = img.copy()
    swapped[:8, :8], swapped[:8, 8:] = img[:8, 8:], img[:8, :8]
    assert not np.allclose(enc.encode_image(img[None])[1].data, enc.encode_image(swapped[None])[1].data)
    with pytest.raises(ValueError):
        enc.encode_image(np.full((1, 16, 16, 3), 1.5))


def test_text_pooling_and_unknown_words(vocab, tiny_enc):
    enc = Encoders(tiny_enc, vocab, seed=3)
    np.testing.assert_allclose(enc.encode_text(["happy sad"]).data, enc.encode_text(["sad happy"]).data)
    single = enc.proj_text(T.embedding(enc.enc_text.table, [vocab.encode("fear")[0]])).data
    np.testing.assert_allclose(enc.encode_text(["fear"]).data, single)
    assert vocab.encode("zebra") == [0]
    a, b = enc.encode_text(["eeg of happy", "eeg of sad"]).data
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        vocab.encode("   ")


def test_patchify_roundtrip(rng):
    imgs = rng.random((2, 16, 16, 3))
    np.testing.assert_array_equal(unpatchify_image(patchify_image(imgs, 8), 16, 8), imgs)


def test_encoder_parameter_gradients_under_stage1_loss(vocab, tiny_enc, rng):
    """Every encoder and projector parameter passes a finite-difference check.

    Stop-gradient targets are frozen at their current values for the numeric side,
    which is what the operator means; the real loss must give the same analytic gradient.
    """
    enc = Encoders(tiny_enc, vocab, seed=4)
    eeg = rng.normal(size=(3, 2, 32))
    imgs = rng.random((3, 16, 16, 3))
    prompts = ["eeg of happy", "eeg of sad", "eeg of fear"]
    alpha, tau = 0.5, 0.5

    def embed():
        return enc.encode_eeg(eeg)[1], enc.encode_image(imgs)[1], enc.encode_text(prompts)

    def real_loss():
        he, hi, ht = embed()
        return pairwise_loss(he, hi, alpha, tau) + pairwise_loss(he, ht, alpha, tau) + pairwise_loss(hi, ht, alpha, tau)

    with T.no_grad():
        frozen = [Tensor(h.data) for h in embed()]

    def frozen_loss():
        he, hi, ht = embed()
        total = None
        for a, b, b0 in ((he, hi, frozen[1]), (he, ht, frozen[2]), (hi, ht, frozen[2])):
            d = a - b0
            term = T.scale(info_nce(a, b, tau), alpha) + T.scale(T.mean(T.sum_(d * d, axis=1)), 1 - alpha)
            total = term if total is None else total + term
        return total

    params = enc.parameters()
    np.testing.assert_allclose(np.concatenate([g.ravel() for g in T.gradients(real_loss(), params)]),
                               np.concatenate([g.ravel() for g in T.gradients(frozen_loss(), params)]),
                               rtol=1e-12, atol=1e-14)
    for name, p in enc.named_parameters():
        def loss_at(x, name=name, p=p):
            swap_in(enc, name, x)
            try:
                return frozen_loss()
            finally:
                swap_in(enc, name, p)

        assert grad_check(loss_at, p.data, eps=1e-6) < 1e-4, name


def swap_in(module, dotted, tensor):
    parts = dotted.split("/")
    obj = module
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    setattr(obj, parts[-1], tensor)
