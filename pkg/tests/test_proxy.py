import json

import numpy as np
import pytest

from eegground.alignment import AlignmentConfig
from eegground.data import Corpus, DatasetManifest, read_image
from eegground.encoders import Encoders, Vocabulary
from eegground.proxy import (ProxyBank, attach_proxies, build_bank, class_consistency, class_text_accuracy,
                             generate_proxies, retrieve, train_clinical_text_alignment)
from eegground.tokenizer import build_tokenizer


def bank_of(emb, coarse=None):
    n = len(emb)
    return ProxyBank(np.asarray(emb, float), np.zeros((n, 4), dtype=np.int64), [f"v/{i:03d}" for i in range(n)],
                     np.zeros(n, dtype=np.int64) if coarse is None else np.asarray(coarse), "v")


def test_retrieve_is_exact_argmax_cosine(rng):
    emb = rng.normal(size=(40, 6))
    q = rng.normal(size=(15, 6))
    pick, score = retrieve(q, bank_of(emb))
    cos = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ (emb / np.linalg.norm(emb, axis=1, keepdims=True)).T
    np.testing.assert_array_equal(pick, cos.argmax(axis=1))
    np.testing.assert_allclose(score, cos.max(axis=1), atol=1e-12)


def test_retrieve_ties_and_errors():
    emb = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    pick, _ = retrieve(np.array([[3.0, 0.0]]), bank_of(emb))
    assert pick[0] == 0
    with pytest.raises(ValueError):
        retrieve(np.zeros((1, 2)), bank_of(emb))
    with pytest.raises(ValueError):
        retrieve(np.ones((1, 2)), bank_of(np.zeros((0, 2))))


def test_bank_save_load_and_digest(tmp_path, rng):
    b = bank_of(rng.normal(size=(5, 3)), coarse=[0, 1, 0, 1, 1])
    b.save(tmp_path / "bank")
    again = ProxyBank.load(tmp_path / "bank")
    assert again.ids == b.ids and np.array_equal(again.coarse, b.coarse)
    assert again.digest() == ProxyBank.load(tmp_path / "bank").digest()


@pytest.fixture
def parts(tiny_corpora, tiny_enc):
    vis, cl = tiny_corpora
    vocab = Vocabulary.from_texts(vis.prompts + cl.prompts)
    enc = Encoders(tiny_enc, vocab, 0)
    pe = enc.enc_img.patch_embed
    tok = build_tokenizer(tiny_enc, pe.weight.data, pe.bias.data, vis.image_stack(vis.split("train")), 8, 0)
    return vis, cl, vocab, enc, tok


def test_bank_uses_visual_train_split(parts):
    vis, cl, _, enc, tok = parts
    bank = build_bank(vis, enc, tok)
    assert len(bank) == len(vis.split("train")) and bank.ids == sorted(bank.ids)
    with pytest.raises(ValueError):
        build_bank(cl, enc, tok)


def test_text_alignment_lifts_class_text_accuracy(parts, tiny_enc):
    vis, cl, vocab, enc, _ = parts
    before = class_text_accuracy(enc, cl, "train")
    res = train_clinical_text_alignment(AlignmentConfig(steps=60, batch_size=8, lr=5e-3), [cl], tiny_enc, vocab)
    after = class_text_accuracy(res.encoders, cl, "train")
    assert after >= before and after > 0.5
    with pytest.raises(ValueError):
        train_clinical_text_alignment(AlignmentConfig(steps=1), [vis], tiny_enc, vocab)


def test_attach_writes_proxies_and_provenance(parts, tmp_path):
    vis, cl, _, enc, tok = parts
    bank = build_bank(vis, enc, tok)
    recs = generate_proxies(cl, bank, enc)
    hit, chance = class_consistency(recs, cl.manifest, bank)
    assert 0 <= hit <= 1 and 0 < chance < 1
    out = attach_proxies(cl.manifest, recs, tok, tmp_path, bank)
    again = DatasetManifest.load(out.path)
    assert again.provenance["bank_hash"] == bank.digest()
    assert all(s.image_path for s in again.samples)
    c2 = Corpus.load(again)
    np.testing.assert_array_equal(c2.eeg, cl.eeg)
    np.testing.assert_allclose(read_image(again.root / again.samples[0].image_path),
                               tok.detokenize(recs[0].grid[None])[0], atol=1e-6)
    assert json.loads(again.path.read_text())["kind"] == "clinical"
    with pytest.raises(ValueError):
        train_clinical_text_alignment(AlignmentConfig(steps=1), [c2], enc.config, enc.vocab)


def test_attach_requires_every_sample(parts, tmp_path):
    vis, cl, _, enc, tok = parts
    bank = build_bank(vis, enc, tok)
    with pytest.raises(ValueError):
        attach_proxies(cl.manifest, generate_proxies(cl, bank, enc)[:-1], tok, tmp_path, bank)
