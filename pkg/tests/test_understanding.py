import numpy as np
import pytest

from eegground import tensor as T
from eegground.encoders import Encoders, Vocabulary
from eegground.predictor import PredictorConfig, TokenPredictor
from eegground.tensor import ShapeError, Tensor
from eegground.tokenizer import build_tokenizer
from eegground.understanding import (LETTERS, McqHead, Stage3Model, TaskPrompt, UnderstandingConfig, Upstream,
                                     choose, evaluate, mask_logits, mcq_forward, prepare_task_data, task_for,
                                     train_stage3, write_predictions)

CFG = UnderstandingConfig(dim=8, heads=2, layers=1, steps=0)


def two_way():
    return TaskPrompt("t", "pick one", [("A", "x", 0), ("B", "y", 1)])


@pytest.mark.parametrize("opts", [[("A", "x", 0)], [("A", "x", 0), ("C", "y", 1)], [("B", "x", 0), ("C", "y", 1)]])
def test_task_prompt_validation(opts):
    with pytest.raises(ValueError):
        TaskPrompt("t", "pick", opts)


def test_task_json_roundtrip(tmp_path):
    t = two_way()
    t.save(tmp_path / "t.json")
    assert TaskPrompt.load(tmp_path / "t.json") == t
    assert t.letter_for(1) == "B"
    np.testing.assert_array_equal(t.option_index([1, 0, 1]), [1, 0, 1])


def _head(seed=0, dim_in=8, k=8):
    return McqHead(CFG, dim_in, dim_in, k, seed=seed)


def _seq(head, rng, b=4, n_i=3, p=6, m=4):
    return head.assemble(Tensor(rng.normal(size=(n_i, 8))), Tensor(rng.normal(size=(b, p, 8))),
                         head.embed_tokens(rng.integers(0, 8, size=(b, m))))


def test_assembled_length_and_segments(rng):
    head = _head()
    seq = _seq(head, rng)
    assert seq.length == 3 + 6 + 4
    np.testing.assert_array_equal(seq.segments, [0] * 3 + [1] * 6 + [2] * 4)
    with pytest.raises(ShapeError):
        head.assemble(Tensor(np.zeros((100, 8))), Tensor(np.zeros((1, 20, 8))), Tensor(np.zeros((1, 16, 8))))


def test_default_prompt_length_arithmetic():
    head = McqHead(UnderstandingConfig(), 64, 64, 256)
    instr = Tensor(np.zeros((7, 64)))
    seq = head.assemble(instr, Tensor(np.zeros((1, 64, 64))), head.embed_tokens(np.zeros((1, 16), int)))
    assert seq.length == 7 + 64 + 16


def test_same_inputs_same_sequence(rng):
    head = _head()
    args = (Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(2, 5, 8))),
            head.embed_tokens(rng.integers(0, 8, size=(2, 4))))
    np.testing.assert_array_equal(head.assemble(*args).embedded.data, head.assemble(*args).embedded.data)


def test_mask_is_exact_and_idempotent(rng):
    head = _head()
    task = two_way()
    seq = _seq(head, rng)
    p = mcq_forward(head, seq, task)
    assert np.all(p[:, 2:] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    logits = head.logits(seq)
    once = mask_logits(logits, task).data
    np.testing.assert_array_equal(mask_logits(mask_logits(logits, task), task).data, once)


def test_untrained_head_near_uniform():
    rng = np.random.default_rng(0)
    task = TaskPrompt("t", "pick", [(LETTERS[i], str(i), i) for i in range(4)])
    for seed in range(100):
        head = _head(seed)
        p = mcq_forward(head, _seq(head, rng, b=1), task)[0, :4]
        assert np.all(p < 3 / 4) and np.all(p > 1 / (3 * 4))


def test_choose_tie_and_validity(rng):
    task = two_way()
    letters, names = choose(np.full(26, 1 / 26), task)
    assert letters == ["A"] and names == ["x"]
    probs = rng.random((1000, 26))
    letters, _ = choose(probs, task)
    assert set(letters) <= {"A", "B"}
    np.testing.assert_array_equal([LETTERS.index(l) for l in letters], np.argmax(probs[:, :2], axis=1))


def test_init_loss_near_ln_options(rng):
    head = _head(3)
    task = TaskPrompt("t", "pick", [(LETTERS[i], str(i), i) for i in range(4)])
    logits = mask_logits(head.logits(_seq(head, rng, b=32)), task)
    loss = T.cross_entropy(logits, rng.integers(0, 4, size=32)).item()
    assert loss == pytest.approx(np.log(4), rel=0.05)


@pytest.fixture
def upstream(tiny_corpora, tiny_enc):
    vis, cl = tiny_corpora
    tasks = [task_for(vis.manifest), task_for(cl.manifest)]
    vocab = Vocabulary.from_texts(vis.prompts + cl.prompts + [t.instruction for t in tasks])
    enc = Encoders(tiny_enc, vocab, 0)
    pe = enc.enc_img.patch_embed
    tok = build_tokenizer(tiny_enc, pe.weight.data, pe.bias.data, vis.image_stack(vis.split("train")), 8, 0)
    pred = TokenPredictor(PredictorConfig(heads=2, layers=1), tiny_enc.model_dim, tok.grid_length,
                          tok.codebook.dim, tok.codebook.size)
    return Upstream(enc, pred, tok.codebook), tasks


def test_training_runs_and_writes_predictions(tiny_corpora, upstream, tmp_path):
    up, tasks = upstream
    cfg = UnderstandingConfig(dim=8, heads=2, layers=1, steps=40, batch_size=8, lr=3e-3)
    res = train_stage3(cfg, list(tiny_corpora), tasks, up)
    assert np.mean([r["loss"] for r in res.log[-5:]]) < res.init_loss
    assert set(res.val_bacc) == {"visual", "clinical_a"}
    data = prepare_task_data(tiny_corpora[0], tasks[0], up, cfg)
    rows = tiny_corpora[0].split("val")
    write_predictions(tmp_path / "p.csv", res.model, data, rows)
    lines = (tmp_path / "p.csv").read_text().strip().splitlines()
    assert lines[0].startswith("sample_id,true_class,predicted_letter,predicted_class,p_A")
    assert len(lines) == len(rows) + 1


@pytest.mark.parametrize("source", ["random", "zero"])
def test_token_sources_change_only_token_segment(tiny_corpora, upstream, source):
    up, tasks = upstream
    model = Stage3Model(CFG, up)
    data = prepare_task_data(tiny_corpora[0], tasks[0], up, CFG)
    rows = np.arange(4)
    a = model.sequence(data, rows).embedded.data
    b = model.sequence(data, rows, token_source=source).embedded.data
    n_tok = data.grids.shape[1]
    np.testing.assert_array_equal(a[:, :-n_tok], b[:, :-n_tok])
    assert not np.array_equal(a[:, -n_tok:], b[:, -n_tok:])


def test_shuffled_labels_only_touch_train(tiny_corpora, upstream):
    up, tasks = upstream
    vis = tiny_corpora[0]
    data = prepare_task_data(vis, tasks[0], up, UnderstandingConfig(shuffle_labels=True, seed=1))
    held = np.concatenate([vis.split("val"), vis.split("test")])
    np.testing.assert_array_equal(data.labels[held], vis.labels[held])
    tr = vis.split("train")
    assert sorted(data.labels[tr]) == sorted(vis.labels[tr])


def test_config_validation():
    with pytest.raises(ValueError):
        UnderstandingConfig(tune_scope="lora").validate()
    with pytest.raises(ValueError):
        UnderstandingConfig(token_source="oracle").validate()


def test_evaluate_returns_balanced_accuracy(tiny_corpora, upstream):
    up, tasks = upstream
    model = Stage3Model(CFG, up)
    datas = [prepare_task_data(c, t, up, CFG) for c, t in zip(tiny_corpora, tasks)]
    out = evaluate(model, datas, "val")
    assert all(0.0 <= v <= 1.0 for v in out.values())
