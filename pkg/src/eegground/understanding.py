"""Stage 3: constrained multiple-choice classification over a mixed text/EEG/token prompt."""

from __future__ import annotations

import csv
import logging
import string
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .alignment import TrainingDiverged, embed_eeg
from .checkpoint import load_json, save_json
from .data import Corpus, DatasetManifest, balanced_sampler
from .encoders import Encoders
from .metrics import balanced_accuracy
from .optim import Adam
from .predictor import TokenPredictor
from .tensor import ShapeError, Tensor
from .tokenizer import Codebook

log = logging.getLogger(__name__)

LETTERS = string.ascii_uppercase
SEGMENTS = ("instruction", "eeg", "image_tokens")
TUNE_SCOPES = ("head_only", "head+predictor", "all")
TOKEN_SOURCES = ("predicted", "random", "zero")


# -- task prompts -----------------------------------------------------------------
@dataclass
class TaskPrompt:
    task_id: str
    instruction: str
    options: list[tuple[str, str, int]]

    def __post_init__(self):
        self.options = [tuple(o) for o in self.options]
        if len(self.options) < 2:
            raise ValueError(f"task {self.task_id}: need at least 2 options")
        if len(self.options) > len(LETTERS):
            raise ValueError(f"task {self.task_id}: at most {len(LETTERS)} options")
        letters = [o[0] for o in self.options]
        if letters != list(LETTERS[:len(letters)]):
            raise ValueError(f"task {self.task_id}: option letters must run A, B, C, ... got {letters}")

    @property
    def num_options(self) -> int:
        return len(self.options)

    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(len(LETTERS), dtype=bool)
        mask[:self.num_options] = True
        return mask

    def letter_for(self, class_id: int) -> str:
        for letter, _, cid in self.options:
            if cid == class_id:
                return letter
        raise KeyError(f"class {class_id} not among task {self.task_id} options")

    def option_index(self, class_ids) -> np.ndarray:
        lookup = {cid: i for i, (_, _, cid) in enumerate(self.options)}
        return np.array([lookup[int(c)] for c in np.atleast_1d(class_ids)], dtype=np.int64)

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "instruction": self.instruction,
                "options": [{"letter": l, "class_name": n, "class_id": c} for l, n, c in self.options]}

    @classmethod
    def from_json(cls, obj: dict) -> TaskPrompt:
        return cls(obj["task_id"], obj["instruction"],
                   [(o["letter"], o["class_name"], int(o["class_id"])) for o in obj["options"]])

    def save(self, path) -> None:
        save_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> TaskPrompt:
        return cls.from_json(load_json(path))


def task_for(manifest: DatasetManifest) -> TaskPrompt:
    opts = [(LETTERS[i], name, i) for i, name in enumerate(manifest.classes)]
    listing = " ".join(f"{l} {n}" for l, n, _ in opts)
    return TaskPrompt(manifest.name, f"which option describes this eeg {listing}", opts)


# -- head -------------------------------------------------------------------------
@dataclass
class UnderstandingConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2
    max_length: int = 128
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    tune_scope: str = "head_only"
    token_source: str = "predicted"
    shuffle_labels: bool = False

    def validate(self) -> None:
        if self.tune_scope not in TUNE_SCOPES:
            raise ValueError(f"tune_scope must be one of {TUNE_SCOPES}, got {self.tune_scope!r}")
        if self.token_source not in TOKEN_SOURCES:
            raise ValueError(f"token_source must be one of {TOKEN_SOURCES}, got {self.token_source!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class PromptSequence:
    embedded: Tensor
    segments: np.ndarray

    @property
    def length(self) -> int:
        return self.embedded.shape[-2]


class McqHead(nn.Module):
    """Small transformer over the assembled prompt, reading out one of 26 letters."""

    def __init__(self, cfg: UnderstandingConfig, text_dim: int, eeg_dim: int, codebook_size: int,
                 seed: int | None = None):
        cfg.validate()
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 4])
        self._cfg = cfg
        self.instr_proj = nn.Linear(rng, text_dim, cfg.dim)
        self.eeg_proj = nn.Linear(rng, eeg_dim, cfg.dim)
        self.token_embed = nn.param(rng, (codebook_size, cfg.dim), 0.5)
        self.segment_embed = nn.param(rng, (len(SEGMENTS), cfg.dim), 0.1)
        self.pos_embed = nn.param(rng, (cfg.max_length, cfg.dim), 0.1)
        self.blocks = [nn.EncoderBlock(rng, cfg.dim, cfg.heads) for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(cfg.dim)
        self.out = nn.Linear(rng, cfg.dim, len(LETTERS), std=0.01)

    @property
    def config(self) -> UnderstandingConfig:
        return self._cfg

    def assemble(self, instruction: Tensor, eeg_feats: Tensor, token_part: Tensor) -> PromptSequence:
        """Concatenate [instruction ++ EEG ++ image tokens] along the sequence axis.

        ``instruction`` is (L_i, d_text) and is shared by the batch; ``eeg_feats`` is
        (B, P, d_eeg); ``token_part`` is already embedded, (B, M, dim).
        """
        b = eeg_feats.shape[0]
        n_i, p, m = instruction.shape[0], eeg_feats.shape[1], token_part.shape[1]
        length = n_i + p + m
        if length > self._cfg.max_length:
            raise ShapeError(f"prompt length {length} exceeds max_length {self._cfg.max_length}")
        instr = self.instr_proj(instruction)
        instr = T.embedding(instr, np.tile(np.arange(n_i), (b, 1)))
        seq = T.concat([instr, self.eeg_proj(eeg_feats), token_part], axis=1)
        segments = np.repeat(np.arange(3), [n_i, p, m])
        seq = seq + T.embedding(self.segment_embed, segments) + T.slice_(self.pos_embed, slice(0, length))
        return PromptSequence(seq, segments)

    def embed_tokens(self, grids: np.ndarray | None, soft: Tensor | None = None, zero: bool = False,
                     shape: tuple[int, int] | None = None) -> Tensor:
        if zero:
            return Tensor(np.zeros((*shape, self._cfg.dim)))
        hard = T.embedding(self.token_embed, grids)
        if soft is None:
            return hard
        # straight-through: forward uses the hard token, gradient flows through the soft mixture
        mixed = T.matmul(soft, self.token_embed)
        return mixed + T.stop_gradient(hard - mixed)

    def logits(self, seq: PromptSequence) -> Tensor:
        x = seq.embedded
        for blk in self.blocks:
            x = blk(x)
        return self.out(T.mean(self.norm(x), axis=1))


def mask_logits(logits: Tensor, task: TaskPrompt) -> Tensor:
    """Invalid letters get -inf; applying twice is the same as once."""
    mask = np.where(task.valid_mask(), 0.0, -np.inf)
    return logits + Tensor(mask)


def mcq_forward(head: McqHead, seq: PromptSequence, task: TaskPrompt) -> np.ndarray:
    """Distribution over the 26 letters with exact zeros outside the task's options."""
    if not task.valid_mask().any():
        raise ValueError("task has no valid options")
    with T.no_grad():
        return T.softmax(mask_logits(head.logits(seq), task), axis=-1).data


def choose(probs: np.ndarray, task: TaskPrompt) -> tuple[list[str], list[str]]:
    """Argmax over valid letters, first letter on ties."""
    probs = np.where(task.valid_mask(), np.atleast_2d(probs), -1.0)
    pick = np.argmax(probs, axis=-1)
    return [LETTERS[i] for i in pick], [task.options[i][1] for i in pick]


# -- upstream inputs ------------------------------------------------------------------
@dataclass
class Upstream:
    encoders: Encoders
    predictor: TokenPredictor
    codebook: Codebook


@dataclass
class TaskData:
    """Frozen per-corpus inputs: EEG features, predicted and random grids, instruction ids."""

    corpus: Corpus
    task: TaskPrompt
    instruction_ids: list[int]
    features: np.ndarray
    grids: np.ndarray
    labels: np.ndarray
    random: np.ndarray


def random_grids(n: int, m: int, k: int, seed: int, name: str) -> np.ndarray:
    rng = np.random.default_rng([seed, 5, *name.encode()])
    return rng.integers(0, k, size=(n, m))


def prepare_task_data(corpus: Corpus, task: TaskPrompt, up: Upstream, cfg: UnderstandingConfig) -> TaskData:
    feats, _ = embed_eeg(up.encoders, corpus.eeg)
    m = up.predictor.queries.shape[0]
    grids = np.concatenate([up.predictor.grid(feats[i:i + 64], up.codebook) for i in range(0, len(feats), 64)])
    rand = random_grids(len(feats), m, up.codebook.size, cfg.seed, corpus.name)
    labels = corpus.labels.copy()
    if cfg.shuffle_labels:
        rng = np.random.default_rng([cfg.seed, 6, *corpus.name.encode()])
        tr = corpus.split("train")
        labels[tr] = labels[rng.permutation(tr)]
    ids = up.encoders.vocab.encode(task.instruction)
    return TaskData(corpus, task, ids, feats, grids, labels, rand)


class Stage3Model:
    """Head plus frozen (or tuned, per scope) upstream modules."""

    def __init__(self, cfg: UnderstandingConfig, up: Upstream, head: McqHead | None = None):
        self.cfg = cfg
        self.up = up
        enc_cfg = up.encoders.config
        self.head = head or McqHead(cfg, enc_cfg.model_dim, enc_cfg.model_dim, up.codebook.size)

    def trainable(self) -> list[Tensor]:
        params = self.head.parameters()
        if self.cfg.tune_scope in ("head+predictor", "all"):
            params += self.up.predictor.parameters()
        if self.cfg.tune_scope == "all":
            params += self.up.encoders.enc_eeg.parameters() + self.up.encoders.enc_text.parameters()
        return params

    def sequence(self, data: TaskData, rows: np.ndarray, token_source: str | None = None) -> PromptSequence:
        source = token_source or self.cfg.token_source
        table = self.up.encoders.enc_text.table
        instruction = T.embedding(table, data.instruction_ids)
        if self.cfg.tune_scope == "all":
            feats = self.up.encoders.enc_eeg(data.corpus.eeg[rows])
        else:
            feats = Tensor(data.features[rows])
        m = data.grids.shape[1]
        if source == "zero":
            tokens = self.head.embed_tokens(None, zero=True, shape=(len(rows), m))
        elif source == "random":
            tokens = self.head.embed_tokens(data.random[rows])
        elif source == "predicted" and self.cfg.tune_scope != "head_only":
            logits = self.up.predictor.logits(self.up.predictor.predict_hidden(feats), self.up.codebook)
            soft = T.softmax(logits, axis=-1)
            tokens = self.head.embed_tokens(np.argmax(logits.data, axis=-1), soft=soft)
        else:
            tokens = self.head.embed_tokens(data.grids[rows])
        return self.head.assemble(instruction, feats, tokens)

    def probs(self, data: TaskData, rows: np.ndarray, token_source: str | None = None,
              batch: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(rows), batch):
            with T.no_grad():
                seq = self.sequence(data, rows[i:i + batch], token_source)
            out.append(mcq_forward(self.head, seq, data.task))
        return np.concatenate(out) if out else np.zeros((0, len(LETTERS)))

    def predict(self, data: TaskData, rows: np.ndarray, token_source: str | None = None) -> np.ndarray:
        """Predicted option indices for ``rows``."""
        probs = self.probs(data, rows, token_source)
        return np.argmax(np.where(data.task.valid_mask(), probs, -1.0), axis=-1)


@dataclass
class Stage3Result:
    model: Stage3Model
    log: list[dict]
    val_bacc: dict[str, float] = field(default_factory=dict)
    init_loss: float = float("nan")


def evaluate(model: Stage3Model, datas: Sequence[TaskData], split: str,
             token_source: str | None = None) -> dict[str, float]:
    out = {}
    for d in datas:
        rows = d.corpus.split(split)
        if len(rows) == 0:
            continue
        pred = model.predict(d, rows, token_source)
        out[d.corpus.name] = balanced_accuracy(d.task.option_index(d.corpus.labels[rows]), pred)
    return out


def train_stage3(cfg: UnderstandingConfig, corpora: Sequence[Corpus], tasks: Sequence[TaskPrompt],
                 up: Upstream, datas: Sequence[TaskData] | None = None) -> Stage3Result:
    """Teacher-forced cross-entropy on the correct letter, batches drawn by the balanced sampler."""
    cfg.validate()
    if len(corpora) != len(tasks):
        raise ValueError("one task prompt per dataset required")
    datas = list(datas) if datas is not None else [prepare_task_data(c, t, up, cfg) for c, t in zip(corpora, tasks)]
    model = Stage3Model(cfg, up)
    params = model.trainable()
    opt = Adam(params, lr=cfg.lr)
    sampler = balanced_sampler([c.manifest for c in corpora], cfg.seed)
    rows_log: list[dict] = []
    last_good = model.head.state_dict()
    init_loss = float("nan")
    for step in range(cfg.steps):
        draws = sampler.take(cfg.batch_size)
        loss = None
        for d, data in enumerate(datas):
            rows = np.array([i for dd, i in draws if dd == d], dtype=np.int64)
            if len(rows) == 0:
                continue
            logits = mask_logits(model.head.logits(model.sequence(data, rows)), data.task)
            target = data.task.option_index(data.labels[rows])
            part = T.scale(T.cross_entropy(logits, target), len(rows) / len(draws))
            loss = part if loss is None else loss + part
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"stage 3 loss became {value} at step {step}", last_good)
        if step == 0:
            init_loss = value
        if step % 25 == 0:
            last_good = model.head.state_dict()
        opt.step(T.gradients(loss, params))
        rows_log.append({"step": step, "loss": value})
        if step % 100 == 0:
            log.info("stage3 step %d loss %.4f", step, value)
    val = evaluate(model, datas, "val")
    log.info("stage3 val balanced accuracy %s", {k: round(v, 3) for k, v in val.items()})
    return Stage3Result(model, rows_log, val, init_loss)


def write_predictions(path, model: Stage3Model, data: TaskData, rows: np.ndarray) -> None:
    probs = model.probs(data, rows)
    letters, names = choose(probs, data.task)
    opts = data.task.options
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true_class", "predicted_letter", "predicted_class", *[f"p_{l}" for l, _, _ in opts]])
        for r, p, letter, name in zip(rows, probs, letters, names):
            s = data.corpus.manifest.samples[r]
            w.writerow([s.id, data.corpus.manifest.classes[s.class_id], letter, name,
                        *[f"{p[i]:.6f}" for i in range(len(opts))]])


def config_dict(cfg: UnderstandingConfig) -> dict:
    return asdict(cfg)
