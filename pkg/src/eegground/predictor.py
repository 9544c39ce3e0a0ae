"""Stage 2: parallel prediction of image token grids from aligned EEG features."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .alignment import TrainingDiverged, embed_eeg
from .data import Corpus
from .encoders import Encoders
from .optim import Adam
from .tensor import ShapeError, Tensor
from .tokenizer import Codebook, Tokenizer

log = logging.getLogger(__name__)

HEAD_MODES = ("similarity", "classifier")


@dataclass
class PredictorConfig:
    head_mode: str = "similarity"
    temperature: float = 0.07
    layers: int = 2
    heads: int = 4
    steps: int = 400
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    tune_encoder: bool = False

    def validate(self) -> None:
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


def token_probs_similarity(h: Tensor, entries: np.ndarray, temperature: float) -> Tensor:
    """Row softmax of cos(h_m, v_k) / temperature; the codebook never receives gradient."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return T.softmax(_similarity_logits(h, entries, temperature), axis=-1)


def _similarity_logits(h: Tensor, entries: np.ndarray, temperature: float) -> Tensor:
    entries = np.asarray(entries, dtype=np.float64)
    if h.shape[-1] != entries.shape[1]:
        raise ShapeError(f"hidden dim {h.shape[-1]} vs codebook dim {entries.shape[1]}")
    norms = np.linalg.norm(entries, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("codebook has a zero-norm entry")
    unit = Tensor(np.ascontiguousarray((entries / norms).T))
    return T.scale(T.matmul(T.l2_normalize(h), unit), 1.0 / temperature)


def token_logits_classifier(h: Tensor, weight: Tensor) -> Tensor:
    """logits = H W^T for a K x D weight."""
    if weight.ndim != 2 or h.shape[-1] != weight.shape[1]:
        raise ShapeError(f"classifier weight {weight.shape} vs hidden {h.shape}")
    return T.matmul(h, T.transpose(weight))


class TokenPredictor(nn.Module):
    """M learnable queries cross-attending into the EEG feature sequence."""

    def __init__(self, cfg: PredictorConfig, feature_dim: int, grid_length: int, code_dim: int,
                 codebook_size: int, seed: int | None = None):
        cfg.validate()
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 2])
        self._cfg = cfg
        self._grid_length = grid_length
        self.queries = nn.param(rng, (grid_length, feature_dim), 0.5)
        self.blocks = [nn.CrossBlock(rng, feature_dim, cfg.heads) for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(feature_dim)
        self.out = nn.Linear(rng, feature_dim, code_dim)
        self.head = nn.param(rng, (codebook_size, code_dim), 0.02) if cfg.head_mode == "classifier" else None

    @property
    def config(self) -> PredictorConfig:
        return self._cfg

    def predict_hidden(self, features) -> Tensor:
        """(B, P, d) EEG features -> (B, M, D_code), all positions in one pass."""
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=np.float64))
        if features.ndim == 2:
            features = T.reshape(features, (1, *features.shape))
        if features.ndim != 3 or features.shape[2] != self.queries.shape[1]:
            raise ShapeError(f"EEG features {features.shape} vs predictor dim {self.queries.shape[1]}")
        b = features.shape[0]
        x = T.embedding(self.queries, np.tile(np.arange(self._grid_length), (b, 1)))
        for blk in self.blocks:
            x = blk(x, features)
        return self.out(self.norm(x))

    def logits(self, hidden: Tensor, codebook: Codebook) -> Tensor:
        if self._cfg.head_mode == "similarity":
            return _similarity_logits(hidden, codebook.entries, self._cfg.temperature)
        return token_logits_classifier(hidden, self.head)

    def probs(self, features, codebook: Codebook) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(self.predict_hidden(features), codebook), axis=-1).data

    def grid(self, features, codebook: Codebook) -> np.ndarray:
        """Argmax per position; np.argmax keeps the lowest index on ties."""
        with T.no_grad():
            return np.argmax(self.logits(self.predict_hidden(features), codebook).data, axis=-1)


def predict_token_grid(encoders: Encoders, predictor: TokenPredictor, codebook: Codebook,
                       eeg: np.ndarray, batch: int = 64) -> np.ndarray:
    feats, _ = embed_eeg(encoders, np.asarray(eeg))
    return np.concatenate([predictor.grid(feats[i:i + batch], codebook) for i in range(0, len(feats), batch)])


def token_loss(predictor: TokenPredictor, features, targets: np.ndarray, codebook: Codebook) -> Tensor:
    logits = predictor.logits(predictor.predict_hidden(features), codebook)
    b, m, k = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * m, k)), np.asarray(targets).reshape(-1))


def token_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(target)))


@dataclass
class Stage2Result:
    predictor: TokenPredictor
    log: list[dict]
    val_accuracy: float
    chance: float
    init_loss: float


def _check_visual(corpora: Sequence[Corpus]) -> None:
    if not corpora:
        raise ValueError("stage 2 needs at least one visual dataset")
    bad = [c.name for c in corpora if c.manifest.kind != "visual"]
    if bad:
        raise ValueError(f"stage 2 trains on visually-evoked datasets only; clinical manifests given: {bad}")


def train_stage2(cfg: PredictorConfig, corpora: Sequence[Corpus], encoders: Encoders,
                 tokenizer: Tokenizer) -> Stage2Result:
    """Fit the predictor to ground-truth token grids of the visual train split."""
    cfg.validate()
    _check_visual(corpora)
    rng = np.random.default_rng([cfg.seed, 3])
    codebook = tokenizer.codebook
    eeg, grids, val_eeg, val_grids = [], [], [], []
    for c in corpora:
        tr, va = c.split("train"), c.split("val")
        eeg.append(c.eeg[tr])
        grids.append(tokenizer.tokenize(c.image_stack(tr)))
        if len(va):
            val_eeg.append(c.eeg[va])
            val_grids.append(tokenizer.tokenize(c.image_stack(va)))
    eeg, grids = np.concatenate(eeg), np.concatenate(grids)
    feats = None if cfg.tune_encoder else embed_eeg(encoders, eeg)[0]
    d = encoders.config.model_dim
    predictor = TokenPredictor(cfg, d, tokenizer.grid_length, codebook.dim, codebook.size)
    params = predictor.parameters() + (encoders.enc_eeg.parameters() if cfg.tune_encoder else [])
    opt = Adam(params, lr=cfg.lr)
    rows: list[dict] = []
    last_good = predictor.state_dict()
    init_loss = float("nan")
    n = len(grids)
    for step in range(cfg.steps):
        pick = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        x = encoders.enc_eeg(eeg[pick]) if cfg.tune_encoder else Tensor(feats[pick])
        loss = token_loss(predictor, x, grids[pick], codebook)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"stage 2 loss became {value} at step {step}", last_good)
        if step == 0:
            init_loss = value
        if step % 25 == 0:
            last_good = predictor.state_dict()
        opt.step(T.gradients(loss, params))
        rows.append({"step": step, "loss": value})
        if step % 100 == 0:
            log.info("stage2 step %d loss %.4f", step, value)
    acc = float("nan")
    if val_eeg:
        pred = predict_token_grid(encoders, predictor, codebook, np.concatenate(val_eeg))
        acc = token_accuracy(pred, np.concatenate(val_grids))
    log.info("stage2 val token accuracy %.3f (chance %.4f)", acc, 1.0 / codebook.size)
    return Stage2Result(predictor, rows, acc, 1.0 / codebook.size, init_loss)


def config_dict(cfg: PredictorConfig) -> dict:
    return asdict(cfg)
