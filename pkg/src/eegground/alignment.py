"""Stage 1: trimodal contrastive alignment of EEG, image and text embeddings."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Corpus, weighted_sampler
from .encoders import EncoderConfig, Encoders, Vocabulary
from .optim import Adam
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

MODES = ("image_only", "text_only", "trimodal")
TERMS = ("ei", "et", "it")


@dataclass
class AlignmentConfig:
    lambda_ei: float = 1.0
    lambda_et: float = 1.0
    lambda_it: float = 1.0
    alpha: float = 0.5
    temperature: float = 0.07
    batch_size: int = 32
    steps: int = 300
    lr: float = 1e-3
    warmup_frac: float = 0.05
    seed: int = 0
    alignment_mode: str = "trimodal"

    def validate(self) -> None:
        if self.alignment_mode not in MODES:
            raise ValueError(f"alignment_mode must be one of {MODES}, got {self.alignment_mode!r}")
        if min(self.lambda_ei, self.lambda_et, self.lambda_it) < 0:
            raise ValueError("lambda weights must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 2 or self.steps < 0:
            raise ValueError("batch_size must be >= 2 and steps >= 0")

    def weights(self) -> dict[str, float]:
        """Effective per-term weights for the configured mode."""
        if self.alignment_mode == "image_only":
            return {"ei": 1.0, "et": 0.0, "it": 0.0}
        if self.alignment_mode == "text_only":
            return {"ei": 0.0, "et": 1.0, "it": 0.0}
        return {"ei": self.lambda_ei, "et": self.lambda_et, "it": self.lambda_it}


# -- losses -----------------------------------------------------------------------
def info_nce(ha: Tensor, hb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE with matched rows as positives; rows normalized internally."""
    if ha.shape != hb.shape or ha.ndim != 2:
        raise ShapeError(f"info_nce: need equal N x D inputs, got {ha.shape} and {hb.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    n = ha.shape[0]
    logits = T.scale(T.matmul(T.l2_normalize(ha), T.transpose(T.l2_normalize(hb))), 1.0 / temperature)
    diag = np.arange(n)
    return T.scale(T.cross_entropy(logits, diag) + T.cross_entropy(T.transpose(logits), diag), 0.5)


def pairwise_loss(ha: Tensor, hb: Tensor, alpha: float, temperature: float) -> Tensor:
    """alpha * InfoNCE(ha, hb) + (1 - alpha) * mean_i ||ha_i - sg(hb_i)||^2."""
    diff = ha - T.stop_gradient(hb)
    mse = T.mean(T.sum_(diff * diff, axis=1))
    return T.scale(info_nce(ha, hb, temperature), alpha) + T.scale(mse, 1.0 - alpha)


@dataclass
class BatchEmbeddings:
    """Embeddings for N samples; ``image`` holds only rows where ``image_present``."""

    eeg: Tensor
    text: Tensor | None
    image: Tensor | None
    image_present: np.ndarray


@dataclass
class LossBreakdown:
    total: Tensor | None
    terms: dict[str, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)


def trimodal_loss(batch: BatchEmbeddings, cfg: AlignmentConfig) -> LossBreakdown:
    """Weighted sum of the pairwise terms active in ``cfg.alignment_mode``.

    Rows without images are dropped from the image terms; a term with too few
    rows is listed in ``absent`` instead of contributing zero.
    """
    weights = cfg.weights()
    mask = np.asarray(batch.image_present, dtype=bool)
    out = LossBreakdown(None)
    img_rows = np.flatnonzero(mask)
    enough_images = batch.image is not None and len(img_rows) >= 2
    pieces = []
    for name in TERMS:
        w = weights[name]
        if w == 0:
            continue
        if name == "ei":
            pair = (T.slice_(batch.eeg, img_rows), batch.image) if enough_images else None
        elif name == "et":
            pair = (batch.eeg, batch.text) if batch.text is not None else None
        else:
            ok = enough_images and batch.text is not None
            pair = (batch.image, T.slice_(batch.text, img_rows)) if ok else None
        if pair is None:
            out.absent.append(name)
            continue
        value = pairwise_loss(pair[0], pair[1], cfg.alpha, cfg.temperature)
        out.terms[name] = value.item()
        out.weighted[name] = w * value.item()
        pieces.append(T.scale(value, w))
    if pieces:
        total = pieces[0]
        for p in pieces[1:]:
            total = total + p
        out.total = total
    return out


# -- training -----------------------------------------------------------------------
class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.last_good = last_good


def needs_images(cfg: AlignmentConfig) -> bool:
    w = cfg.weights()
    return w["ei"] > 0 or w["it"] > 0


def needs_text(cfg: AlignmentConfig) -> bool:
    w = cfg.weights()
    return w["et"] > 0 or w["it"] > 0


def embed_batch(encoders: Encoders, corpora: Sequence[Corpus], draws, cfg: AlignmentConfig) -> BatchEmbeddings:
    eeg = np.stack([corpora[d].eeg[i] for d, i in draws])
    present = np.array([corpora[d].images[i] is not None for d, i in draws])
    _, h_eeg = encoders.encode_eeg(eeg)
    h_img = None
    if needs_images(cfg) and present.any():
        imgs = np.stack([corpora[d].images[i] for (d, i), p in zip(draws, present) if p])
        _, h_img = encoders.encode_image(imgs)
    h_text = encoders.encode_text([corpora[d].prompts[i] for d, i in draws]) if needs_text(cfg) else None
    return BatchEmbeddings(h_eeg, h_text, h_img, present)


def lr_at(step: int, cfg: AlignmentConfig) -> float:
    warm = max(1, int(math.ceil(cfg.warmup_frac * cfg.steps)))
    return cfg.lr * min(1.0, (step + 1) / warm)


@dataclass
class Stage1Result:
    encoders: Encoders
    log: list[dict]
    val_retrieval: float
    chance: float
    skipped_steps: int = 0


def train_stage1(cfg: AlignmentConfig, corpora: Sequence[Corpus], enc_cfg: EncoderConfig,
                 vocab: Vocabulary, encoders: Encoders | None = None) -> Stage1Result:
    cfg.validate()
    if not corpora:
        raise ValueError("train_stage1 needs at least one dataset")
    encoders = encoders if encoders is not None else Encoders(enc_cfg, vocab, cfg.seed)
    params = encoders.parameters()
    opt = Adam(params, lr=cfg.lr)
    sampler = weighted_sampler([c.manifest for c in corpora], cfg.seed)
    rows, skipped = [], 0
    last_good = encoders.state_dict()
    for step in range(cfg.steps):
        draws = sampler.take(cfg.batch_size)
        br = trimodal_loss(embed_batch(encoders, corpora, draws, cfg), cfg)
        lr = lr_at(step, cfg)
        if br.total is None:
            skipped += 1
            continue
        value = br.total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"stage 1 loss became {value} at step {step}", last_good)
        if step % 25 == 0:
            last_good = encoders.state_dict()
        opt.step(T.gradients(br.total, params), lr)
        rows.append({"step": step, "total": value, **{k: br.weighted.get(k, float("nan")) for k in TERMS}, "lr": lr})
        if step % 50 == 0:
            log.info("stage1 step %d loss %.4f %s", step, value, br.absent or "")
    visual = [c for c in corpora if c.manifest.kind == "visual"]
    acc, chance = retrieval_accuracy(encoders, visual, "val") if visual else (float("nan"), float("nan"))
    log.info("stage1 val EEG->image top-1 %.3f (chance %.3f)", acc, chance)
    return Stage1Result(encoders, rows, acc, chance, skipped)


def embed_eeg(encoders: Encoders, eeg: np.ndarray, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode (features, pooled) for a stack of epochs."""
    feats, pooled = [], []
    with T.no_grad():
        for start in range(0, len(eeg), batch):
            f, p = encoders.encode_eeg(eeg[start:start + batch])
            feats.append(f.data)
            pooled.append(p.data)
    return np.concatenate(feats), np.concatenate(pooled)


def embed_images(encoders: Encoders, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch):
            out.append(encoders.encode_image(images[start:start + batch])[1].data)
    return np.concatenate(out)


def embed_texts(encoders: Encoders, prompts: Sequence[str]) -> np.ndarray:
    with T.no_grad():
        return encoders.encode_text(list(prompts)).data


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def retrieval_accuracy(encoders: Encoders, corpora: Sequence[Corpus], split: str) -> tuple[float, float]:
    """Top-1 EEG->image retrieval within each split; returns (accuracy, chance), pooled over corpora."""
    hits, total, chance = 0, 0, []
    for c in corpora:
        idx = c.split(split)
        if len(idx) == 0:
            continue
        _, h_eeg = embed_eeg(encoders, c.eeg[idx])
        h_img = embed_images(encoders, c.image_stack(idx))
        pick = cosine_matrix(h_eeg, h_img).argmax(axis=1)
        hits += int(np.sum(pick == np.arange(len(idx))))
        total += len(idx)
        chance.append(1.0 / len(idx))
    if total == 0:
        return float("nan"), float("nan")
    return hits / total, float(np.mean(chance))


def write_loss_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "total", *TERMS, "lr"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def config_dict(cfg: AlignmentConfig) -> dict:
    return asdict(cfg)
