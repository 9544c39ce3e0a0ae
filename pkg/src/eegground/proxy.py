"""Proxy images for clinical EEG: text-anchored alignment plus exact retrieval from a visual bank."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import AlignmentConfig, Stage1Result, cosine_matrix, embed_eeg, embed_images, embed_texts, train_stage1
from .checkpoint import load_json, load_tensors, save_json, save_tensors
from .data import Corpus, DatasetManifest, Sample, prompt_for, write_image
from .encoders import EncoderConfig, Encoders, Vocabulary
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

GENERATOR_VERSION = "retrieval-1"


def train_clinical_text_alignment(cfg: AlignmentConfig, clinical: Sequence[Corpus], enc_cfg: EncoderConfig,
                                  vocab: Vocabulary, visual: Sequence[Corpus] = ()) -> Stage1Result:
    """Pull clinical EEG toward its label text; visual corpora, if given, anchor images in the same space.

    Clinical corpora must not carry images yet, so only the EEG-text term acts on them.
    """
    if not clinical:
        raise ValueError("clinical text alignment needs at least one clinical dataset")
    bad = [c.name for c in clinical if c.manifest.kind != "clinical"]
    if bad:
        raise ValueError(f"expected clinical manifests, got visual: {bad}")
    if any(im is not None for c in clinical for im in c.images):
        raise ValueError("clinical corpora already carry images; align before attaching proxies")
    cfg = replace(cfg, alignment_mode="trimodal") if visual else replace(cfg, alignment_mode="text_only")
    return train_stage1(cfg, [*visual, *clinical], enc_cfg, vocab)


def class_text_accuracy(encoders: Encoders, corpus: Corpus, split: str = "val") -> float:
    """Fraction of samples whose EEG is closer (cosine) to its own class prompt than to every other."""
    idx = corpus.split(split)
    if len(idx) == 0:
        return float("nan")
    _, h = embed_eeg(encoders, corpus.eeg[idx])
    texts = embed_texts(encoders, [prompt_for(c) for c in corpus.manifest.classes])
    sims = cosine_matrix(h, texts)
    own = sims[np.arange(len(idx)), corpus.labels[idx]]
    others = sims.copy()
    others[np.arange(len(idx)), corpus.labels[idx]] = -np.inf
    return float(np.mean(own > others.max(axis=1)))


@dataclass
class ProxyBank:
    embeddings: np.ndarray
    grids: np.ndarray
    ids: list[str]
    coarse: np.ndarray
    source: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.embeddings, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.grids, dtype="<i8").tobytes())
        h.update("\n".join(self.ids).encode())
        return h.hexdigest()

    def save(self, stem) -> None:
        """Embeddings go to ``<stem>.gvgt``; grids, ids and latents to ``<stem>.json``."""
        stem = Path(stem)
        save_tensors(stem.with_suffix(".gvgt"), {"bank/embeddings": self.embeddings})
        save_json(stem.with_suffix(".json"), {"source": self.source, "ids": self.ids,
                                              "grids": self.grids.tolist(), "coarse": self.coarse.tolist()})

    @classmethod
    def load(cls, stem) -> ProxyBank:
        stem = Path(stem)
        emb = load_tensors(stem.with_suffix(".gvgt"))["bank/embeddings"]
        meta = load_json(stem.with_suffix(".json"))
        return cls(emb, np.array(meta["grids"], dtype=np.int64), list(meta["ids"]),
                   np.array(meta["coarse"], dtype=np.int64), meta["source"])


def build_bank(visual, encoders: Encoders, tokenizer: Tokenizer) -> ProxyBank:
    """Image embeddings and token grids of visual train splits, ordered by ``<dataset>/<sample id>``."""
    corpora = [visual] if isinstance(visual, Corpus) else list(visual)
    entries = []
    for c in corpora:
        if c.manifest.kind != "visual":
            raise ValueError(f"bank source {c.name} is not a visual dataset")
        idx = c.split("train")
        if len(idx) == 0:
            raise ValueError(f"{c.name} has an empty train split")
        entries += [(f"{c.name}/{c.manifest.samples[i].id}", c, int(i)) for i in idx]
    entries.sort(key=lambda e: e[0])
    images = np.stack([c.images[i] for _, c, i in entries])
    return ProxyBank(embed_images(encoders, images), tokenizer.tokenize(images), [e[0] for e in entries],
                     np.array([c.manifest.samples[i].coarse for _, c, i in entries], dtype=np.int64),
                     ",".join(c.name for c in corpora))


@dataclass
class ProxyRecord:
    sample_id: str
    bank_id: str
    score: float
    grid: np.ndarray
    image_path: str | None = None


def retrieve(queries: np.ndarray, bank: ProxyBank) -> tuple[np.ndarray, np.ndarray]:
    """Exact argmax-cosine over the bank; ties go to the first (lowest id) entry."""
    if len(bank) == 0:
        raise ValueError("proxy bank is empty")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if np.any(np.linalg.norm(queries, axis=1) == 0):
        raise ValueError("zero-norm query embedding")
    sims = np.clip(cosine_matrix(queries, bank.embeddings), -1.0, 1.0)
    pick = np.argmax(sims, axis=1)
    return pick, sims[np.arange(len(pick)), pick]


def generate_proxies(corpus: Corpus, bank: ProxyBank, encoders: Encoders) -> list[ProxyRecord]:
    _, h = embed_eeg(encoders, corpus.eeg)
    pick, score = retrieve(h, bank)
    return [ProxyRecord(s.id, bank.ids[j], float(sc), bank.grids[j].copy())
            for s, j, sc in zip(corpus.manifest.samples, pick, score)]


def class_consistency(records: Sequence[ProxyRecord], manifest: DatasetManifest, bank: ProxyBank) -> tuple[float, float]:
    """(fraction of proxies sharing the sample's coarse factor, chance rate of that match)."""
    pos = {sid: i for i, sid in enumerate(bank.ids)}
    by_id = {s.id: s for s in manifest.samples}
    hits = [bank.coarse[pos[r.bank_id]] == by_id[r.sample_id].coarse for r in records]
    chance = np.mean([np.mean(bank.coarse == by_id[r.sample_id].coarse) for r in records])
    return float(np.mean(hits)), float(chance)


def attach_proxies(manifest: DatasetManifest, records: Sequence[ProxyRecord], tokenizer: Tokenizer,
                   out_root, bank: ProxyBank) -> DatasetManifest:
    """Write proxy images under ``out_root/proxies/<dataset>/`` and return the augmented manifest."""
    by_id = {r.sample_id: r for r in records}
    missing = [s.id for s in manifest.samples if s.id not in by_id]
    if missing:
        raise ValueError(f"no proxy record for samples {missing}")
    new_root = Path(out_root) / "proxies" / manifest.name
    new_root.mkdir(parents=True, exist_ok=True)
    grids = np.stack([by_id[s.id].grid for s in manifest.samples])
    images = tokenizer.detokenize(grids)
    samples = []
    for s, img in zip(manifest.samples, images):
        rel = f"{s.id}.img"
        write_image(new_root / rel, img)
        by_id[s.id].image_path = str(new_root / rel)
        eeg_rel = os.path.relpath(manifest.root / s.eeg_path, new_root)
        samples.append(Sample(s.id, eeg_rel, rel, s.class_id, s.split, s.coarse, s.fine))
    provenance = {"generator": GENERATOR_VERSION, "bank_hash": bank.digest(), "bank_source": bank.source,
                  "source_manifest": os.path.relpath(manifest.path, new_root),
                  "records": {r.sample_id: {"bank_id": r.bank_id, "score": r.score} for r in records}}
    out = DatasetManifest(manifest.name, manifest.kind, list(manifest.classes), manifest.sampling_weight,
                          samples, new_root, manifest.rate_hz, provenance)
    out.save()
    return out
