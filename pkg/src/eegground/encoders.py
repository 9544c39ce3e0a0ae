"""EEG, image and text encoders with projectors into a shared D-dim space."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

UNK = "<unk>"


@dataclass
class EncoderConfig:
    channels: int = 8
    samples: int = 256
    patch_length: int = 32
    image_size: int = 32
    image_patch: int = 8
    model_dim: int = 64
    heads: int = 4
    layers: int = 2
    shared_dim: int = 64
    projector_hidden: int = 64

    @property
    def eeg_tokens(self) -> int:
        return self.channels * (self.samples // self.patch_length)

    @property
    def image_tokens(self) -> int:
        return (self.image_size // self.image_patch) ** 2


def tokenize_words(text: str) -> list[str]:
    return [w for w in re.split(r"\s+", text.strip().lower()) if w]


class Vocabulary:
    """Word-level vocabulary; id 0 is reserved for unknown words."""

    def __init__(self, words: Sequence[str]):
        self.words = [UNK] + sorted(set(words) - {UNK})
        self._ids = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> Vocabulary:
        return cls([w for t in texts for w in tokenize_words(t)])

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = [self._ids.get(w, 0) for w in tokenize_words(text)]
        if not ids:
            raise ValueError("prompt must contain at least one token")
        return ids


def patchify_image(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image patch {patch} does not divide {h}x{w}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify_image(patches: np.ndarray, size: int, patch: int, channels: int = 3) -> np.ndarray:
    b = patches.shape[0]
    g = size // patch
    x = patches.reshape(b, g, g, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, size, size, channels)


class EegBackbone(nn.Module):
    """Channel-wise temporal patches + spatial/temporal embeddings + transformer."""

    def __init__(self, rng, cfg: EncoderConfig):
        if cfg.samples % cfg.patch_length:
            raise ShapeError(f"patch_length {cfg.patch_length} does not divide {cfg.samples} samples")
        self._cfg = cfg
        n_patch = cfg.samples // cfg.patch_length
        self.patch_embed = nn.Linear(rng, cfg.patch_length, cfg.model_dim)
        self.temporal_embed = nn.param(rng, (n_patch, cfg.model_dim), 0.1)
        self.spatial_embed = nn.param(rng, (cfg.channels, cfg.model_dim), 0.1)
        self.blocks = [nn.EncoderBlock(rng, cfg.model_dim, cfg.heads) for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(cfg.model_dim)
        self._chan_ids = np.repeat(np.arange(cfg.channels), n_patch)
        self._time_ids = np.tile(np.arange(n_patch), cfg.channels)

    def __call__(self, eeg: np.ndarray) -> Tensor:
        cfg = self._cfg
        eeg = np.asarray(eeg, dtype=np.float64)
        if eeg.ndim == 2:
            eeg = eeg[None]
        if eeg.shape[1:] != (cfg.channels, cfg.samples):
            raise ShapeError(f"epoch shape {eeg.shape[1:]} vs encoder ({cfg.channels}, {cfg.samples})")
        b = eeg.shape[0]
        patches = eeg.reshape(b, cfg.eeg_tokens, cfg.patch_length)
        pos = T.embedding(self.spatial_embed, self._chan_ids) + T.embedding(self.temporal_embed, self._time_ids)
        x = self.patch_embed(Tensor(patches)) + pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class ImageBackbone(nn.Module):
    def __init__(self, rng, cfg: EncoderConfig):
        self._cfg = cfg
        self.patch_embed = nn.Linear(rng, cfg.image_patch ** 2 * 3, cfg.model_dim)
        self.pos_embed = nn.param(rng, (cfg.image_tokens, cfg.model_dim), 0.1)
        self.blocks = [nn.EncoderBlock(rng, cfg.model_dim, cfg.heads) for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(cfg.model_dim)

    def embed_patches(self, images: np.ndarray) -> Tensor:
        """Per-patch linear embedding, before position embeddings."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        size = self._cfg.image_size
        if images.shape[1:] != (size, size, 3):
            raise ShapeError(f"image shape {images.shape[1:]} vs encoder ({size}, {size}, 3)")
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        return self.patch_embed(Tensor(patchify_image(images, self._cfg.image_patch)))

    def __call__(self, images: np.ndarray) -> Tensor:
        x = self.embed_patches(images) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class TextBackbone(nn.Module):
    def __init__(self, rng, cfg: EncoderConfig, vocab: Vocabulary):
        self._vocab = vocab
        self.table = nn.param(rng, (len(vocab), cfg.model_dim), 1.0)

    def __call__(self, prompts: Sequence[str]) -> Tensor:
        rows = []
        for p in prompts:
            ids = self._vocab.encode(p)
            rows.append(T.mean(T.embedding(self.table, ids), axis=0, keepdims=True))
        return T.concat(rows, axis=0)


class Encoders(nn.Module):
    """All three backbones and projectors; parameter names match checkpoint prefixes."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, seed: int):
        rng = np.random.default_rng([seed, 1])
        self._cfg = cfg
        self.vocab = vocab
        self.enc_eeg = EegBackbone(rng, cfg)
        self.enc_img = ImageBackbone(rng, cfg)
        self.enc_text = TextBackbone(rng, cfg, vocab)
        h = cfg.projector_hidden
        self.proj_eeg = nn.MLP(rng, cfg.model_dim, h, cfg.shared_dim)
        self.proj_img = nn.MLP(rng, cfg.model_dim, h, cfg.shared_dim)
        self.proj_text = nn.MLP(rng, cfg.model_dim, h, cfg.shared_dim)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def encode_eeg(self, eeg: np.ndarray) -> tuple[Tensor, Tensor]:
        """(feature sequence B x P x model_dim, pooled B x D)."""
        feats = self.enc_eeg(eeg)
        return feats, self.proj_eeg(T.mean(feats, axis=1))

    def encode_image(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        feats = self.enc_img(images)
        return feats, self.proj_img(T.mean(feats, axis=1))

    def encode_text(self, prompts: Sequence[str]) -> Tensor:
        return self.proj_text(self.enc_text(prompts))
