"""Discrete visual interface: k-means codebook over patch features, patch decoder."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels, nn
from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .encoders import EncoderConfig, patchify_image, unpatchify_image
from .optim import Adam
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class Codebook:
    entries: np.ndarray
    frozen: bool = True

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.entries, dtype="<f8").tobytes()).hexdigest()


@dataclass
class KMeansResult:
    centers: np.ndarray
    inertia: float
    iterations: int


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError(f"fewer than {k} distinct feature vectors")
        nxt = x[rng.choice(n, p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - nxt) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 50, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from a k-means++ start; stop on relative inertia change < tol."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ValueError(f"K={k} must lie in [1, {len(x)}] (number of features)")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(x, k, rng)
    prev = np.inf
    inertia = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        assign, dist = kernels.nearest_code(x, centers)
        inertia = float(dist.sum())
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        taken: set[int] = set()
        for j in np.flatnonzero(~filled):
            # re-seed an empty cluster at the point farthest from its center
            order = np.argsort(-dist, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[j] = x[far]
            dist[far] = 0.0
        centers = new
        if inertia == 0 or (np.isfinite(prev) and (prev - inertia) / prev < tol and filled.all()):
            break
        prev = inertia
    assign, dist = kernels.nearest_code(x, centers)
    return KMeansResult(centers, float(dist.sum()), it)


def fit_codebook(features: np.ndarray, k: int, seed: int, max_iter: int = 50, tol: float = 1e-6) -> Codebook:
    features = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
    result = kmeans(features, k, seed, max_iter, tol)
    if len(np.unique(result.centers, axis=0)) != k:
        raise ValueError("codebook has duplicate entries; features have too few distinct points")
    log.info("codebook K=%d inertia=%.4g after %d iterations", k, result.inertia, result.iterations)
    return Codebook(result.centers, frozen=True)


class PatchFeaturizer(nn.Module):
    """Frozen per-patch linear embedding used to tokenize images."""

    def __init__(self, cfg: EncoderConfig, weight: np.ndarray, bias: np.ndarray):
        self._cfg = cfg
        self.weight = Tensor(np.asarray(weight, dtype=np.float64))
        self.bias = Tensor(np.asarray(bias, dtype=np.float64))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) -> (B, M, D) patch features."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return patchify_image(images, self._cfg.image_patch) @ self.weight.data + self.bias.data


class PatchDecoder(nn.Module):
    """Code vector -> patch pixels through a linear map and a sigmoid."""

    def __init__(self, code_dim: int, patch_pixels: int, init_mean: float = 0.5):
        self.weight = Tensor(np.zeros((code_dim, patch_pixels)), requires_grad=True)
        p = min(max(init_mean, 1e-3), 1 - 1e-3)
        self.bias = Tensor(np.full(patch_pixels, np.log(p / (1 - p))), requires_grad=True)

    def __call__(self, codes: Tensor) -> Tensor:
        return T.sigmoid(T.matmul(codes, self.weight) + self.bias)


@dataclass
class Tokenizer:
    cfg: EncoderConfig
    featurizer: PatchFeaturizer
    codebook: Codebook
    decoder: PatchDecoder

    @property
    def grid_length(self) -> int:
        return self.cfg.image_tokens

    def tokenize(self, images: np.ndarray) -> np.ndarray:
        if not self.codebook.frozen:
            raise RuntimeError("codebook must be frozen before tokenizing")
        feats = self.featurizer(images)
        b, m, d = feats.shape
        idx, _ = kernels.nearest_code(feats.reshape(-1, d), self.codebook.entries)
        return idx.reshape(b, m)

    def decode_patches(self, grid: np.ndarray) -> Tensor:
        grid = np.asarray(grid, dtype=np.int64)
        if grid.min() < 0 or grid.max() >= self.codebook.size:
            raise IndexError(f"token index outside [0, {self.codebook.size})")
        return self.decoder(Tensor(self.codebook.entries[grid]))

    def detokenize(self, grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(grid, dtype=np.int64)
        if grid.ndim == 1:
            grid = grid[None]
        if grid.shape[1] != self.grid_length:
            raise ShapeError(f"grid length {grid.shape[1]} vs {self.grid_length}")
        with T.no_grad():
            patches = self.decode_patches(grid).data
        return unpatchify_image(patches, self.cfg.image_size, self.cfg.image_patch)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            "tokenizer_encoder/weight": self.featurizer.weight.data,
            "tokenizer_encoder/bias": self.featurizer.bias.data,
            "codebook/entries": self.codebook.entries,
            "patch_decoder/weight": self.decoder.weight.data,
            "patch_decoder/bias": self.decoder.bias.data,
        }

    def save(self, path) -> str:
        return save_tensors(path, self.state_dict())

    @classmethod
    def load(cls, path, cfg: EncoderConfig) -> Tokenizer:
        s = load_tensors(path)
        feat = PatchFeaturizer(cfg, s["tokenizer_encoder/weight"], s["tokenizer_encoder/bias"])
        dec = PatchDecoder(*s["patch_decoder/weight"].shape)
        dec.weight.data = s["patch_decoder/weight"]
        dec.bias.data = s["patch_decoder/bias"]
        return cls(cfg, feat, Codebook(s["codebook/entries"], frozen=True), dec)


@dataclass
class DecoderReport:
    train_mse: float
    val_mse: float
    init_train_mse: float
    steps: int


def reconstruction_mse(tok: Tokenizer, images: np.ndarray) -> float:
    return float(np.mean((tok.detokenize(tok.tokenize(images)) - images) ** 2))


def train_patch_decoder(tok: Tokenizer, train_images: np.ndarray, val_images: np.ndarray | None,
                        seed: int, steps: int = 1500, lr: float = 0.05, batch: int = 512) -> DecoderReport:
    """Minimize pixel MSE of detokenize(tokenize(x)) against x; updates ``tok.decoder``."""
    rng = np.random.default_rng(seed)
    grid = tok.tokenize(train_images).reshape(-1)
    target = patchify_image(train_images, tok.cfg.image_patch).reshape(len(grid), -1)
    codes = tok.codebook.entries[grid]
    init = reconstruction_mse(tok, train_images)
    params = tok.decoder.parameters()
    opt = Adam(params, lr=lr)
    for step in range(steps):
        pick = rng.choice(len(grid), size=min(batch, len(grid)), replace=False)
        pred = tok.decoder(Tensor(codes[pick]))
        diff = pred - Tensor(target[pick])
        loss = T.mean(diff * diff)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"patch decoder diverged at step {step} (loss {loss.item()})")
        opt.step(T.gradients(loss, params))
    train = reconstruction_mse(tok, train_images)
    val = reconstruction_mse(tok, val_images) if val_images is not None and len(val_images) else float("nan")
    log.info("patch decoder train MSE %.5f val MSE %.5f (init %.5f)", train, val, init)
    return DecoderReport(train, val, init, steps)


def build_tokenizer(cfg: EncoderConfig, featurizer_weight: np.ndarray, featurizer_bias: np.ndarray,
                    train_images: np.ndarray, k: int, seed: int) -> Tokenizer:
    feat = PatchFeaturizer(cfg, featurizer_weight, featurizer_bias)
    codebook = fit_codebook(feat(train_images), k, seed)
    pixels = float(np.mean(train_images))
    dec = PatchDecoder(codebook.dim, cfg.image_patch ** 2 * 3, init_mean=pixels)
    return Tokenizer(cfg, feat, codebook, dec)


def fixed_point_rate(tok: Tokenizer, grids: np.ndarray) -> float:
    """Fraction of grids g with tokenize(detokenize(g)) == g."""
    back = tok.tokenize(tok.detokenize(grids))
    return float(np.mean(np.all(back == grids, axis=1)))
