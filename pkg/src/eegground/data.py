"""Synthetic visual/clinical EEG corpora, binary sample formats, splits and samplers.

Each class is a (coarse, fine) latent pair. EEG carries the coarse factor as
the frequency of a class source and the fine factor as that source's
spatial pattern over channels; images carry the coarse factor as hue and the
fine factor as layout. Prompts name the class only. A per-sample intensity
drives both the class-source amplitude and the shape brightness, so an EEG
epoch and its image also share instance-level information.
"""

from __future__ import annotations

import colorsys
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import jsonschema
import numpy as np

from .checkpoint import FormatError, atomic_write, load_json, save_json

EEG_MAGIC = b"EEG1"
IMG_MAGIC = b"IMG1"

# Fixed "physiology" shared by every dataset so coarse level c means the same
# frequency and hue everywhere.
_LATENT_SEED = 20240611
COARSE_FREQS_HZ = (9.0, 23.0, 14.0, 31.0, 6.0, 40.0, 18.0, 27.0)
COARSE_HUES = (0.0, 0.58, 0.33, 0.12, 0.8, 0.47, 0.92, 0.22)
LAYOUTS = (
    ((4, 4, 16, 28),),
    ((16, 4, 28, 28),),
    ((4, 4, 28, 12), (4, 20, 28, 28)),
    ((10, 10, 22, 22),),
    ((4, 4, 14, 14), (18, 18, 28, 28)),
    ((4, 18, 14, 28), (18, 4, 28, 14)),
    ((4, 12, 28, 20),),
    ((12, 4, 20, 28),),
)
CLASS_WORDS = {
    "visual": ("neutral", "happy", "sad", "fear", "disgust", "surprise", "anger", "calm"),
    "clinical": ("normal", "abnormal", "wake", "sleep", "seizure", "slowing", "artifact", "spike"),
}


# -- binary formats -------------------------------------------------------------
def encode_eeg(data: np.ndarray, rate_hz: float) -> bytes:
    data = np.asarray(data)
    if data.ndim != 2:
        raise FormatError(f"EEG payload must be channels x samples, got {data.shape}")
    c, s = data.shape
    return EEG_MAGIC + struct.pack("<HIf", c, s, rate_hz) + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_eeg(buf: bytes) -> tuple[np.ndarray, float]:
    if buf[:4] != EEG_MAGIC:
        raise FormatError("not an EEG1 file (bad magic)")
    c, s, rate = struct.unpack_from("<HIf", buf, 4)
    payload = np.frombuffer(buf, dtype="<f4", offset=14)
    if payload.size != c * s:
        raise FormatError(f"EEG1 payload holds {payload.size} values, header says {c}x{s}")
    return payload.reshape(c, s).astype(np.float64), float(rate)


def encode_image(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3:
        raise FormatError(f"image payload must be H x W x C, got {img.shape}")
    h, w, c = img.shape
    return IMG_MAGIC + struct.pack("<HHH", h, w, c) + np.ascontiguousarray(img, dtype="<f4").tobytes()


def decode_image(buf: bytes) -> np.ndarray:
    if buf[:4] != IMG_MAGIC:
        raise FormatError("not an IMG1 file (bad magic)")
    h, w, c = struct.unpack_from("<HHH", buf, 4)
    payload = np.frombuffer(buf, dtype="<f4", offset=10)
    if payload.size != h * w * c:
        raise FormatError(f"IMG1 payload holds {payload.size} values, header says {h}x{w}x{c}")
    return payload.reshape(h, w, c).astype(np.float64)


def write_eeg(path, data, rate_hz) -> None:
    atomic_write(path, encode_eeg(data, rate_hz))


def read_eeg(path) -> tuple[np.ndarray, float]:
    return decode_eeg(Path(path).read_bytes())


def write_image(path, img) -> None:
    atomic_write(path, encode_image(img))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# -- manifests ------------------------------------------------------------------
MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["name", "kind", "classes", "sampling_weight", "samples"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": ["visual", "clinical"]},
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "sampling_weight": {"type": "number", "exclusiveMinimum": 0},
        "rate_hz": {"type": "number", "exclusiveMinimum": 0},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["eeg_path", "image_path", "class_id", "split", "latent"],
                "properties": {
                    "id": {"type": "string"},
                    "eeg_path": {"type": "string"},
                    "image_path": {"type": ["string", "null"]},
                    "class_id": {"type": "integer", "minimum": 0},
                    "split": {"enum": ["train", "val", "test", "unassigned"]},
                    "latent": {
                        "type": "object",
                        "required": ["coarse", "fine"],
                        "properties": {"coarse": {"type": "integer"}, "fine": {"type": "integer"}},
                    },
                },
            },
        },
        "provenance": {"type": "object"},
    },
}


@dataclass
class Sample:
    id: str
    eeg_path: str
    image_path: str | None
    class_id: int
    split: str
    coarse: int
    fine: int

    def to_json(self) -> dict:
        return {"id": self.id, "eeg_path": self.eeg_path, "image_path": self.image_path,
                "class_id": self.class_id, "split": self.split,
                "latent": {"coarse": self.coarse, "fine": self.fine}}


@dataclass
class DatasetManifest:
    name: str
    kind: str
    classes: list[str]
    sampling_weight: float
    samples: list[Sample]
    root: Path = Path(".")
    rate_hz: float = 200.0
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "classes": list(self.classes),
               "sampling_weight": self.sampling_weight, "rate_hz": self.rate_hz,
               "samples": [s.to_json() for s in self.samples]}
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    def save(self, root=None) -> Path:
        if root is not None:
            self.root = Path(root)
        validate_manifest(self.to_json())
        save_json(self.path, self.to_json())
        return self.path

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        obj = load_json(path)
        validate_manifest(obj)
        samples = [Sample(s.get("id", str(i)), s["eeg_path"], s["image_path"], s["class_id"], s["split"],
                          s["latent"]["coarse"], s["latent"]["fine"]) for i, s in enumerate(obj["samples"])]
        return cls(obj["name"], obj["kind"], list(obj["classes"]), float(obj["sampling_weight"]), samples,
                   path.parent, float(obj.get("rate_hz", 200.0)), dict(obj.get("provenance", {})))

    def indices(self, split: str | None = None) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.samples) if split is None or s.split == split], dtype=np.int64)

    def labels(self, idx=None) -> np.ndarray:
        idx = range(len(self.samples)) if idx is None else idx
        return np.array([self.samples[i].class_id for i in idx], dtype=np.int64)

    def has_images(self) -> bool:
        return all(s.image_path is not None for s in self.samples)

    def load_eeg(self, idx=None) -> np.ndarray:
        idx = range(len(self.samples)) if idx is None else idx
        return np.stack([read_eeg(self.root / self.samples[i].eeg_path)[0] for i in idx])

    def load_images(self, idx=None) -> np.ndarray | None:
        idx = list(range(len(self.samples)) if idx is None else idx)
        if any(self.samples[i].image_path is None for i in idx):
            return None
        return np.stack([read_image(self.root / self.samples[i].image_path) for i in idx])


def validate_manifest(obj: dict) -> None:
    jsonschema.validate(obj, MANIFEST_SCHEMA)
    n = len(obj["classes"])
    for s in obj["samples"]:
        if s["class_id"] >= n:
            raise jsonschema.ValidationError(f"class_id {s['class_id']} outside {n} classes")


# -- generation -----------------------------------------------------------------
@dataclass
class DatasetSpec:
    name: str
    kind: str = "visual"
    num_classes: int = 4
    samples_per_class: int = 50
    noise_level: float = 0.5
    seed: int = 0
    channels: int = 8
    samples: int = 256
    rate_hz: float = 200.0
    image_size: int = 32
    sampling_weight: float = 1.0
    class_names: Sequence[str] | None = None

    def validate(self) -> None:
        if self.kind not in ("visual", "clinical"):
            raise ValueError(f"kind must be 'visual' or 'clinical', got {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 4:
            raise ValueError("samples_per_class must be >= 4")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.sampling_weight <= 0:
            raise ValueError("sampling_weight must be > 0")
        if self.num_classes > len(CLASS_WORDS[self.kind]) and self.class_names is None:
            raise ValueError(f"at most {len(CLASS_WORDS[self.kind])} classes without explicit class_names")
        n_coarse, n_fine = class_factors(self.num_classes)
        if n_coarse > len(COARSE_FREQS_HZ) or n_fine > len(LAYOUTS):
            raise ValueError(f"{self.num_classes} classes exceed the latent tables")


def class_factors(num_classes: int) -> tuple[int, int]:
    """(coarse levels, fine levels); even class counts >= 4 split two fine levels."""
    n_fine = 2 if num_classes >= 4 and num_classes % 2 == 0 else 1
    return num_classes // n_fine, n_fine


def class_latent(class_id: int, num_classes: int) -> tuple[int, int]:
    _, n_fine = class_factors(num_classes)
    return class_id // n_fine, class_id % n_fine


def spatial_patterns(channels: int) -> np.ndarray:
    """Unit-RMS channel mixing vector for each fine level."""
    rng = np.random.default_rng([_LATENT_SEED, channels])
    pats = rng.normal(size=(len(LAYOUTS), channels))
    pats -= pats.mean(axis=1, keepdims=True)
    return pats / np.sqrt((pats**2).mean(axis=1, keepdims=True))


def synth_eeg(rng: np.random.Generator, coarse: int, fine: int, intensity: float, spec: DatasetSpec) -> np.ndarray:
    t = np.arange(spec.samples) / spec.rate_hz
    pattern = spatial_patterns(spec.channels)[fine]
    freq = COARSE_FREQS_HZ[coarse] + rng.uniform(-0.5, 0.5)
    amp = 0.6 + 0.8 * intensity
    source = amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    x = pattern[:, None] * source[None, :]
    for _ in range(2):
        nuisance = np.sin(2 * np.pi * rng.uniform(3.0, 45.0) * t + rng.uniform(0, 2 * np.pi))
        x += 0.7 * rng.normal(size=spec.channels)[:, None] * nuisance[None, :]
    x += spec.noise_level * rng.normal(size=x.shape)
    return x


def synth_image(rng: np.random.Generator, coarse: int, fine: int, intensity: float, size: int = 32) -> np.ndarray:
    img = np.full((size, size, 3), 0.12)
    color = np.array(colorsys.hsv_to_rgb(COARSE_HUES[coarse], 0.85, 0.45 + 0.5 * intensity))
    dy, dx = rng.integers(-2, 3, size=2)
    s = size / 32.0
    for x0, y0, x1, y1 in LAYOUTS[fine]:
        ys = slice(max(0, int(y0 * s) + dy), min(size, int(y1 * s) + dy))
        xs = slice(max(0, int(x0 * s) + dx), min(size, int(x1 * s) + dx))
        img[ys, xs] = color
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_rng(seed: int, name: str, index: int) -> np.random.Generator:
    """Counter-based per-sample stream: independent of generation order."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed, key, index])


def generate_dataset(spec: DatasetSpec, out_dir) -> DatasetManifest:
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    names = list(spec.class_names) if spec.class_names is not None else list(CLASS_WORDS[spec.kind][:spec.num_classes])
    samples = []
    index = 0
    for cls in range(spec.num_classes):
        coarse, fine = class_latent(cls, spec.num_classes)
        for _ in range(spec.samples_per_class):
            rng = sample_rng(spec.seed, spec.name, index)
            intensity = float(rng.uniform())
            sid = f"{index:05d}"
            eeg_rel = f"eeg/{sid}.eeg"
            write_eeg(out_dir / eeg_rel, synth_eeg(rng, coarse, fine, intensity, spec), spec.rate_hz)
            img_rel = None
            if spec.kind == "visual":
                img_rel = f"image/{sid}.img"
                write_image(out_dir / img_rel, synth_image(rng, coarse, fine, intensity, spec.image_size))
            samples.append(Sample(sid, eeg_rel, img_rel, cls, "unassigned", coarse, fine))
            index += 1
    manifest = DatasetManifest(spec.name, spec.kind, names, spec.sampling_weight, samples, out_dir, spec.rate_hz)
    manifest.save()
    return manifest


def prompt_for(class_name: str) -> str:
    return f"eeg of {class_name}"


# -- splits ---------------------------------------------------------------------
SPLITS = ("train", "val", "test")


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Assign train/val/test per class; modifies and returns ``manifest``."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    needed = sum(1 for r in ratios if r > 0)
    rng = np.random.default_rng(seed)
    for cls in range(manifest.num_classes):
        members = [i for i, s in enumerate(manifest.samples) if s.class_id == cls]
        if len(members) < needed:
            raise ValueError(f"class {cls} has {len(members)} samples, fewer than {needed} splits")
        perm = rng.permutation(len(members))
        counts = _largest_remainder(len(members), ratios)
        start = 0
        for split, count in zip(SPLITS, counts):
            for j in perm[start:start + count]:
                manifest.samples[members[j]].split = split
            start += count
    return manifest


# -- samplers -------------------------------------------------------------------
class DatasetSampler:
    """Infinite stream of (dataset index, sample index) pairs.

    Dataset ``d`` is drawn with probability proportional to ``scores[d]``;
    within a dataset, samples are visited without replacement, reshuffled at
    the start of every cycle.
    """

    def __init__(self, pools: Sequence[Sequence[int]], scores: Sequence[float], seed: int):
        if not pools:
            raise ValueError("sampler needs at least one dataset")
        if any(len(p) == 0 for p in pools):
            raise ValueError("sampler pools must be nonempty")
        scores = np.asarray(scores, dtype=np.float64)
        if np.any(scores <= 0):
            raise ValueError("sampling weights must be > 0")
        self.pools = [np.asarray(p, dtype=np.int64) for p in pools]
        self.probs = scores / scores.sum()
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0
        self._rng = np.random.default_rng(seed)
        self._orders = [self._rng.permutation(p) for p in self.pools]
        self._pos = [0] * len(self.pools)
        self._buffer: list[int] = []

    def _next_dataset(self) -> int:
        if not self._buffer:
            self._buffer = list(np.searchsorted(self._cdf, self._rng.random(1024), side="right")[::-1])
        return int(self._buffer.pop())

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return self

    def __next__(self) -> tuple[int, int]:
        d = self._next_dataset()
        if self._pos[d] == len(self._orders[d]):
            self._orders[d] = self._rng.permutation(self.pools[d])
            self._pos[d] = 0
        idx = int(self._orders[d][self._pos[d]])
        self._pos[d] += 1
        return d, idx

    def take(self, n: int) -> list[tuple[int, int]]:
        return [next(self) for _ in range(n)]


def _pools(manifests, split):
    if not manifests:
        raise ValueError("sampler needs at least one manifest")
    return [m.indices(split) if split else np.arange(len(m.samples)) for m in manifests]


def weighted_sampler(manifests: Sequence[DatasetManifest], seed: int, split: str | None = "train") -> DatasetSampler:
    """Dataset d drawn with probability w_d * n_d / sum_e w_e * n_e."""
    pools = _pools(manifests, split)
    return DatasetSampler(pools, [m.sampling_weight * len(p) for m, p in zip(manifests, pools)], seed)


def balanced_sampler(manifests: Sequence[DatasetManifest], seed: int, split: str | None = "train") -> DatasetSampler:
    """Every dataset drawn with equal probability regardless of size."""
    pools = _pools(manifests, split)
    return DatasetSampler(pools, [1.0] * len(pools), seed)


# -- in-memory view -------------------------------------------------------------
@dataclass
class Corpus:
    """Arrays for one manifest, loaded once; images are None where absent."""

    manifest: DatasetManifest
    eeg: np.ndarray
    images: list[np.ndarray | None]
    labels: np.ndarray
    prompts: list[str]

    @classmethod
    def load(cls, manifest: DatasetManifest) -> Corpus:
        eeg = manifest.load_eeg()
        images = [None if s.image_path is None else read_image(manifest.root / s.image_path)
                  for s in manifest.samples]
        prompts = [prompt_for(manifest.classes[s.class_id]) for s in manifest.samples]
        return cls(manifest, eeg, images, manifest.labels(), prompts)

    @property
    def name(self) -> str:
        return self.manifest.name

    def split(self, split: str) -> np.ndarray:
        return self.manifest.indices(split)

    def image_stack(self, idx) -> np.ndarray:
        imgs = [self.images[i] for i in idx]
        if any(im is None for im in imgs):
            raise ValueError(f"{self.name}: requested samples without images")
        return np.stack(imgs)
