"""Synthetic bag-classification task: large images whose label depends on a
few small class-specific texture motifs over a shared background.

Generation is pure given (spec, index), so datasets can stay lazy: samples
are rebuilt on access instead of held in memory. A template-matching oracle
confirms that labels are recoverable from pixels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage, signal

__all__ = [
    "SynthSpec",
    "SlideSample",
    "SynthDataset",
    "Splits",
    "DataError",
    "generate",
    "generate_sample",
    "class_motif",
    "oracle_predict",
    "oracle_accuracy",
    "oracle_margin",
    "save_dataset",
    "load_dataset",
    "write_image",
    "read_image",
]


class DataError(ValueError):
    """Raised for malformed datasets, manifests, or image files."""


# distinct tint directions per class, normalized to mean 1 per channel weight
_TINTS = np.array([
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.25, 0.25, 1.0],
    [1.0, 1.0, 0.25],
])


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic task; difficulty rescales contrast and size."""

    num_classes: int = 3
    image_size: Union[int, tuple[int, int]] = 512
    motif_size: int = 32
    motifs_per_image: Union[tuple[int, int], dict] = (2, 5)
    noise_sigma: float = 0.05
    difficulty: str = "easy"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= 4:
            raise DataError(f"num_classes must be in [2, 4], got {self.num_classes}")
        if self.difficulty not in ("easy", "hard"):
            raise DataError(f"difficulty must be 'easy' or 'hard', got {self.difficulty!r}")
        h, w = self.hw
        if self.effective_motif_size >= min(h, w):
            raise DataError(f"motif_size {self.motif_size} must be smaller than image {h}x{w}")

    @property
    def hw(self) -> tuple[int, int]:
        if isinstance(self.image_size, int):
            return self.image_size, self.image_size
        return tuple(self.image_size)

    @property
    def effective_motif_size(self) -> int:
        return self.motif_size if self.difficulty == "easy" else max(8, self.motif_size // 2)

    @property
    def amplitude(self) -> float:
        return 0.45 if self.difficulty == "easy" else 0.18

    @property
    def tint_strength(self) -> float:
        return 0.7 if self.difficulty == "easy" else 0.12

    @property
    def effective_noise(self) -> float:
        return self.noise_sigma if self.difficulty == "easy" else 2.5 * self.noise_sigma

    def motif_range(self, label: int) -> tuple[int, int]:
        if isinstance(self.motifs_per_image, dict):
            lo, hi = self.motifs_per_image[label]
        else:
            lo, hi = self.motifs_per_image
        if hi < lo or lo < 0:
            raise DataError(f"bad motifs_per_image range ({lo}, {hi}) for class {label}")
        return lo, hi


@dataclass
class SlideSample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    label: int
    meta: dict = field(default_factory=dict)


def class_motif(spec: SynthSpec, label: int) -> np.ndarray:
    """Canonical (3, s, s) additive motif for a class: an oriented grating
    with a class-specific color tint."""
    s = spec.effective_motif_size
    theta = np.pi * label / spec.num_classes
    wavelength = max(4.0, s / 4.0)
    u, v = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    grating = np.sin(2 * np.pi * (np.cos(theta) * u + np.sin(theta) * v) / wavelength)
    # taper to zero at the borders so motifs blend into the background
    window = np.hanning(s)[:, None] * np.hanning(s)[None, :]
    tint = _TINTS[label]
    weight = (1 - spec.tint_strength) + spec.tint_strength * 3 * tint / tint.sum()
    return spec.amplitude * weight[:, None, None] * (grating * window)[None, :, :]


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Smoothed noise texture with class-independent statistics."""
    h, w = spec.hw
    cell = 16
    grid = rng.uniform(0.35, 0.65, size=(3, h // cell + 2, w // cell + 2))
    up = ndimage.zoom(grid, (1, cell, cell), order=1)[:, :h, :w]
    return up + rng.normal(0.0, spec.effective_noise, size=(3, h, w))


def generate_sample(spec: SynthSpec, index: int) -> SlideSample:
    """Build sample ``index`` deterministically; labels cycle over classes."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    label = index % spec.num_classes
    h, w = spec.hw
    img = _background(spec, rng)
    s = spec.effective_motif_size
    lo, hi = spec.motif_range(label)
    count = int(rng.integers(lo, hi + 1))
    if count * s * s > 0.05 * h * w:
        raise DataError(
            f"{count} motifs of size {s} exceed 5% of a {h}x{w} image; shrink the spec")
    motif = class_motif(spec, label)
    positions = []
    for _ in range(count):
        r = int(rng.integers(0, h - s + 1))
        c = int(rng.integers(0, w - s + 1))
        img[:, r:r + s, c:c + s] += motif
        positions.append((r, c))
    np.clip(img, 0.0, 1.0, out=img)
    meta = {"label": label, "positions": positions, "motif_size": s,
            "difficulty": spec.difficulty, "index": index}
    return SlideSample(img, label, meta)


def generate(spec: SynthSpec, n: int) -> list[SlideSample]:
    """Materialize the first n samples."""
    return [generate_sample(spec, i) for i in range(n)]


class _LazySplit(Sequence):
    def __init__(self, spec: SynthSpec, offset: int, count: int):
        self._spec = spec
        self._offset = offset
        self._count = count

    def __len__(self):
        return self._count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self._count))]
        if not -self._count <= i < self._count:
            raise IndexError(i)
        return generate_sample(self._spec, self._offset + (i % self._count))


@dataclass
class Splits:
    """Train/val/test views over any sample sequence."""

    train: Sequence
    val: Sequence
    test: Sequence


class SynthDataset(Splits):
    """Lazy synthetic dataset; sample i is regenerated from (spec, i) on access."""

    def __init__(self, spec: SynthSpec, n_train: int, n_val: int, n_test: int):
        self.spec = spec
        super().__init__(
            train=_LazySplit(spec, 0, n_train),
            val=_LazySplit(spec, n_train, n_val),
            test=_LazySplit(spec, n_train + n_val, n_test),
        )


# ---------------------------------------------------------------------------
# Template-matching oracle


def oracle_scores(spec: SynthSpec, image: np.ndarray) -> np.ndarray:
    """Per-class peak correlation between the image and each class motif."""
    scores = np.empty(spec.num_classes)
    centered = image - image.mean(axis=(1, 2), keepdims=True)
    for c in range(spec.num_classes):
        t = class_motif(spec, c)
        t = t - t.mean(axis=(1, 2), keepdims=True)
        corr = sum(
            signal.fftconvolve(centered[ch], t[ch, ::-1, ::-1], mode="valid")
            for ch in range(3))
        scores[c] = corr.max() / np.sqrt((t * t).sum())
    return scores


def oracle_predict(spec: SynthSpec, image: np.ndarray) -> int:
    return int(np.argmax(oracle_scores(spec, image)))


def oracle_accuracy(spec: SynthSpec, samples: Sequence[SlideSample]) -> float:
    hits = sum(oracle_predict(spec, s.image) == s.label for s in samples)
    return hits / len(samples)


def oracle_margin(spec: SynthSpec, samples: Sequence[SlideSample]) -> float:
    """Mean score gap between the true class and the best other class."""
    gaps = []
    for s in samples:
        sc = oracle_scores(spec, s.image)
        other = np.delete(sc, s.label)
        gaps.append(sc[s.label] - other.max())
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# On-disk format: raw float64 images plus a CSV manifest

_MAGIC = b"PFI1"


def write_image(path: Union[str, Path], image: np.ndarray):
    """Packed float image: magic 'PFI1', three u32 LE dims (C, H, W), then
    C-order float64 LE pixel data. Lossless for float64 arrays."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError(f"write_image expects a (C, H, W) array, got shape {image.shape}")
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _MAGIC, c, h, w))
        fh.write(image.astype("<f8").tobytes())


def read_image(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise DataError(f"{path}: truncated header")
        magic, c, h, w = struct.unpack("<4sIII", header)
        if magic != _MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(fh.read(c * h * w * 8), dtype="<f8")
    if data.size != c * h * w:
        raise DataError(f"{path}: expected {c * h * w} pixels, found {data.size}")
    return data.reshape(c, h, w).astype(np.float64)


def save_dataset(directory: Union[str, Path], splits: dict):
    """Write one image file per sample plus manifest.csv (filename,label,split)
    and meta.json with generation records."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["filename,label,split"]
    metas = {}
    idx = 0
    for split_name, samples in splits.items():
        for sample in samples:
            fname = f"img_{idx:05d}.pfi"
            write_image(directory / fname, sample.image)
            rows.append(f"{fname},{sample.label},{split_name}")
            metas[fname] = sample.meta
            idx += 1
    (directory / "manifest.csv").write_text("\n".join(rows) + "\n")
    (directory / "meta.json").write_text(json.dumps(metas, indent=1, default=str))


class _DiskSample:
    """Lazily-loaded sample; pixel data is read on attribute access."""

    def __init__(self, path: Path, label: int, meta: dict):
        self._path = path
        self.label = label
        self.meta = meta

    @property
    def image(self) -> np.ndarray:
        return read_image(self._path)


def load_dataset(directory: Union[str, Path]) -> Splits:
    """Open a saved dataset; validates the manifest and split partition."""
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv under {directory}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != "filename,label,split":
        raise DataError(f"{manifest}: unrecognized header")
    metas = {}
    meta_path = directory / "meta.json"
    if meta_path.exists():
        metas = json.loads(meta_path.read_text())
    splits: dict[str, list] = {"train": [], "val": [], "test": []}
    seen = set()
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            fname, label_s, split = line.split(",")
        except ValueError:
            raise DataError(f"{manifest}: malformed row {line!r}") from None
        if split not in splits:
            raise DataError(f"{manifest}: unknown split {split!r} in row {line!r}")
        if fname in seen:
            raise DataError(f"{manifest}: duplicate filename {fname}")
        seen.add(fname)
        path = directory / fname
        if not path.exists():
            raise DataError(f"manifest references missing file {fname}")
        splits[split].append(_DiskSample(path, int(label_s), metas.get(fname, {})))
    return Splits(train=splits["train"], val=splits["val"], test=splits["test"])
