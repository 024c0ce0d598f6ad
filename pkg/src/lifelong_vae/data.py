"""IDX ingestion and construction of sequential distribution splits."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAX_ITEMS = 1 << 31
DATA_ROOT_ENV = "LIFELONG_VAE_DATA_ROOT"


class IdxArray(NamedTuple):
    data: np.ndarray
    magic: int
    dims: tuple[int, ...]


def parse_idx(blob: bytes) -> IdxArray:
    """Parse an in-memory unsigned-byte IDX file (images or labels)."""
    if len(blob) < 4:
        raise FormatError("file too short for an IDX magic number", 0)
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError("truncated IDX header", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if count >= _MAX_ITEMS:
            raise FormatError(f"IDX dimensions overflow at dim {i}", 4 + 4 * i)
    payload = len(blob) - header_end
    if payload < count:
        raise FormatError(f"truncated payload: expected {count} bytes, found {payload}", len(blob))
    if payload > count:
        raise FormatError(f"{payload - count} unexpected trailing bytes", header_end + count)
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end).reshape(dims)
    return IdxArray(data.copy(), magic, tuple(dims))


def load_idx(path: str | Path) -> IdxArray:
    """Read an IDX file; ``.gz`` files are decompressed transparently."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


@dataclass
class ImageDataset:
    """Flattened images in [0, 1] with optional labels.

    ``sources`` carries a per-image origin tag once datasets are
    concatenated; for a fresh dataset every image carries ``source_tag``.
    """

    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    source_tag: str = ""
    sources: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be a 2-d array, got shape {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in length")
        if self.sources is None:
            self.sources = np.full(len(self.images), self.source_tag, dtype=object)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, split: str | None = None, source_tag: str | None = None) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        tag = self.source_tag if source_tag is None else source_tag
        return ImageDataset(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            split or self.split,
            tag,
            np.full(len(idx), tag, dtype=object) if source_tag is not None else self.sources[idx],
        )


def concat(datasets: list[ImageDataset], split: str | None = None, source_tag: str = "") -> ImageDataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise ValueError(f"inconsistent image dimensions {sorted(dims)}")
    labels = None
    if all(d.labels is not None for d in datasets):
        labels = np.concatenate([d.labels for d in datasets])
    return ImageDataset(
        np.concatenate([d.images for d in datasets]),
        labels,
        split or datasets[0].split,
        source_tag or "+".join(d.source_tag for d in datasets),
        np.concatenate([d.sources for d in datasets]),
    )


def preprocess(raw: np.ndarray, labels: np.ndarray | None = None, split: str = "train",
               source_tag: str = "") -> ImageDataset:
    """Flatten uint8 images and scale them to [0, 1] (no binarisation)."""
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {raw.dtype}")
    images = raw.reshape(len(raw), -1).astype(np.float64) / 255.0
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 9:
            raise ValueError("labels must lie in [0, 9]")
    return ImageDataset(images, labels, split, source_tag)


@dataclass
class DistributionSequence:
    triples: list[tuple[ImageDataset, ImageDataset, ImageDataset]]
    kind: str
    permutations: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.triples:
            raise ValueError("a distribution sequence needs at least one entry")
        dims = {d.dim for t in self.triples for d in t}
        if len(dims) != 1:
            raise ValueError(f"inconsistent image dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def __getitem__(self, i):
        return self.triples[i]


def _carve_val(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_by_label(
    train: ImageDataset,
    test: ImageDataset,
    val_fraction: float = 0.1,
    seed: int = 0,
    classes: list[int] | None = None,
    max_train_per_class: int | None = None,
    max_test_per_class: int | None = None,
) -> DistributionSequence:
    """One (train, val, test) triple per class, ordered by label.

    Caps are applied before the validation split, so ``|val_d| =
    round(val_fraction * |train_d|)`` where ``train_d`` is the capped pool.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("splitting by label requires labelled datasets")
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    classes = sorted(set(train.labels.tolist())) if classes is None else list(classes)
    rng = np.random.default_rng(seed)
    triples = []
    for d in classes:
        tr_idx = np.flatnonzero(train.labels == d)[:max_train_per_class]
        te_idx = np.flatnonzero(test.labels == d)[:max_test_per_class]
        keep, val = _carve_val(len(tr_idx), val_fraction, rng)
        tag = f"class{d}"
        triples.append((
            train.subset(tr_idx[keep], "train", tag),
            train.subset(tr_idx[val], "val", tag),
            test.subset(te_idx, "test", tag),
        ))
    return DistributionSequence(triples, "per_class")


def split_train_val(train: ImageDataset, val_fraction: float = 0.1, seed: int = 0,
                    max_train: int | None = None) -> tuple[ImageDataset, ImageDataset]:
    rng = np.random.default_rng(seed)
    pool = np.sort(rng.permutation(len(train))[:max_train]) if max_train else np.arange(len(train))
    keep, val = _carve_val(len(pool), val_fraction, rng)
    return train.subset(pool[keep], "train"), train.subset(pool[val], "val")


def draw_permutations(n: int, dim: int, seed: int) -> list[np.ndarray]:
    """Pairwise-distinct pixel permutations, the first being the identity."""
    rng = np.random.default_rng(seed)
    perms = [np.arange(dim)]
    seen = {perms[0].tobytes()}
    while len(perms) < n:
        p = rng.permutation(dim)
        if p.tobytes() not in seen:
            seen.add(p.tobytes())
            perms.append(p)
    return perms


def make_permuted_sequence(
    train: ImageDataset, val: ImageDataset, test: ImageDataset, n: int = 5, seed: int = 0
) -> DistributionSequence:
    """``n`` copies of the base splits, the i-th with its own fixed pixel permutation."""
    if n < 1:
        raise ValueError("need at least one permutation")
    perms = draw_permutations(n, train.dim, seed)
    triples = []
    for i, perm in enumerate(perms):
        tag = f"perm{i}"
        triples.append(tuple(
            ImageDataset(ds.images[:, perm], ds.labels, ds.split, tag)
            for ds in (train, val, test)
        ))
    return DistributionSequence(triples, "permuted", perms)


def accumulate_test(sequence: DistributionSequence, i: int) -> ImageDataset:
    """Union of the test splits of the first ``i`` distributions (1-based)."""
    if not 1 <= i <= len(sequence):
        raise ValueError(f"i must lie in [1, {len(sequence)}], got {i}")
    if i == 1:
        return sequence[0][2]
    return concat([sequence[j][2] for j in range(i)], split="test")


# -- on-disk corpora ---------------------------------------------------------

DEFAULT_MANIFEST = {
    "mnist": {
        "train_images": "mnist/train-images-idx3-ubyte.gz",
        "train_labels": "mnist/train-labels-idx1-ubyte.gz",
        "test_images": "mnist/t10k-images-idx3-ubyte.gz",
        "test_labels": "mnist/t10k-labels-idx1-ubyte.gz",
    },
    "fashion": {
        "train_images": "fashion/train-images-idx3-ubyte.gz",
        "train_labels": "fashion/train-labels-idx1-ubyte.gz",
        "test_images": "fashion/t10k-images-idx3-ubyte.gz",
        "test_labels": "fashion/t10k-labels-idx1-ubyte.gz",
    },
}


def resolve_data_root(data_root: str | Path | None = None) -> Path:
    if os.environ.get(DATA_ROOT_ENV):
        return Path(os.environ[DATA_ROOT_ENV])
    if data_root is not None:
        return Path(data_root)
    return Path(__file__).resolve().parents[2] / "data"


def read_manifest(data_root: Path) -> dict:
    path = data_root / "manifest.json"
    if path.exists():
        return json.loads(path.read_text())
    return DEFAULT_MANIFEST


def load_corpus(name: str, data_root: str | Path | None = None) -> tuple[ImageDataset, ImageDataset]:
    """Load the (train, test) pair named ``name`` in the data-root manifest."""
    root = resolve_data_root(data_root)
    manifest = read_manifest(root)
    if name not in manifest:
        raise KeyError(f"corpus {name!r} not listed in the manifest under {root}")
    entry = {k: root / v for k, v in manifest[name].items()}
    missing = [str(p) for p in entry.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing data files for {name!r}: {', '.join(missing)}")
    train = preprocess(load_idx(entry["train_images"]).data, load_idx(entry["train_labels"]).data,
                       "train", name)
    test = preprocess(load_idx(entry["test_images"]).data, load_idx(entry["test_labels"]).data,
                      "test", name)
    return train, test
