"""Datasets, batching and the on-disk formats.

TensorFile layout (little-endian)::

    b"AATN" | u32 rank | u32 dims[rank] | f64 payload (row-major)

Checkpoint layout::

    b"AATC" | u32 count | count * (u32 name_len | name utf-8 | TensorFile) | u64 FNV-1a

The trailing FNV-1a 64-bit hash covers every byte before it.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

TENSOR_MAGIC = b"AATN"
CHECKPOINT_MAGIC = b"AATC"
MAX_RANK = 32
MAX_ELEMENTS = 1 << 37

MEAN_RADIUS = 0.35


class FormatError(ValueError):
    """Structured decode failure. ``code`` is one of the class constants."""

    BAD_MAGIC = "bad magic"
    TRUNCATED = "truncated"
    DIM_OVERFLOW = "dim overflow"
    BAD_RANK = "bad rank"
    TRAILING = "trailing data"
    CHECKSUM = "checksum mismatch"
    DUPLICATE = "duplicate name"
    MISSING = "missing entry"
    BAD_NAME = "bad name"
    BAD_IDX = "bad idx"

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


# -- datasets -----------------------------------------------------------------

@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (N, dim) and labels (N,)")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.features.size and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.features[:n], self.labels[:n], self.num_classes, self.split)


def class_means(K: int, dim: int) -> np.ndarray:
    """K means at radius 0.35 around the 0.5-vector.

    dim == 2 places them evenly on the circle. Higher dims use K fixed
    pseudo-random directions on the sphere, drawn from a stream keyed by
    (K, dim) only, so train and test splits generated with different seeds
    share the same means.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if dim == 2:
        angles = 2.0 * np.pi * np.arange(K) / K
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([0x6D65616E, K, dim]))
        dirs = rng.normal(size=(K, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return 0.5 + MEAN_RADIUS * dirs


def gen_blobs(K: int, dim: int, n_per_class: int, spread: float, seed: int,
              split: str = "train") -> Dataset:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if not spread > 0:
        raise ValueError(f"spread must be > 0, got {spread}")
    rng = np.random.default_rng(seed)
    means = class_means(K, dim)
    labels = np.repeat(np.arange(K), n_per_class)
    noise = rng.normal(0.0, spread, size=(K * n_per_class, dim))
    features = np.clip(means[labels] + noise, 0.0, 1.0)
    perm = rng.permutation(len(labels))
    return Dataset(features[perm], labels[perm], K, split)


def batches(dataset: Dataset, batch_size: int,
            shuffle_seed=None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Partition rows into consecutive batches; the last may be short.

    ``shuffle_seed`` may be an int or a SeedSequence; None keeps file order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    out = []
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        out.append((dataset.features[idx], dataset.labels[idx]))
    return out


# -- TensorFile -----------------------------------------------------------------

def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one TensorFile body at ``offset``; returns (array, end offset)."""
    end = len(buf)
    if end - offset < 4:
        raise FormatError(FormatError.TRUNCATED, "missing tensor magic")
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(FormatError.BAD_MAGIC, f"expected {TENSOR_MAGIC!r}")
    offset += 4
    if end - offset < 4:
        raise FormatError(FormatError.TRUNCATED, "missing rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > MAX_RANK:
        raise FormatError(FormatError.BAD_RANK, f"rank {rank} exceeds {MAX_RANK}")
    if end - offset < 4 * rank:
        raise FormatError(FormatError.TRUNCATED, "missing dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise FormatError(FormatError.DIM_OVERFLOW, f"dims {dims} describe {count} elements")
    nbytes = 8 * count
    if end - offset < nbytes:
        raise FormatError(FormatError.TRUNCATED, f"payload needs {nbytes} bytes, {end - offset} left")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return arr.reshape(dims), offset + nbytes


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(FormatError.TRAILING, f"{len(buf) - end} bytes after tensor")
    return arr


# -- Checkpoint -----------------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def encode_checkpoint(entries: Dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if len(buf) < 4:
        raise FormatError(FormatError.TRUNCATED, "missing checkpoint magic")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(FormatError.BAD_MAGIC, f"expected {CHECKPOINT_MAGIC!r}")
    if len(buf) < 16:
        raise FormatError(FormatError.TRUNCATED, "checkpoint shorter than header + checksum")
    body, tail = buf[:-8], buf[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if fnv1a64(body) != stored:
        raise FormatError(FormatError.CHECKSUM, "checkpoint bytes do not match trailing FNV-1a")
    (count,) = struct.unpack_from("<I", body, 4)
    offset = 8
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(body) - offset < 4:
            raise FormatError(FormatError.TRUNCATED, "missing entry name length")
        (n,) = struct.unpack_from("<I", body, offset)
        offset += 4
        if len(body) - offset < n:
            raise FormatError(FormatError.TRUNCATED, "entry name runs past end")
        try:
            name = body[offset:offset + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(FormatError.BAD_NAME, "entry name is not utf-8") from None
        offset += n
        if name in out:
            raise FormatError(FormatError.DUPLICATE, name)
        out[name], offset = decode_tensor(body, offset)
    if offset != len(body):
        raise FormatError(FormatError.TRAILING, f"{len(body) - offset} bytes before checksum")
    return out


def classifier_entries(classifier) -> Dict[str, np.ndarray]:
    entries = {name: p.data for name, p in classifier.parameters().items()}
    entries["meta.layer_dims"] = np.asarray(classifier.backbone.layer_dims, dtype=np.float64)
    entries["meta.margin"] = np.asarray([classifier.margin.s, classifier.margin.m])
    return entries


def save_checkpoint(classifier, path) -> None:
    Path(path).write_bytes(encode_checkpoint(classifier_entries(classifier)))


def load_checkpoint(path, classifier=None):
    """Read a checkpoint.

    With ``classifier`` given, its parameters are overwritten in place and
    every expected name must be present. Without it, a classifier is rebuilt
    from the stored shapes.
    """
    from .autodiff import Tensor
    from .hypersphere import MarginConfig
    from .models import build_classifier

    entries = decode_checkpoint(Path(path).read_bytes())
    if classifier is not None:
        params = classifier.parameters()
        missing = sorted(set(params) - set(entries))
        if missing:
            raise FormatError(FormatError.MISSING,
                              f"missing {missing}; expected names {sorted(params)}")
        for name, p in params.items():
            if entries[name].shape != p.shape:
                raise FormatError(FormatError.MISSING, f"{name} has shape {entries[name].shape}, expected {p.shape}")
            p.data[...] = entries[name]
        return classifier

    required = ["meta.layer_dims", "meta.margin", "head.weight"]
    missing = [r for r in required if r not in entries]
    if missing:
        raise FormatError(FormatError.MISSING, f"missing {missing}")
    dims = [int(d) for d in entries["meta.layer_dims"]]
    expected = [f"backbone.{i}.{k}" for i in range(len(dims) - 1) for k in ("weight", "bias")]
    missing = [e for e in expected if e not in entries]
    if missing:
        raise FormatError(FormatError.MISSING, f"missing {missing}; expected names {expected}")
    s, m = (float(v) for v in entries["meta.margin"])
    head_kind = "plain" if "head.bias" in entries else "he"
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in entries.items() if not k.startswith("meta.")}
    try:
        return build_classifier(dims, head_kind, params, MarginConfig(s, m))
    except (ValueError, KeyError) as exc:
        raise FormatError(FormatError.MISSING, f"inconsistent checkpoint: {exc}") from None


# -- dataset files ----------------------------------------------------------------

def dataset_paths(prefix) -> Tuple[Path, Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".features.aatn"), Path(prefix + ".labels.aatn"), Path(prefix + ".manifest")


def save_dataset(dataset: Dataset, prefix, meta: Optional[Dict[str, object]] = None) -> List[Path]:
    fpath, lpath, mpath = dataset_paths(prefix)
    save_tensor(fpath, dataset.features)
    save_tensor(lpath, dataset.labels.astype(np.float64))
    info = {"split": dataset.split, "n": len(dataset), "dim": dataset.input_dim,
            "k": dataset.num_classes}
    info.update(meta or {})
    info["features_sha256"] = hashlib.sha256(fpath.read_bytes()).hexdigest()
    info["labels_sha256"] = hashlib.sha256(lpath.read_bytes()).hexdigest()
    mpath.write_text("".join(f"{k} = {v}\n" for k, v in info.items()))
    return [fpath, lpath, mpath]


def read_manifest(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(prefix) -> Dataset:
    fpath, lpath, mpath = dataset_paths(prefix)
    features = load_tensor(fpath)
    labels = load_tensor(lpath)
    if mpath.exists():
        k = int(read_manifest(mpath).get("k", int(labels.max()) + 1))
        split = read_manifest(mpath).get("split", "train")
    else:
        k, split = int(labels.max()) + 1, "train"
    if features.ndim != 2:
        features = features.reshape(len(features), -1)
    return Dataset(features, labels.astype(np.int64), k, split)


# -- IDX ----------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (optionally gzip-compressed)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise FormatError(FormatError.TRUNCATED, "idx header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08 or magic & 0xFF == 0:
        raise FormatError(FormatError.BAD_MAGIC, f"unsupported idx magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(FormatError.TRUNCATED, "idx dims")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    start = 4 + 4 * ndim
    if len(raw) - start < count:
        raise FormatError(FormatError.TRUNCATED, "idx payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=start).reshape(dims)


def load_idx_dataset(images_path, labels_path, split: str = "train",
                     num_classes: Optional[int] = None) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise FormatError(FormatError.BAD_IDX, f"images {images.shape} vs labels {labels.shape}")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels.astype(np.int64), k, split)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
