"""Datasets and the C-way k-shot episodic sampler.

Datasets are class-major collections of fixed-length vectors with a
class-level split into meta-train / meta-val / meta-test. Two sources:
a synthetic Gaussian-blob generator, and the FSDS binary container for
real (image-derived) data.

FSDS layout, little-endian: magic "FSDS"; u32 version=1; u32 num_classes;
u32 per_class; u32 height; u32 width; u32 channels; then
num_classes*per_class*height*width*channels u8 pixel bytes, class-major
then example-major. A sidecar JSON file at <path>.json may carry
{"splits": [tag per class]}; without it classes split 70/10/20 by index.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, FormatError

SPLITS = ("meta-train", "meta-val", "meta-test")

_FSDS_MAGIC = b"FSDS"
_FSDS_VERSION = 1
_FSDS_HEADER = struct.Struct("<4sIIIIII")


def default_splits(num_classes: int) -> list:
    """Class-index split: first 70% meta-train, next 10% meta-val, rest meta-test."""
    n_train = int(num_classes * 0.7)
    n_val = int(num_classes * 0.1)
    tags = ["meta-train"] * n_train + ["meta-val"] * n_val
    tags += ["meta-test"] * (num_classes - len(tags))
    return tags


@dataclass
class Dataset:
    """Vectors grouped by class: data of shape (num_classes, per_class, dim)."""

    data: np.ndarray
    splits: list
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"dataset data must be (classes, per_class, dim), got {self.data.shape}")
        if len(self.splits) != self.data.shape[0]:
            raise ContractError(
                f"split tags ({len(self.splits)}) do not match class count ({self.data.shape[0]})"
            )
        bad = sorted({s for s in self.splits if s not in SPLITS})
        if bad:
            raise ContractError(f"unknown split tag(s) {bad}; expected one of {SPLITS}")

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def per_class(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def class_ids(self, split: str) -> list:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [c for c, tag in enumerate(self.splits) if tag == split]


@dataclass
class Episode:
    """One C-way k-shot task: disjoint labeled support and query sets.

    Labels are episode-local in {0..C-1}, assigned by class sampling order;
    class_map[label] gives the originating dataset class. The *_index arrays
    carry (dataset class, example index) provenance for every row.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: list
    support_index: np.ndarray = field(repr=False, default=None)
    query_index: np.ndarray = field(repr=False, default=None)

    @property
    def num_ways(self) -> int:
        return len(self.class_map)


def generate_synthetic_dataset(
    num_classes: int = 100,
    per_class: int = 40,
    input_dim: int = 16,
    class_spread: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian class blobs: means ~ N(0, spread^2 I), examples ~ N(mean, noise^2 I).

    class_spread may be zero (all classes coincide); noise must stay
    positive. Deterministic for a given seed.
    """
    if num_classes < 1 or per_class < 1 or input_dim < 1:
        raise ConfigError(
            f"synthetic dataset sizes must be positive, got {num_classes}/{per_class}/{input_dim}"
        )
    if class_spread < 0.0:
        raise ConfigError(f"class_spread must be non-negative, got {class_spread}")
    if noise <= 0.0:
        raise ConfigError(f"noise must be positive, got {noise}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_spread, size=(num_classes, input_dim))
    data = means[:, None, :] + rng.normal(0.0, noise, size=(num_classes, per_class, input_dim))
    return Dataset(data=data, splits=default_splits(num_classes))


def _sidecar_path(path: str) -> str:
    return path + ".json"


def write_dataset(dataset: Dataset, path: str):
    """Write a dataset to the FSDS container.

    Values must lie in [0, 1]; they are quantized to u8 via round(v * 255),
    so the round trip is exact only for values that are multiples of 1/255
    (always the case for FSDS-loaded data). Datasets without an image shape
    are stored as (1, dim, 1) images. A sidecar split file is written only
    when the splits differ from the index default.
    """
    if dataset.data.min() < 0.0 or dataset.data.max() > 1.0:
        raise ContractError("write_dataset: values must lie in [0, 1]")
    shape = dataset.image_shape or (1, dataset.dim, 1)
    h, w, c = shape
    if h * w * c != dataset.dim:
        raise ContractError(f"image shape {shape} does not factor dim {dataset.dim}")
    header = _FSDS_HEADER.pack(
        _FSDS_MAGIC, _FSDS_VERSION, dataset.num_classes, dataset.per_class, h, w, c
    )
    payload = np.clip(np.round(dataset.data * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    sidecar = _sidecar_path(path)
    if dataset.splits != default_splits(dataset.num_classes):
        with open(sidecar, "w") as fh:
            json.dump({"splits": dataset.splits}, fh, indent=2)
            fh.write("\n")
    elif os.path.exists(sidecar):
        os.remove(sidecar)


def load_dataset(path: str) -> Dataset:
    """Read an FSDS file; pixels are flattened to vectors scaled into [0, 1]."""
    if not os.path.exists(path):
        raise FormatError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FSDS_HEADER.size:
        raise FormatError(
            f"{path}: truncated header, {len(raw)} bytes < {_FSDS_HEADER.size} (offset {len(raw)})"
        )
    magic, version, num_classes, per_class, h, w, c = _FSDS_HEADER.unpack_from(raw, 0)
    if magic != _FSDS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != _FSDS_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if min(num_classes, per_class, h, w, c) < 1:
        raise FormatError(
            f"{path}: zero dimension in header (classes={num_classes}, per_class={per_class}, "
            f"h={h}, w={w}, c={c})"
        )
    expected = num_classes * per_class * h * w * c
    actual = len(raw) - _FSDS_HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: expected {expected} payload bytes, found {actual} (offset {_FSDS_HEADER.size})"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=_FSDS_HEADER.size)
    data = pixels.reshape(num_classes, per_class, h * w * c).astype(np.float64) / 255.0

    splits = None
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        try:
            with open(sidecar) as fh:
                splits = json.load(fh)["splits"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"{sidecar}: malformed split sidecar: {e}") from e
        if len(splits) != num_classes or any(s not in SPLITS for s in splits):
            raise FormatError(f"{sidecar}: split list must give one of {SPLITS} per class")
    return Dataset(
        data=data,
        splits=list(splits) if splits else default_splits(num_classes),
        image_shape=(h, w, c),
    )


def sample_episode(
    dataset: Dataset,
    split: str,
    num_ways: int,
    num_shots: int,
    num_queries: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode: C distinct classes, then k+M distinct examples each.

    The first k examples per class form the support set, the next M the
    query set, so the two are disjoint by construction. Episode-local labels
    follow the class sampling order.
    """
    if min(num_ways, num_shots, num_queries) < 1:
        raise ContractError(
            f"episode shape must be positive, got ways={num_ways}, shots={num_shots}, queries={num_queries}"
        )
    ids = dataset.class_ids(split)
    if len(ids) < num_ways:
        raise ContractError(
            f"split {split!r} has {len(ids)} classes but the episode needs {num_ways}"
        )
    needed = num_shots + num_queries
    if dataset.per_class < needed:
        raise ContractError(
            f"classes hold {dataset.per_class} examples but the episode needs {needed}"
        )
    chosen = rng.choice(np.asarray(ids), size=num_ways, replace=False)

    sup_x, sup_y, sup_idx = [], [], []
    qry_x, qry_y, qry_idx = [], [], []
    for local, class_id in enumerate(chosen):
        picks = rng.choice(dataset.per_class, size=needed, replace=False)
        for j in picks[:num_shots]:
            sup_x.append(dataset.data[class_id, j])
            sup_y.append(local)
            sup_idx.append((class_id, j))
        for j in picks[num_shots:]:
            qry_x.append(dataset.data[class_id, j])
            qry_y.append(local)
            qry_idx.append((class_id, j))
    return Episode(
        support_x=np.asarray(sup_x),
        support_y=np.asarray(sup_y, dtype=np.int64),
        query_x=np.asarray(qry_x),
        query_y=np.asarray(qry_y, dtype=np.int64),
        class_map=[int(c) for c in chosen],
        support_index=np.asarray(sup_idx, dtype=np.int64),
        query_index=np.asarray(qry_idx, dtype=np.int64),
    )
