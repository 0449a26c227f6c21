"""Embedding and label containers, their binary formats, and the static eval set.

File formats (all little-endian):

* ``EMB1``: magic, u32 n, u32 d, then n*d f64 values row-major.  Rows must be
  unit-norm within 1e-6.
* ``RAW1``: identical layout to ``EMB1`` without the unit-norm requirement;
  used for raw dataset features.
* ``LBL1``: magic, u32 n, then n u32 labels.

Manifests are flat UTF-8 ``key = value`` text files.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from repspace import synthetic
from repspace.numerics import l2_normalize

NORM_TOL = 1e-6


class FormatError(ValueError):
    """Base class for malformed embedding or label files."""


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class NormViolationError(FormatError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 2:
            raise ValueError(f"embedding matrix must be n x d with n >= 1, d >= 2; got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("embedding contains non-finite values")
        bad = np.flatnonzero(np.abs(np.linalg.norm(v, axis=1) - 1.0) > NORM_TOL)
        if bad.size:
            raise NormViolationError(f"row {bad[0]} is not unit-norm")
        object.__setattr__(self, "vectors", v)

    @classmethod
    def from_raw(cls, x: np.ndarray) -> EmbeddingMatrix:
        return cls(l2_normalize(np.asarray(x, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        return isinstance(other, EmbeddingMatrix) and np.array_equal(self.vectors, other.vectors)


@dataclass(frozen=True, eq=False)
class LabelVector:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1 or lab.size == 0:
            raise ValueError("labels must be a non-empty 1-d array")
        if not np.issubdtype(lab.dtype, np.integer) or lab.min() < 0:
            raise ValueError("labels must be non-negative integers")
        object.__setattr__(self, "labels", lab.astype(np.int64))

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVector) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class PairSet:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.int64)
        b = np.asarray(self.b, dtype=np.int64)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("pair index arrays must be 1-d and equal length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def __len__(self) -> int:
        return self.a.size

    def check(self, n: int) -> None:
        if self.a.size and (min(self.a.min(), self.b.min()) < 0 or max(self.a.max(), self.b.max()) >= n):
            raise IndexError(f"pair index out of range for {n} rows")

    @classmethod
    def from_list(cls, pairs) -> PairSet:
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])


# --- binary formats -----------------------------------------------------------

def _write_matrix(magic: bytes, x: np.ndarray, path) -> None:
    n, d = x.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", n, d))
        f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def _read_matrix(magic: bytes, path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise MagicError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedError(f"{path}: header truncated")
    n, d = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != 8 * n * d:
        raise TruncatedError(f"{path}: expected {8 * n * d} payload bytes, found {len(body)}")
    x = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{path}: non-finite value")
    return x


def write_embeddings(m: EmbeddingMatrix, path) -> None:
    _write_matrix(b"EMB1", m.vectors, path)


def read_embeddings(path) -> EmbeddingMatrix:
    return EmbeddingMatrix(_read_matrix(b"EMB1", path))


def write_raw(x: np.ndarray, path) -> None:
    _write_matrix(b"RAW1", np.asarray(x, dtype=np.float64), path)


def read_raw(path) -> np.ndarray:
    return _read_matrix(b"RAW1", path)


def write_labels(labels: LabelVector, path) -> None:
    with open(path, "wb") as f:
        f.write(b"LBL1")
        f.write(struct.pack("<I", labels.n))
        f.write(np.ascontiguousarray(labels.labels, dtype="<u4").tobytes())


def read_labels(path) -> LabelVector:
    data = Path(path).read_bytes()
    if data[:4] != b"LBL1":
        raise MagicError(f"{path}: expected magic b'LBL1', found {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedError(f"{path}: header truncated")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) - 8 != 4 * n:
        raise TruncatedError(f"{path}: expected {4 * n} payload bytes, found {len(data) - 8}")
    return LabelVector(np.frombuffer(data[8:], dtype="<u4").astype(np.int64))


def write_embeddings_csv(m: EmbeddingMatrix, path) -> None:
    np.savetxt(path, m.vectors, delimiter=",", fmt="%.17g")


def read_embeddings_csv(path) -> EmbeddingMatrix:
    return EmbeddingMatrix(np.loadtxt(path, delimiter=",", ndmin=2))


# --- manifests ----------------------------------------------------------------

def write_manifest(entries: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_manifest(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


# --- eval set -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EvalSet:
    anchors: np.ndarray  # (n, D) clean inputs
    view1: np.ndarray
    view2: np.ndarray
    labels: np.ndarray
    seed: int
    aug_id: str

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return (isinstance(other, EvalSet) and self.seed == other.seed and self.aug_id == other.aug_id
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("anchors", "view1", "view2", "labels")))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("anchors", "view1", "view2"):
            write_raw(getattr(self, name), directory / f"{name}.raw")
        write_labels(LabelVector(self.labels), directory / "labels.lbl")
        write_manifest({"seed": self.seed, "aug_id": self.aug_id, "n": len(self),
                        "anchors": "anchors.raw", "view1": "view1.raw", "view2": "view2.raw",
                        "labels": "labels.lbl"}, directory / "evalset.manifest")

    @classmethod
    def load(cls, directory) -> EvalSet:
        directory = Path(directory)
        man = read_manifest(directory / "evalset.manifest")
        return cls(read_raw(directory / man["anchors"]), read_raw(directory / man["view1"]),
                   read_raw(directory / man["view2"]), read_labels(directory / man["labels"]).labels,
                   int(man["seed"]), man["aug_id"])


def build_eval_set(dataset: synthetic.Dataset, aug: synthetic.AugSpec, seed: int,
                   samples_per_class: int = 50) -> EvalSet:
    """Class-balanced anchors, each with two augmented views, fixed by ``seed``."""
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE7A1]))
    picks = []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < samples_per_class:
            raise ValueError(f"class {c} has {members.size} samples, need {samples_per_class}")
        picks.append(np.sort(rng.choice(members, size=samples_per_class, replace=False)))
    idx = np.concatenate(picks)
    anchors = dataset.features[idx]
    v1, v2 = synthetic.positive_pairs(anchors, aug, rng, dataset.layout)
    return EvalSet(anchors, v1, v2, dataset.labels[idx].copy(), int(seed), synthetic.aug_id(aug))


@dataclass(frozen=True)
class EmbeddedEvalSet:
    anchors: EmbeddingMatrix
    view1: EmbeddingMatrix
    view2: EmbeddingMatrix
    labels: LabelVector

    def positive_pairs(self) -> PairSet:
        """Row ``i`` of ``view1`` paired with row ``i`` of ``view2`` after stacking."""
        n = self.view1.n
        return PairSet(np.arange(n), np.arange(n, 2 * n))

    def stacked_views(self) -> EmbeddingMatrix:
        return EmbeddingMatrix(np.vstack([self.view1.vectors, self.view2.vectors]))


def embed_eval_set(embed: Callable[[np.ndarray], np.ndarray], eval_set: EvalSet) -> EmbeddedEvalSet:
    """Embed anchors and views with ``embed`` (eval mode), normalizing every row."""
    return EmbeddedEvalSet(
        EmbeddingMatrix.from_raw(embed(eval_set.anchors)),
        EmbeddingMatrix.from_raw(embed(eval_set.view1)),
        EmbeddingMatrix.from_raw(embed(eval_set.view2)),
        LabelVector(eval_set.labels),
    )


def write_csv_rows(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
