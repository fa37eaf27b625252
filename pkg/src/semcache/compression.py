"""PCA compression of embeddings.

The model is fit once on a corpus of query embeddings and then applied as a
fixed projection layer: ``normalize(components @ (e - mean))``. Projections that
land on the origin become the *compressed-zero* vector (all zeros), which the
cache scores as similarity 0 against everything.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .embedding import ZERO_NORM, normalize
from .errors import (
    CorruptFile,
    DegenerateData,
    DimensionMismatch,
    KTooLarge,
    TooFewSamples,
    VersionUnsupported,
)

MPCA_MAGIC = b"MPCA"
MPCA_VERSION = 1
DEFAULT_K = 64
_HEADER = struct.Struct("<4sHII")


@dataclass
class PcaModel:
    in_dim: int
    k: int
    mean: np.ndarray = field(repr=False)
    components: np.ndarray = field(repr=False)
    explained_variance: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        self.explained_variance = np.asarray(self.explained_variance, dtype=np.float64)
        if self.mean.shape != (self.in_dim,) or self.components.shape != (self.k, self.in_dim):
            raise DimensionMismatch("PCA arrays do not match in_dim/k")
        if self.explained_variance.shape != (self.k,):
            raise DimensionMismatch("explained_variance must have k entries")

    def quantized(self) -> "PcaModel":
        """Copy whose arrays hold exactly the float32 values written to disk."""
        q = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
        return PcaModel(self.in_dim, self.k, q(self.mean), q(self.components), q(self.explained_variance))

    def __eq__(self, other):
        if not isinstance(other, PcaModel):
            return NotImplemented
        return (
            self.in_dim == other.in_dim
            and self.k == other.k
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.components, other.components)
            and np.array_equal(self.explained_variance, other.explained_variance)
        )

    def to_bytes(self) -> bytes:
        return (
            _HEADER.pack(MPCA_MAGIC, MPCA_VERSION, self.in_dim, self.k)
            + self.mean.astype("<f4").tobytes()
            + self.components.astype("<f4").tobytes()
            + self.explained_variance.astype("<f4").tobytes()
        )

    @classmethod
    def read_from(cls, fh: BinaryIO) -> "PcaModel":
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CorruptFile("truncated MPCA header")
        magic, version, in_dim, k = _HEADER.unpack(head)
        if magic != MPCA_MAGIC:
            raise CorruptFile(f"bad MPCA magic {magic!r}")
        if version != MPCA_VERSION:
            raise VersionUnsupported(f"MPCA version {version} is not supported")
        if k == 0 or in_dim == 0 or k > in_dim:
            raise CorruptFile(f"invalid MPCA dims in_dim={in_dim} k={k}")
        n_floats = in_dim + k * in_dim + k
        body = fh.read(4 * n_floats)
        if len(body) != 4 * n_floats:
            raise CorruptFile("truncated MPCA body")
        flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
        mean = flat[:in_dim]
        comps = flat[in_dim : in_dim + k * in_dim].reshape(k, in_dim)
        ev = flat[in_dim + k * in_dim :]
        return cls(in_dim, k, mean, comps, ev)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PcaModel":
        import io

        buf = io.BytesIO(data)
        model = cls.read_from(buf)
        if buf.read(1):
            raise CorruptFile("trailing bytes after MPCA block")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "PcaModel":
        return cls.from_bytes(Path(path).read_bytes())


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # Make the largest-magnitude coordinate of each row positive; argmax picks
    # the lowest index among ties.
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def fit_pca(samples: Sequence, k: int = DEFAULT_K) -> PcaModel:
    if k < 1:
        raise KTooLarge("k must be at least 1")
    if len(samples) < 2:
        raise TooFewSamples("PCA needs at least two samples")
    X = np.asarray(np.stack([np.asarray(s, dtype=np.float64) for s in samples]))
    n, d = X.shape
    if k > d:
        raise KTooLarge(f"k={k} exceeds the input dimension {d}")
    if n < k:
        raise TooFewSamples(f"{n} samples cannot support k={k} components")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    if not np.any(np.abs(cov) > 0):
        raise DegenerateData("sample covariance is identically zero")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")[:k]
    components = _fix_signs(eigvecs[:, order].T)
    variance = np.clip(eigvals[order], 0.0, None)
    return PcaModel(d, k, mean, components, variance)


def project_raw(model: PcaModel, e) -> np.ndarray:
    """Centered projection before normalization (float64)."""
    e64 = np.asarray(e, dtype=np.float64)
    if e64.shape != (model.in_dim,):
        raise DimensionMismatch(f"expected a {model.in_dim}-dim vector, got {e64.shape}")
    return model.components @ (e64 - model.mean)


def project(model: PcaModel, e) -> np.ndarray:
    z = project_raw(model, e)
    if np.linalg.norm(z) < ZERO_NORM:
        return np.zeros(model.k, dtype=np.float32)
    return normalize(z)


def is_compressed_zero(v) -> bool:
    return not np.any(np.asarray(v))


def reconstruct(model: PcaModel, z) -> np.ndarray:
    """Map an unnormalized projection back to the input space."""
    return model.mean + model.components.T @ np.asarray(z, dtype=np.float64)


def payload_bytes(dim: int) -> int:
    """Bytes of one stored embedding at 32-bit precision."""
    return 4 * dim
