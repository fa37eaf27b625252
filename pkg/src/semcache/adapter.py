"""Trainable linear adapter on top of frozen provider embeddings.

The adapter maps a provider embedding ``e`` to ``normalize(W @ e)``. It is
trained with two objectives that work on cosine similarity of adapted
vectors:

* a contrastive loss over labeled pairs that pulls duplicates together and
  pushes non-duplicates at least ``margin`` apart in cosine distance, and
* a multiple-negatives ranking (MNR) loss over duplicate pairs that treats the
  other positives in a batch as negatives.

Both losses return the loss value and its exact gradient with respect to
``W``; training is plain mini-batch SGD.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import EmbeddingProvider, embed, normalize
from .errors import BatchTooSmall, DimensionMismatch, EmptyBatch, InsufficientData

logger = logging.getLogger(__name__)


@dataclass
class AdapterModel:
    in_dim: int
    out_dim: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.out_dim, self.in_dim):
            raise DimensionMismatch(
                f"weights shape {self.weights.shape} != ({self.out_dim}, {self.in_dim})"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("adapter weights must be finite")

    @classmethod
    def identity(cls, in_dim: int, out_dim: int | None = None) -> "AdapterModel":
        out_dim = in_dim if out_dim is None else out_dim
        return cls(in_dim, out_dim, np.eye(out_dim, in_dim))

    def flat(self) -> np.ndarray:
        """Row-major weight vector, the transport format for federated rounds."""
        return self.weights.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat, in_dim: int, out_dim: int) -> "AdapterModel":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != in_dim * out_dim:
            raise DimensionMismatch(f"{flat.size} weights cannot form a {out_dim}x{in_dim} matrix")
        return cls(in_dim, out_dim, flat.reshape(out_dim, in_dim).copy())

    def copy(self) -> "AdapterModel":
        return AdapterModel(self.in_dim, self.out_dim, self.weights.copy())


@dataclass(frozen=True)
class TrainingHyperparams:
    epochs: int = 6
    batch_size: int = 128
    learning_rate: float = 1e-3
    margin: float = 0.5
    mnr_scale: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0 or self.mnr_scale <= 0:
            raise ValueError("learning_rate and mnr_scale must be positive")
        if not 0 < self.margin <= 2:
            raise ValueError("margin must lie in (0, 2]")


@dataclass(frozen=True)
class LabeledPair:
    q1: str
    q2: str
    duplicate: bool

    def __post_init__(self):
        if not self.q1.strip() or not self.q2.strip():
            raise ValueError("labeled pair queries must be non-empty")


def load_pairs(path: str | Path) -> list[LabeledPair]:
    """Read ``{"q1", "q2", "duplicate"}`` objects, one per line."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                pairs.append(LabeledPair(str(obj["q1"]), str(obj["q2"]), bool(obj["duplicate"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad pair record ({exc})") from exc
    return pairs


def save_pairs(pairs: Iterable[LabeledPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"q1": p.q1, "q2": p.q2, "duplicate": p.duplicate}) + "\n")


def save_adapter(model: AdapterModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, weights=model.weights)


def load_adapter(path: str | Path) -> AdapterModel:
    with np.load(path) as data:
        w = data["weights"]
    return AdapterModel(w.shape[1], w.shape[0], w)


def apply_adapter(model: AdapterModel, e) -> np.ndarray:
    e64 = np.asarray(e, dtype=np.float64)
    if e64.shape != (model.in_dim,):
        raise DimensionMismatch(f"expected a {model.in_dim}-dim vector, got {e64.shape}")
    return normalize(model.weights @ e64)


def _forward(W: np.ndarray, X: np.ndarray):
    Z = X @ W.T
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("adapter maps an input to the zero vector")
    return Z / norms, norms


def _backward(gY: np.ndarray, Y: np.ndarray, norms: np.ndarray, X: np.ndarray) -> np.ndarray:
    # Jacobian of z -> z/|z| applied to the upstream gradient, then dZ/dW.
    gZ = (gY - np.sum(gY * Y, axis=1, keepdims=True) * Y) / norms
    return gZ.T @ X


def _stack(model: AdapterModel, vectors: Sequence) -> np.ndarray:
    X = np.asarray(np.stack([np.asarray(v, dtype=np.float64) for v in vectors]))
    if X.shape[1] != model.in_dim:
        raise DimensionMismatch(f"batch vectors have dim {X.shape[1]}, adapter expects {model.in_dim}")
    return X


def contrastive_loss(model: AdapterModel, batch: Sequence, margin: float = 0.5):
    """Mean contrastive loss on cosine distance and its gradient w.r.t. the weights.

    ``batch`` holds ``(u, v, duplicate)`` triples. With ``d = 1 - cos(Wu, Wv)``
    each pair contributes ``d**2`` if duplicate, else ``max(0, margin - d)**2``.
    """
    if not batch:
        raise EmptyBatch("contrastive batch is empty")
    U = _stack(model, [b[0] for b in batch])
    V = _stack(model, [b[1] for b in batch])
    y = np.array([1.0 if b[2] else 0.0 for b in batch])
    n = len(batch)

    Yu, nu = _forward(model.weights, U)
    Yv, nv = _forward(model.weights, V)
    cos = np.sum(Yu * Yv, axis=1)
    d = 1.0 - cos
    hinge = np.maximum(0.0, margin - d)
    loss = float(np.mean(y * d**2 + (1.0 - y) * hinge**2))

    dcos = (-2.0 * y * d + 2.0 * (1.0 - y) * hinge) / n
    grad = _backward(dcos[:, None] * Yv, Yu, nu, U) + _backward(dcos[:, None] * Yu, Yv, nv, V)
    return loss, grad


def mnr_loss(model: AdapterModel, batch: Sequence, scale: float = 20.0):
    """Multiple-negatives ranking loss and its gradient w.r.t. the weights.

    ``batch`` holds ``(anchor, positive)`` pairs; row ``i`` is scored against
    every positive in the batch with ``scale * cos`` and the loss is the mean
    cross-entropy of picking its own positive.
    """
    if not batch:
        raise EmptyBatch("MNR batch is empty")
    if len(batch) < 2:
        raise BatchTooSmall("MNR needs at least two pairs for in-batch negatives")
    A = _stack(model, [b[0] for b in batch])
    P = _stack(model, [b[1] for b in batch])
    n = len(batch)

    Ya, na = _forward(model.weights, A)
    Yp, np_ = _forward(model.weights, P)
    S = scale * (Ya @ Yp.T)
    smax = S.max(axis=1, keepdims=True)
    expS = np.exp(S - smax)
    lse = smax[:, 0] + np.log(expS.sum(axis=1))
    loss = float(np.mean(lse - np.diag(S)))

    G = (expS / expS.sum(axis=1, keepdims=True) - np.eye(n)) / n
    grad = _backward(scale * (G @ Yp), Ya, na, A) + _backward(scale * (G.T @ Ya), Yp, np_, P)
    return loss, grad


def _batches(indices: np.ndarray, size: int) -> list[np.ndarray]:
    return [indices[i : i + size] for i in range(0, len(indices), size)]


def train_local(
    model: AdapterModel,
    pairs: Sequence[LabeledPair],
    provider: EmbeddingProvider,
    hp: TrainingHyperparams = TrainingHyperparams(),
):
    """Run ``hp.epochs`` epochs of SGD alternating contrastive and MNR batches.

    Every pair feeds the contrastive batches; duplicate pairs also feed the MNR
    batches. Batches are taken strictly round-robin (contrastive, MNR, ...)
    until both queues are drained. Returns a new model plus the final epoch's
    mean losses; the input model is not modified.
    """
    if not pairs:
        raise InsufficientData("local training needs at least one labeled pair")
    trained = model.copy()
    metrics = {"contrastive_loss": None, "mnr_loss": None, "steps": 0}
    if hp.epochs == 0:
        return trained, metrics

    memo: dict[str, np.ndarray] = {}

    def vec(text: str) -> np.ndarray:
        if text not in memo:
            memo[text] = embed(provider, text).astype(np.float64)
        return memo[text]

    left = [vec(p.q1) for p in pairs]
    right = [vec(p.q2) for p in pairs]
    labels = [p.duplicate for p in pairs]
    dup_idx = np.array([i for i, p in enumerate(pairs) if p.duplicate], dtype=np.int64)

    rng = np.random.default_rng(hp.seed)
    for _ in range(hp.epochs):
        c_batches = _batches(rng.permutation(len(pairs)), hp.batch_size)
        m_batches = _batches(rng.permutation(dup_idx), hp.batch_size) if dup_idx.size else []
        m_batches = [b for b in m_batches if len(b) >= 2]
        c_losses, m_losses = [], []
        for step in range(max(len(c_batches), len(m_batches))):
            if step < len(c_batches):
                b = c_batches[step]
                loss, grad = contrastive_loss(
                    trained, [(left[i], right[i], labels[i]) for i in b], hp.margin
                )
                trained.weights -= hp.learning_rate * grad
                c_losses.append(loss)
                metrics["steps"] += 1
            if step < len(m_batches):
                b = m_batches[step]
                loss, grad = mnr_loss(trained, [(left[i], right[i]) for i in b], hp.mnr_scale)
                trained.weights -= hp.learning_rate * grad
                m_losses.append(loss)
                metrics["steps"] += 1
        metrics["contrastive_loss"] = float(np.mean(c_losses)) if c_losses else None
        metrics["mnr_loss"] = float(np.mean(m_losses)) if m_losses else None
    if not np.all(np.isfinite(trained.weights)):
        raise FloatingPointError("adapter weights diverged during training")
    return trained, metrics


def score_pairs(
    pairs: Sequence[LabeledPair],
    provider: EmbeddingProvider,
    model: AdapterModel | None = None,
) -> list[tuple[float, bool]]:
    """Cosine similarity of each pair through provider (+ adapter)."""
    texts = sorted({p.q1 for p in pairs} | {p.q2 for p in pairs})
    if not texts:
        return []
    X = np.stack([embed(provider, t).astype(np.float64) for t in texts])
    if model is not None:
        X, _ = _forward(model.weights, X)
    index = {t: i for i, t in enumerate(texts)}
    out = []
    for p in pairs:
        a, b = X[index[p.q1]], X[index[p.q2]]
        sim = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        out.append((min(1.0, max(-1.0, sim)), p.duplicate))
    return out
