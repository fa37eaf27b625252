"""Embedding providers and the vector primitives every other module builds on.

Embeddings are plain ``numpy`` arrays. At rest they are ``float32``; every
similarity is accumulated in ``float64`` so results are reproducible across
platforms.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyQuery, ProviderFailure, ZeroVector

logger = logging.getLogger(__name__)

DEFAULT_DIM = 768
ZERO_NORM = 1e-12
# A vector this close to unit length is treated as already normalized.
_UNIT_SLACK = 1e-6

# canonical token -> interchangeable surface forms. The stub provider folds
# every variant back to its canonical token before hashing, so a synonym
# rewrite of a query embeds exactly like the original.
SYNONYMS: dict[str, tuple[str, ...]] = {
    "draw": ("sketch", "plot", "render"),
    "change": ("modify", "alter", "switch"),
    "color": ("colour", "hue", "tint"),
    "red": ("crimson", "scarlet"),
    "blue": ("azure", "navy"),
    "green": ("emerald", "lime"),
    "line": ("stroke",),
    "circle": ("ring",),
    "square": ("box",),
    "make": ("create", "build", "construct"),
    "big": ("large", "huge"),
    "small": ("little", "tiny"),
    "thick": ("wide", "heavy"),
    "fast": ("quick", "rapid", "speedy"),
    "slow": ("sluggish",),
    "car": ("automobile", "vehicle"),
    "phone": ("smartphone", "mobile", "cellphone"),
    "increase": ("boost", "raise", "extend"),
    "decrease": ("reduce", "lower", "shrink"),
    "life": ("lifetime", "duration", "lifespan"),
    "tips": ("advice", "suggestions", "pointers"),
    "explain": ("describe", "clarify", "elaborate"),
    "write": ("compose", "author", "draft"),
    "function": ("method", "routine", "procedure"),
    "list": ("array", "sequence"),
    "sort": ("order", "arrange", "rank"),
    "remove": ("delete", "erase", "drop"),
    "file": ("document",),
    "error": ("bug", "fault", "defect"),
    "fix": ("repair", "resolve", "correct"),
    "picture": ("image", "photo", "photograph"),
    "buy": ("purchase", "acquire"),
    "cheap": ("inexpensive", "affordable", "budget"),
    "help": ("assist", "aid", "support"),
    "start": ("begin", "launch", "initiate"),
    "stop": ("halt", "terminate", "cease"),
    "show": ("display", "present", "reveal"),
    "find": ("locate", "discover", "detect"),
    "get": ("obtain", "fetch", "retrieve"),
    "use": ("utilize", "employ", "apply"),
    "learn": ("study", "master"),
    "job": ("occupation", "career", "profession"),
    "house": ("home", "residence", "dwelling"),
    "money": ("cash", "funds", "savings"),
    "doctor": ("physician", "clinician"),
    "happy": ("glad", "joyful", "cheerful"),
    "answer": ("reply", "response"),
    "idea": ("concept", "notion"),
    "improve": ("enhance", "optimize", "refine"),
    "check": ("verify", "validate", "inspect"),
    "convert": ("transform", "translate"),
    "combine": ("merge", "join", "concatenate"),
    "split": ("divide", "separate"),
    "count": ("tally", "enumerate"),
    "read": ("load", "parse"),
    "save": ("store", "persist"),
    "send": ("transmit", "dispatch"),
    "plan": ("schedule", "itinerary"),
    "trip": ("journey", "voyage", "vacation"),
    "food": ("meal", "cuisine"),
    "healthy": ("nutritious", "wholesome"),
    "exercise": ("workout", "training"),
    "sleep": ("rest", "slumber"),
    "book": ("novel",),
    "movie": ("film",),
    "song": ("track", "tune"),
    "teach": ("instruct", "educate"),
    "child": ("kid", "youngster"),
    "garden": ("yard",),
    "grow": ("cultivate", "nurture"),
    "clean": ("wash", "scrub"),
    "cook": ("prepare", "bake"),
}

SYNONYM_REWRITE: dict[str, str] = {
    variant: canonical for canonical, variants in SYNONYMS.items() for variant in variants
}

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class EmbeddingProviderDescriptor:
    name: str
    output_dim: int
    deterministic: bool


class EmbeddingProvider(Protocol):
    descriptor: EmbeddingProviderDescriptor

    def embed_text(self, text: str) -> np.ndarray:
        """Return a raw (not necessarily normalized) vector for ``text``."""
        ...


def tokenize(text: str, rewrite: Mapping[str, str] | None = SYNONYM_REWRITE) -> list[str]:
    """Lowercase, split on non-alphanumerics and fold synonyms to canonical tokens."""
    tokens = _TOKEN_RE.findall(text.lower())
    if rewrite:
        tokens = [rewrite.get(t, t) for t in tokens]
    return tokens


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


class StubProvider:
    """Deterministic bag-of-tokens provider with signed feature hashing.

    Each token is hashed to 64 bits; the low bits pick a bucket and the top bit
    picks the sign. Counts are accumulated and the result is L2-normalized, so
    the output depends only on the multiset of (synonym-folded) tokens.
    """

    def __init__(self, dim: int = DEFAULT_DIM, rewrite: Mapping[str, str] | None = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.rewrite = SYNONYM_REWRITE if rewrite is None else rewrite
        self.descriptor = EmbeddingProviderDescriptor("stub", dim, True)
        self._memo: dict[str, np.ndarray] = {}

    @property
    def output_dim(self) -> int:
        return self.descriptor.output_dim

    def embed_text(self, text: str) -> np.ndarray:
        cached = self._memo.get(text)
        if cached is not None:
            return cached.copy()
        dim = self.descriptor.output_dim
        tokens = tokenize(text, self.rewrite)
        if not tokens:
            # punctuation-only input: hash the whole string as one token
            tokens = [text.strip()]
        acc = np.zeros(dim, dtype=np.float64)
        for tok in tokens:
            h = _token_hash(tok)
            acc[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
        if not acc.any():
            # every token cancelled; fall back to the sorted token string
            h = _token_hash(" ".join(sorted(tokens)))
            acc[h % dim] = 1.0
        vec = normalize(acc)
        if len(self._memo) < 100_000:
            self._memo[text] = vec
        return vec.copy()


class RemoteProvider:
    """Embedding provider backed by an HTTP service.

    POSTs ``{"input": text}`` to ``url`` and expects ``{"embedding": [...]}``.
    """

    def __init__(self, url: str, dim: int, timeout: float = 10.0, client=None):
        import httpx

        self.url = url
        self.descriptor = EmbeddingProviderDescriptor("remote", dim, False)
        self._client = client or httpx.Client(timeout=timeout)

    @property
    def output_dim(self) -> int:
        return self.descriptor.output_dim

    def embed_text(self, text: str) -> np.ndarray:
        import httpx

        try:
            resp = self._client.post(self.url, json={"input": text})
            resp.raise_for_status()
            values = resp.json()["embedding"]
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise ProviderFailure(f"remote embedding failed: {exc}") from exc
        return np.asarray(values, dtype=np.float64)


def make_provider(cfg: Mapping | None = None) -> EmbeddingProvider:
    """Build a provider from the ``embedding`` config section."""
    cfg = dict(cfg or {})
    kind = cfg.get("provider", "stub")
    dim = int(cfg.get("dim", DEFAULT_DIM))
    if kind == "stub":
        return StubProvider(dim)
    if kind == "remote":
        if "url" not in cfg:
            raise ValueError("embedding.url is required for the remote provider")
        return RemoteProvider(cfg["url"], dim)
    raise ValueError(f"unknown embedding provider {kind!r}")


def normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, returned as float32.

    Vectors already within 1e-6 of unit length are returned unchanged, which
    makes the operation idempotent bit-for-bit.
    """
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    v64 = arr.astype(np.float64)
    if not np.all(np.isfinite(v64)):
        raise ValueError("vector has non-finite components")
    norm = float(np.sqrt(np.dot(v64, v64)))
    if norm < ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    if abs(norm - 1.0) <= _UNIT_SLACK:
        return arr.astype(np.float32)
    return (v64 / norm).astype(np.float32)


def embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    if not isinstance(text, str) or not text.strip():
        raise EmptyQuery("query text is empty")
    raw = np.asarray(provider.embed_text(text))
    dim = provider.descriptor.output_dim
    if raw.shape != (dim,):
        raise ProviderFailure(f"provider returned shape {raw.shape}, expected ({dim},)")
    if not np.all(np.isfinite(raw)):
        raise ProviderFailure("provider returned non-finite values")
    return normalize(raw)


def cosine_similarity(a, b) -> float:
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.shape != b64.shape or a64.ndim != 1:
        raise DimensionMismatch(f"shapes {a64.shape} and {b64.shape} differ")
    na = np.sqrt(np.dot(a64, a64))
    nb = np.sqrt(np.dot(b64, b64))
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    sim = float(np.dot(a64, b64) / (na * nb))
    return min(1.0, max(-1.0, sim))


def similarity_or_zero(a, b) -> float:
    """Cosine similarity where a zero vector (compressed-zero) scores 0."""
    try:
        return cosine_similarity(a, b)
    except ZeroVector:
        return 0.0


def embed_many(provider: EmbeddingProvider, texts: Sequence[str]) -> np.ndarray:
    if not texts:
        return np.zeros((0, provider.descriptor.output_dim), dtype=np.float32)
    return np.stack([embed(provider, t) for t in texts])
