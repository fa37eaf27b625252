"""Semantic cache engine: lookup with context-chain verification, population,
feedback and persistence.

Entries form a forest through ``parent_id`` links. A follow-up query is stored
with a link to the entry for the previous turn of its conversation, and a hit
is only served when the candidate's ancestor chain matches the incoming
conversation history turn by turn.

Cache file layout (all little-endian)::

    "MCCH" | version u16 | flags u16 (bit0: PCA) | dim u32 | count u64
    [MPCA block]
    tau f32 | f_beta f32 | beta f32
    count x (id u64 | parent u64 | created_at u64 |
             query_len u32 | query utf-8 | response_len u32 | response utf-8 |
             dim x f32)
    crc32 u32 over everything before it
"""

from __future__ import annotations

import io
import logging
import os
import struct
import tempfile
import threading
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .adapter import AdapterModel, LabeledPair, apply_adapter
from .compression import PcaModel, project
from .embedding import ZERO_NORM, EmbeddingProvider, embed, similarity_or_zero
from .errors import (
    CorruptFile,
    DimensionMismatch,
    EmptyQuery,
    EmptyResponse,
    IoFailure,
    UnknownEntry,
    VersionUnsupported,
)
from .threshold import DEFAULT_GRID_STEP, ThresholdProfile, snap, tune

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"MCCH"
CACHE_VERSION = 1
FLAG_PCA = 0x1
_HEADER = struct.Struct("<4sHHIQ")
_PROFILE = struct.Struct("<fff")
_ENTRY_HEAD = struct.Struct("<QQQ")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class CacheEntry:
    id: int
    query_text: str
    response_text: str
    embedding: np.ndarray = field(repr=False, compare=False)
    parent_id: int = 0
    created_at: int = 0

    @property
    def context_only(self) -> bool:
        """Auxiliary entry holding a conversation turn that has no cached answer."""
        return self.response_text == ""

    def __eq__(self, other):
        if not isinstance(other, CacheEntry):
            return NotImplemented
        return (
            (self.id, self.query_text, self.response_text, self.parent_id, self.created_at)
            == (other.id, other.query_text, other.response_text, other.parent_id, other.created_at)
            and self.embedding.dtype == other.embedding.dtype
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


@dataclass(frozen=True)
class LookupConfig:
    tau: float = 0.83
    top_k: int = 5
    context_depth: Optional[int] = None
    # Switch off only to measure what context verification buys.
    verify_context: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.context_depth is not None and self.context_depth < 1:
            raise ValueError("context_depth must be positive or None (unlimited)")


@dataclass(frozen=True)
class LookupOutcome:
    kind: str
    entry: Optional[CacheEntry] = None
    similarity: Optional[float] = None
    candidates_examined: int = 0

    @property
    def hit(self) -> bool:
        return self.kind == "hit"


def _vectors(items: Sequence, encode: Callable | None) -> list[np.ndarray]:
    out = []
    for it in items:
        if isinstance(it, str):
            if encode is None:
                raise TypeError("text chains need an encoder")
            it = encode(it)
        out.append(np.asarray(it))
    return out


def match_context(
    cached_chain: Sequence,
    history: Sequence,
    tau: float,
    context_depth: int | None = None,
    encode: Callable | None = None,
) -> bool:
    """True iff both chains (newest first) agree turn by turn.

    Both are truncated to ``context_depth``; they must then have equal length
    and every aligned pair must have cosine similarity >= ``tau``. Items may be
    texts (embedded with ``encode``) or vectors.
    """
    if context_depth is not None:
        cached_chain = list(cached_chain)[:context_depth]
        history = list(history)[:context_depth]
    if len(cached_chain) != len(history):
        return False
    a = _vectors(cached_chain, encode)
    b = _vectors(history, encode)
    return all(similarity_or_zero(x, y) >= tau for x, y in zip(a, b))


def _profile_through_disk(p: ThresholdProfile) -> ThresholdProfile:
    """The profile exactly as it reads back from a cache file."""
    tau32, f32, beta32 = _PROFILE.unpack(_PROFILE.pack(p.tau, p.f_beta_at_tau, p.beta))
    snapped = snap(tau32, DEFAULT_GRID_STEP)
    tau = snapped if abs(snapped - tau32) < 1e-6 else tau32
    return ThresholdProfile(
        tau=min(1.0, max(0.0, tau)),
        beta=beta32,
        f_beta_at_tau=min(1.0, max(0.0, f32)),
        grid_step=DEFAULT_GRID_STEP,
    )


@dataclass
class _View:
    # Published atomically so readers never see a half-written entry.
    count: int
    ids: np.ndarray
    matrix: np.ndarray
    norms: np.ndarray
    servable: np.ndarray


class SemanticCache:
    """User-side semantic cache.

    Queries are encoded as provider embedding -> optional adapter -> optional
    PCA projection. Candidate search is an exact linear scan.

    Args:
        provider: embedding provider; may be None for read-only inspection.
        adapter: optional trained adapter applied to provider output.
        pca: optional PCA model; stored embeddings are then compressed.
        profile: threshold profile; its tau seeds the default lookup config.
        lookup: default lookup config (tau overridden by ``profile`` if given).
        capacity: optional limit on servable entries, evicted LRU.
        clock: returns unix milliseconds; injectable for tests.
    """

    def __init__(
        self,
        provider: EmbeddingProvider | None,
        adapter: AdapterModel | None = None,
        pca: PcaModel | None = None,
        profile: ThresholdProfile | None = None,
        lookup: LookupConfig | None = None,
        capacity: int | None = None,
        clock: Callable[[], int] | None = None,
        dim: int | None = None,
    ):
        self.provider = provider
        self.adapter = adapter
        self.pca = pca.quantized() if pca is not None else None
        self.capacity = capacity
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.RLock()
        self._entries: dict[int, CacheEntry] = {}
        self._by_text: dict[str, list[int]] = {}
        self._children: dict[int, int] = {}
        self._next_id = 1
        self._served: dict[int, str] = {}
        self._recency: dict[int, int] = {}
        self._tick = 0
        self.feedback_log: list[LabeledPair] = []

        self.dim = dim if dim is not None else self._pipeline_dim()
        self._matrix = np.zeros((16, self.dim), dtype=np.float64)
        self._ids = np.zeros(16, dtype=np.int64)
        self._norms = np.zeros(16, dtype=np.float64)
        self._servable = np.zeros(16, dtype=bool)
        self._count = 0
        self._publish()

        self.lookup_config = lookup or LookupConfig()
        self.profile = profile if profile is not None else ThresholdProfile(tau=self.lookup_config.tau)

    # ------------------------------------------------------------------ setup

    def _pipeline_dim(self) -> int:
        if self.pca is not None:
            if self.adapter is not None and self.adapter.out_dim != self.pca.in_dim:
                raise DimensionMismatch("adapter output does not match PCA input")
            return self.pca.k
        if self.adapter is not None:
            return self.adapter.out_dim
        if self.provider is None:
            raise ValueError("cannot infer the cache dimension without a provider")
        return self.provider.descriptor.output_dim

    @property
    def profile(self) -> ThresholdProfile:
        return self._profile

    @profile.setter
    def profile(self, p: ThresholdProfile) -> None:
        self._profile = _profile_through_disk(p)
        self.lookup_config = replace(self.lookup_config, tau=self._profile.tau)

    def encode(self, text: str) -> np.ndarray:
        """Full embedding pipeline for one text (float32, unit or compressed-zero)."""
        if self.provider is None:
            raise RuntimeError("this cache was opened without an embedding provider")
        v = embed(self.provider, text)
        if self.adapter is not None:
            v = apply_adapter(self.adapter, v)
        if self.pca is not None:
            v = project(self.pca, v)
        return v

    # ------------------------------------------------------------- accessors

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[CacheEntry]:
        return iter(sorted(self._entries.values(), key=lambda e: e.id))

    def __contains__(self, entry_id: int) -> bool:
        return entry_id in self._entries

    def get(self, entry_id: int) -> CacheEntry:
        try:
            return self._entries[entry_id]
        except KeyError:
            raise UnknownEntry(f"no cache entry with id {entry_id}") from None

    def entries(self) -> list[CacheEntry]:
        return list(self)

    @property
    def servable_count(self) -> int:
        return sum(1 for e in self._entries.values() if not e.context_only)

    def ancestors(self, entry_id: int) -> list[CacheEntry]:
        """Parent chain of an entry, newest first."""
        chain = []
        pid = self.get(entry_id).parent_id
        while pid:
            parent = self._entries[pid]
            chain.append(parent)
            pid = parent.parent_id
        return chain

    # ---------------------------------------------------------------- lookup

    def lookup(self, query: str, history: Sequence[str] = (), cfg: LookupConfig | None = None) -> LookupOutcome:
        """Find a cached answer for ``query`` asked after ``history`` (oldest first).

        Returns the highest-similarity candidate among the ``top_k`` entries
        scoring at least ``tau`` whose context chain matches the history;
        equal similarities prefer the lower id.
        """
        if not isinstance(query, str) or not query.strip():
            raise EmptyQuery("query text is empty")
        cfg = cfg or self.lookup_config
        q = self.encode(query).astype(np.float64)
        view = self._view
        if view.count == 0:
            return LookupOutcome("miss")
        # full cosine (not a bare dot product): stored float32 rows are only unit-norm to ~1e-7
        n = view.count
        qn = np.sqrt(np.dot(q, q))
        denom = view.norms[:n] * qn
        sims = np.zeros(n)
        ok = denom >= ZERO_NORM
        sims[ok] = (view.matrix[:n][ok] @ q) / denom[ok]
        np.clip(sims, -1.0, 1.0, out=sims)
        sims[~view.servable[: view.count]] = -np.inf
        rows = np.flatnonzero(sims >= cfg.tau)
        if rows.size == 0:
            return LookupOutcome("miss")
        rows = rows[np.argsort(-sims[rows], kind="stable")][: cfg.top_k]

        hist_vecs: list[np.ndarray] | None = None
        examined = 0
        for row in rows:
            examined += 1
            entry = self._entries.get(int(view.ids[row]))
            if entry is None:  # evicted after the view was taken
                continue
            if cfg.verify_context:
                if hist_vecs is None:
                    hist_vecs = [self.encode(h) for h in reversed(list(history))]
                chain = [a.embedding for a in self.ancestors(entry.id)]
                if not match_context(chain, hist_vecs, cfg.tau, cfg.context_depth):
                    continue
            sim = min(1.0, float(sims[row]))
            assert sim >= cfg.tau
            self._served[entry.id] = query
            self._touch(entry.id)
            return LookupOutcome("hit", entry, sim, examined)
        return LookupOutcome("miss", candidates_examined=examined)

    def match_context(self, cached_chain: Sequence[str], history: Sequence[str], tau: float | None = None,
                      context_depth: int | None = None) -> bool:
        """Text form of :func:`match_context` using this cache's encoder."""
        tau = self.lookup_config.tau if tau is None else tau
        return match_context(cached_chain, history, tau, context_depth, self.encode)

    # ---------------------------------------------------------------- insert

    def insert(
        self,
        query: str,
        response: str,
        history: Sequence[str] = (),
        precomputed_embedding=None,
        parent_id: int | None = None,
    ) -> int:
        """Store a query/response; returns the new entry id.

        ``history`` lists the earlier queries of the conversation, oldest
        first. The parent is the existing entry whose own chain reproduces the
        history exactly; missing turns are inserted as context-only entries.
        An explicit ``parent_id`` bypasses history resolution.
        """
        if not isinstance(query, str) or not query.strip():
            raise EmptyQuery("query text is empty")
        if not isinstance(response, str) or not response:
            raise EmptyResponse("response text is empty")
        vec = self._prepare_vector(query, precomputed_embedding)
        with self._lock:
            if parent_id is None:
                parent_id = self._resolve_history(list(history))
            elif parent_id and parent_id not in self._entries:
                raise UnknownEntry(f"parent {parent_id} does not exist")
            new_id = self._add(query, response, vec, parent_id)
            self._evict_if_needed()
            return new_id

    def _prepare_vector(self, text: str, given=None) -> np.ndarray:
        if given is None:
            return self.encode(text)
        v = np.asarray(given, dtype=np.float32)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"embedding has shape {v.shape}, cache dim is {self.dim}")
        return v

    def _find_child(self, text: str, parent: int) -> int:
        for eid in reversed(self._by_text.get(text, ())):
            if self._entries[eid].parent_id == parent:
                return eid
        return 0

    def _resolve_history(self, history: list[str]) -> int:
        parent = 0
        for turn in history:
            if not turn.strip():
                raise EmptyQuery("history contains an empty turn")
            found = self._find_child(turn, parent)
            if not found:
                found = self._add(turn, "", self.encode(turn), parent)
            parent = found
        return parent

    def _add(self, query: str, response: str, vec: np.ndarray, parent_id: int) -> int:
        entry = CacheEntry(self._next_id, query, response, vec.astype(np.float32), parent_id, int(self._clock()))
        self._store(entry)
        self._touch(entry.id)
        return entry.id

    def _store(self, entry: CacheEntry) -> None:
        if entry.embedding.shape != (self.dim,):
            raise DimensionMismatch(f"entry {entry.id} has dim {entry.embedding.shape}, cache dim is {self.dim}")
        if entry.parent_id and (entry.parent_id >= entry.id or entry.parent_id not in self._entries):
            raise CorruptFile(f"entry {entry.id} has invalid parent {entry.parent_id}")
        if self._count == len(self._ids):
            grow = max(16, len(self._ids))
            self._matrix = np.vstack([self._matrix, np.zeros((grow, self.dim))])
            self._ids = np.concatenate([self._ids, np.zeros(grow, dtype=np.int64)])
            self._norms = np.concatenate([self._norms, np.zeros(grow)])
            self._servable = np.concatenate([self._servable, np.zeros(grow, dtype=bool)])
        row = self._count
        self._matrix[row] = entry.embedding.astype(np.float64)
        self._norms[row] = np.sqrt(np.dot(self._matrix[row], self._matrix[row]))
        self._ids[row] = entry.id
        self._servable[row] = not entry.context_only
        self._entries[entry.id] = entry
        self._by_text.setdefault(entry.query_text, []).append(entry.id)
        if entry.parent_id:
            self._children[entry.parent_id] = self._children.get(entry.parent_id, 0) + 1
        self._count += 1
        self._next_id = max(self._next_id, entry.id + 1)
        self._publish()

    def _publish(self) -> None:
        self._view = _View(self._count, self._ids, self._matrix, self._norms, self._servable)

    def _rebuild(self) -> None:
        entries = sorted(self._entries.values(), key=lambda e: e.id)
        n = len(entries)
        cap = max(16, n)
        matrix = np.zeros((cap, self.dim))
        ids = np.zeros(cap, dtype=np.int64)
        servable = np.zeros(cap, dtype=bool)
        norms = np.zeros(cap)
        for row, e in enumerate(entries):
            matrix[row] = e.embedding
            norms[row] = np.sqrt(np.dot(matrix[row], matrix[row]))
            ids[row] = e.id
            servable[row] = not e.context_only
        self._matrix, self._ids, self._norms, self._servable, self._count = matrix, ids, norms, servable, n
        self._by_text = {}
        self._children = {}
        for e in entries:
            self._by_text.setdefault(e.query_text, []).append(e.id)
            if e.parent_id:
                self._children[e.parent_id] = self._children.get(e.parent_id, 0) + 1
        self._publish()

    # -------------------------------------------------------------- eviction

    def _touch(self, entry_id: int) -> None:
        self._tick += 1
        self._recency[entry_id] = self._tick

    def _evict_if_needed(self) -> None:
        if self.capacity is None:
            return
        changed = False
        while self.servable_count > self.capacity:
            servable = [e for e in self._entries.values() if not e.context_only]
            victim = min(servable, key=lambda e: (self._recency.get(e.id, 0), e.id))
            if self._children.get(victim.id):
                # still needed as context for its follow-ups: keep the turn, drop the answer
                self._entries[victim.id] = replace(victim, response_text="")
            else:
                self._remove_with_orphans(victim.id)
            changed = True
        if changed:
            self._rebuild()

    def _remove_with_orphans(self, entry_id: int) -> None:
        while entry_id:
            entry = self._entries.pop(entry_id)
            self._recency.pop(entry_id, None)
            self._served.pop(entry_id, None)
            parent = entry.parent_id
            if not parent:
                return
            self._children[parent] -= 1
            if self._children[parent] or not self._entries[parent].context_only:
                return
            entry_id = parent

    def compact(self) -> int:
        """Drop context-only entries no follow-up depends on; returns count removed."""
        with self._lock:
            before = len(self._entries)
            while True:
                orphans = [e.id for e in self._entries.values()
                           if e.context_only and not self._children.get(e.id)]
                if not orphans:
                    break
                for eid in orphans:
                    if eid in self._entries:
                        self._remove_with_orphans(eid)
                self._rebuild()
            return before - len(self._entries)

    # -------------------------------------------------------------- feedback

    def record_feedback(self, entry_id: int, judgment: str) -> LabeledPair:
        """Log whether the answer last served from ``entry_id`` was right.

        ``judgment`` is ``"accepted"`` or ``"rejected"``; the resulting labeled
        pair (served query, cached query) feeds the next :meth:`retune`.
        """
        if judgment not in ("accepted", "rejected"):
            raise ValueError("judgment must be 'accepted' or 'rejected'")
        with self._lock:
            entry = self.get(entry_id)
            served = self._served.get(entry_id)
            if served is None:
                raise UnknownEntry(f"entry {entry_id} has not been served by a lookup")
            pair = LabeledPair(served, entry.query_text, judgment == "accepted")
            self.feedback_log.append(pair)
            return pair

    def score(self, pairs: Sequence[LabeledPair]) -> list[tuple[float, bool]]:
        return [(similarity_or_zero(self.encode(p.q1), self.encode(p.q2)), p.duplicate) for p in pairs]

    def retune(self, pairs: Sequence[LabeledPair] = (), beta: float | None = None,
               grid_step: float | None = None) -> ThresholdProfile:
        """Re-fit tau on ``pairs`` plus the feedback log and install it."""
        scored = self.score(list(pairs) + self.feedback_log)
        prof = tune(scored, beta or self.profile.beta, grid_step or DEFAULT_GRID_STEP)
        with self._lock:
            self.profile = prof
        return self.profile

    # ----------------------------------------------------------- persistence

    def to_bytes(self) -> bytes:
        with self._lock:
            entries = list(self)
            buf = io.BytesIO()
            flags = FLAG_PCA if self.pca is not None else 0
            buf.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, flags, self.dim, len(entries)))
            if self.pca is not None:
                buf.write(self.pca.to_bytes())
            p = self.profile
            buf.write(_PROFILE.pack(p.tau, p.f_beta_at_tau, p.beta))
            for e in entries:
                q = e.query_text.encode("utf-8")
                r = e.response_text.encode("utf-8")
                buf.write(_ENTRY_HEAD.pack(e.id, e.parent_id, e.created_at))
                buf.write(_U32.pack(len(q)) + q)
                buf.write(_U32.pack(len(r)) + r)
                buf.write(e.embedding.astype("<f4").tobytes())
            body = buf.getvalue()
        return body + _U32.pack(zlib.crc32(body))

    def save(self, path: str | Path) -> None:
        """Write atomically (temp file + rename) so a crash never leaves half a file."""
        data = self.to_bytes()
        path = Path(path)
        try:
            fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"cannot write cache file {path}: {exc}") from exc

    @classmethod
    def from_bytes(cls, data: bytes, provider: EmbeddingProvider | None = None,
                   adapter: AdapterModel | None = None, **kwargs) -> "SemanticCache":
        if len(data) < 4 or data[:4] != CACHE_MAGIC:
            raise CorruptFile("not a cache file (bad magic)")
        if len(data) < _HEADER.size + _PROFILE.size + 4:
            raise CorruptFile("cache file is truncated")
        body, (crc,) = data[:-4], _U32.unpack(data[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptFile("checksum mismatch")
        buf = io.BytesIO(body)
        _, version, flags, dim, count = _HEADER.unpack(buf.read(_HEADER.size))
        if version != CACHE_VERSION:
            raise VersionUnsupported(f"cache file version {version} is not supported")
        pca = PcaModel.read_from(buf) if flags & FLAG_PCA else None
        if pca is not None and pca.k != dim:
            raise CorruptFile("PCA output dimension disagrees with the cache dimension")
        raw = buf.read(_PROFILE.size)
        if len(raw) != _PROFILE.size:
            raise CorruptFile("truncated threshold profile")
        tau, f_beta, beta = _PROFILE.unpack(raw)
        try:
            profile = ThresholdProfile(tau, beta, f_beta)
        except ValueError as exc:
            raise CorruptFile(f"invalid threshold profile: {exc}") from exc

        def take(n: int) -> bytes:
            chunk = buf.read(n)
            if len(chunk) != n:
                raise CorruptFile("cache file is truncated")
            return chunk

        entries = []
        for _ in range(count):
            eid, parent, created = _ENTRY_HEAD.unpack(take(_ENTRY_HEAD.size))
            try:
                q = take(_U32.unpack(take(4))[0]).decode("utf-8")
                r = take(_U32.unpack(take(4))[0]).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptFile(f"entry {eid} has invalid UTF-8") from exc
            vec = np.frombuffer(take(4 * dim), dtype="<f4").astype(np.float32)
            entries.append(CacheEntry(eid, q, r, vec, parent, created))
        if buf.read(1):
            raise CorruptFile("unexpected bytes after the last entry")

        cache = cls(provider, adapter=adapter, pca=pca, profile=profile, dim=dim, **kwargs)
        if provider is not None and cache._pipeline_dim() != dim:
            raise DimensionMismatch(f"file dim {dim} does not match the embedding pipeline")
        last = 0
        for e in entries:
            if e.id <= last:
                raise CorruptFile("entry ids are not strictly increasing")
            last = e.id
            cache._store(e)
            cache._touch(e.id)
        return cache

    @classmethod
    def load(cls, path: str | Path, provider: EmbeddingProvider | None = None,
             adapter: AdapterModel | None = None, **kwargs) -> "SemanticCache":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read cache file {path}: {exc}") from exc
        return cls.from_bytes(data, provider, adapter, **kwargs)

    def state(self) -> tuple:
        """Comparable snapshot of everything the file format persists."""
        return (self.dim, self.pca, self.profile, self.entries())
