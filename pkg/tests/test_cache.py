import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semcache import synthetic
from semcache.adapter import AdapterModel, LabeledPair
from semcache.cache import CacheEntry, LookupConfig, SemanticCache, match_context
from semcache.compression import fit_pca
from semcache.embedding import StubProvider, embed
from semcache.errors import (
    CorruptFile,
    DimensionMismatch,
    EmptyQuery,
    EmptyResponse,
    UnknownEntry,
    VersionUnsupported,
)
from semcache.threshold import ThresholdProfile
from support import TableProvider

Q1, Q2, Q3, Q4 = (synthetic.BACKGROUND_Q1, synthetic.BACKGROUND_Q2,
                  synthetic.BACKGROUND_Q3, synthetic.BACKGROUND_Q4)


@pytest.fixture
def cache():
    ticks = iter(range(1000, 10**6))
    return SemanticCache(StubProvider(), clock=lambda: next(ticks))


def test_empty_cache_misses(cache):
    assert not cache.lookup("anything").hit


def test_self_match(cache):
    cache.insert(Q1, "use matplotlib")
    out = cache.lookup(Q1)
    assert out.hit and abs(out.similarity - 1.0) < 1e-6
    assert out.entry.response_text == "use matplotlib"


def test_ids_and_parent_links(cache):
    assert cache.insert(Q1, "r1") == 1
    assert cache.insert(Q2, "r2", history=[Q1]) == 2
    assert cache.get(2).parent_id == 1


def test_insert_validation(cache):
    with pytest.raises(EmptyQuery):
        cache.insert("  ", "r")
    with pytest.raises(EmptyResponse):
        cache.insert("q", "")
    with pytest.raises(DimensionMismatch):
        cache.insert("q", "r", precomputed_embedding=np.ones(3))
    with pytest.raises(UnknownEntry):
        cache.insert("q", "r", parent_id=99)


def test_background_scenario(cache):
    cache.insert(Q1, "r1")
    cache.insert(Q2, "r2", history=[Q1])
    assert cache.lookup(Q1).hit
    assert not cache.lookup(Q4, history=[Q3]).hit
    out = cache.lookup(Q2, history=[Q1])
    assert out.hit and out.entry.id == 2
    # a standalone repeat of the follow-up must not match the contextual entry
    assert not cache.lookup(Q2).hit


def test_verification_switch_exposes_false_hit(cache):
    cache.insert(Q1, "r1")
    cache.insert(Q2, "r2", history=[Q1])
    off = LookupConfig(verify_context=False)
    assert cache.lookup(Q4, history=[Q3], cfg=off).hit


def test_uncached_history_becomes_context_only(cache):
    new_id = cache.insert("make it thicker", "ok", history=[Q1, Q2])
    chain = cache.ancestors(new_id)
    assert [e.query_text for e in chain] == [Q2, Q1]
    assert all(e.context_only for e in chain)
    # context-only entries are never served
    assert not cache.lookup(Q1).hit
    assert cache.lookup("make it thicker", [Q1, Q2]).hit
    # the existing chain is reused for the next follow-up
    other = cache.insert("now explain the output", "ok", history=[Q1, Q2])
    assert cache.get(other).parent_id == chain[0].id
    assert cache.servable_count == 2


def test_match_context_examples(cache):
    enc = cache.encode
    assert match_context([], [], 0.83)
    assert not match_context([], [Q1], 0.83, encode=enc)
    assert match_context([Q1], [Q1], 1.0 - 1e-6, encode=enc)
    assert cache.match_context([Q1], [Q1])
    assert not cache.match_context([Q1], [Q3])


def test_match_context_depth():
    a, b, c = np.eye(3)
    assert not match_context([a, b], [a, c], 0.9)
    assert match_context([a, b], [a, c], 0.9, context_depth=1)
    assert not match_context([a], [a, b], 0.9)
    assert match_context([a], [a, b], 0.9, context_depth=1)


@pytest.mark.parametrize("tau", [0.0, 0.5, 0.83, 0.9, 1.0 - 1e-6])
def test_insert_then_lookup_hits_at_any_tau(cache, tau):
    cache.insert("Change the color to red", "done", history=[Q1])
    out = cache.lookup("Change the color to red", [Q1], LookupConfig(tau=tau))
    assert out.hit and out.entry.response_text == "done"


def test_equal_similarity_prefers_lower_id(cache):
    cache.insert("same words here", "first")
    cache.insert("here words same", "second")
    assert cache.lookup("words here same").entry.response_text == "first"


def _random_cache(rng):
    n_texts = int(rng.integers(3, 9))
    dim = 4
    centers = rng.normal(size=(3, dim))
    table = {f"t{i}": centers[rng.integers(3)] + 0.3 * rng.normal(size=dim) for i in range(n_texts)}
    texts = list(table)
    cache = SemanticCache(TableProvider(table))
    for _ in range(int(rng.integers(0, 10))):
        hist = [texts[j] for j in rng.integers(n_texts, size=int(rng.integers(0, 3)))]
        cache.insert(texts[rng.integers(n_texts)], f"r{rng.integers(100)}", history=hist)
    return cache, texts


@pytest.mark.parametrize("block", range(10))
def test_lookup_matches_brute_force_oracle(block):
    rng = np.random.default_rng(block)
    for _ in range(100):
        cache, texts = _random_cache(rng)
        query = texts[rng.integers(len(texts))]
        history = [texts[j] for j in rng.integers(len(texts), size=int(rng.integers(0, 3)))]
        cfg = LookupConfig(tau=float(rng.uniform(0.3, 1.0)), top_k=int(rng.integers(1, 6)))
        out = cache.lookup(query, history, cfg)
        rows = [{"id": e.id, "parent": e.parent_id, "vec": e.embedding, "servable": not e.context_only}
                for e in cache.entries()]
        hist_vecs = [cache.encode(h) for h in reversed(history)]
        expected = oracles.lookup(rows, cache.encode(query), hist_vecs, cfg.tau, cfg.top_k)
        assert (out.entry.id if out.hit else None) == expected
        if out.hit:
            assert out.similarity >= cfg.tau


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_raising_tau_never_creates_a_hit(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    cache, texts = _random_cache(np.random.default_rng(seed))
    for q in texts:
        if cache.lookup(q, (), LookupConfig(tau=hi)).hit:
            assert cache.lookup(q, (), LookupConfig(tau=lo)).hit


def test_lookup_does_not_mutate_entries(cache):
    cache.insert(Q1, "r1")
    before = cache.state()
    cache.lookup(Q1)
    cache.lookup("unrelated text")
    assert cache.state() == before


def _three_entry_cache(pca=False):
    provider = StubProvider(32)
    model = None
    if pca:
        texts = synthetic.make_queries(40, seed=1)
        model = fit_pca([embed(provider, t) for t in texts], k=8)
    c = SemanticCache(provider, pca=model, profile=ThresholdProfile(0.81, 0.5, 0.9))
    c.insert(Q1, "r1 ünïcode")
    c.insert(Q2, "r2", history=[Q1])
    c.insert("make it thicker", "r3", history=[Q3])
    return c


@pytest.mark.parametrize("pca", [False, True])
def test_persistence_round_trip(tmp_path, pca):
    c = _three_entry_cache(pca)
    c.save(tmp_path / "c.mcch")
    back = SemanticCache.load(tmp_path / "c.mcch", c.provider)
    assert back.entries() == c.entries()
    assert back.state() == c.state()
    assert back.profile.tau == 0.81
    assert back.to_bytes() == c.to_bytes()
    assert back.lookup(Q2, [Q1]).hit
    assert back.insert("new question", "r") == 5


def test_load_without_provider_for_inspection(tmp_path):
    c = _three_entry_cache()
    c.save(tmp_path / "c.mcch")
    back = SemanticCache.load(tmp_path / "c.mcch")
    assert len(back) == len(c) and back.dim == 32


def test_corrupt_files_rejected():
    blob = _three_entry_cache().to_bytes()
    with pytest.raises(CorruptFile):
        SemanticCache.from_bytes(b"XXXX" + blob[4:])
    for pos in (10, len(blob) // 2, len(blob) - 5):
        flipped = bytearray(blob)
        flipped[pos] ^= 0x01
        with pytest.raises(CorruptFile):
            SemanticCache.from_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        SemanticCache.from_bytes(blob[:-7])


def test_future_version_rejected():
    blob = _three_entry_cache().to_bytes()
    body = bytearray(blob[:-4])
    body[4:6] = (2).to_bytes(2, "little")
    with pytest.raises(VersionUnsupported):
        SemanticCache.from_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def test_dimension_mismatch_on_load():
    blob = _three_entry_cache().to_bytes()
    with pytest.raises(DimensionMismatch):
        SemanticCache.from_bytes(blob, StubProvider(64))


def test_atomic_save_leaves_no_temp_files(tmp_path):
    _three_entry_cache().save(tmp_path / "c.mcch")
    assert [p.name for p in tmp_path.iterdir()] == ["c.mcch"]


def test_feedback_and_retune():
    a = np.array([1.0, 0.0])
    table = {
        "cached": a,
        "served": np.array([0.82, math.sqrt(1 - 0.82**2)]),
        "d1": np.array([0.9, math.sqrt(1 - 0.81)]),
        "d2": np.array([0.95, math.sqrt(1 - 0.95**2)]),
        "n1": np.array([0.3, math.sqrt(1 - 0.09)]),
    }
    cache = SemanticCache(TableProvider(table), profile=ThresholdProfile(tau=0.80))
    eid = cache.insert("cached", "answer")
    out = cache.lookup("served")
    assert out.hit and abs(out.similarity - 0.82) < 1e-6
    pair = cache.record_feedback(eid, "rejected")
    assert pair == LabeledPair("served", "cached", False)
    assert len(cache.feedback_log) == 1

    labeled = [LabeledPair("d1", "cached", True), LabeledPair("d2", "cached", True),
               LabeledPair("n1", "cached", False)]
    prof = cache.retune(labeled)
    expected_tau, expected_f = oracles.threshold_sweep(cache.score(labeled + cache.feedback_log))
    assert prof.tau > 0.82
    assert prof.tau == expected_tau and abs(prof.f_beta_at_tau - expected_f) < 1e-6
    assert cache.lookup_config.tau == prof.tau
    assert not cache.lookup("served").hit


def test_feedback_errors(cache):
    eid = cache.insert(Q1, "r1")
    with pytest.raises(UnknownEntry):
        cache.record_feedback(99, "rejected")
    with pytest.raises(UnknownEntry):
        cache.record_feedback(eid, "rejected")  # never served
    cache.lookup(Q1)
    with pytest.raises(ValueError):
        cache.record_feedback(eid, "meh")
    assert cache.record_feedback(eid, "accepted").duplicate


def test_lru_eviction_keeps_context():
    c = SemanticCache(StubProvider(64), capacity=2)
    root = c.insert(Q1, "r1")
    c.insert(Q2, "r2", history=[Q1])
    c.lookup(Q2, [Q1])
    c.insert("totally different question", "r3")
    # the LRU victim had a follow-up, so it survives as context only
    assert c.get(root).context_only
    assert c.servable_count == 2
    assert c.lookup(Q2, [Q1]).hit
    c.insert("yet another topic here", "r4")
    assert c.servable_count == 2


def test_compact_drops_unreferenced_context_entries(cache):
    cache.insert("follow up", "r", history=[Q1, Q2])
    assert cache.compact() == 0
    # a dangling context-only chain, as a hand-edited or foreign file could hold
    top = cache._add("dangling root", "", cache.encode("dangling root"), 0)
    cache._add("dangling turn", "", cache.encode("dangling turn"), top)
    assert len(cache) == 5
    assert cache.compact() == 2
    assert [e.query_text for e in cache.entries()] == [Q1, Q2, "follow up"]
    assert cache.lookup("follow up", [Q1, Q2]).hit


def test_adapter_and_pca_pipeline():
    provider = StubProvider(32)
    adapter = AdapterModel.identity(32)
    pca = fit_pca([embed(provider, t) for t in synthetic.make_queries(40, seed=2)], k=8)
    c = SemanticCache(provider, adapter=adapter, pca=pca)
    assert c.dim == 8
    assert c.encode("draw a line").shape == (8,)
    with pytest.raises(DimensionMismatch):
        SemanticCache(provider, adapter=AdapterModel.identity(16), pca=pca)


def test_compressed_zero_query_never_hits():
    provider = TableProvider({"a": np.array([1.0, 0.0, 0.0]), "b": np.array([0.0, 1.0, 0.0]),
                              "c": np.array([0.0, 0.0, 1.0])})
    pca = fit_pca([np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])], k=1)
    c = SemanticCache(provider, pca=pca)
    c.insert("a", "r")
    # "c" is orthogonal to the fitted subspace and projects onto the compressed zero
    assert not c.lookup("c").hit


def test_entry_equality_is_bit_exact():
    v = np.ones(2, dtype=np.float32)
    e = CacheEntry(1, "q", "r", v)
    assert e == CacheEntry(1, "q", "r", v.copy())
    assert e != CacheEntry(1, "q", "r", v + np.float32(1e-7))
