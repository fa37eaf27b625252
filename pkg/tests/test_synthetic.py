import numpy as np

from semcache import synthetic
from semcache.embedding import StubProvider, embed


def test_make_queries_distinct_and_seeded():
    a = synthetic.make_queries(300, seed=4)
    assert len(set(a)) == 300
    assert a == synthetic.make_queries(300, seed=4)
    assert a != synthetic.make_queries(300, seed=5)


def test_paraphrase_without_filler_embeds_identically():
    provider = StubProvider(128)
    rng = np.random.default_rng(0)
    for q in synthetic.make_queries(50, seed=1):
        p = synthetic.paraphrase(q, rng, swap_prob=1.0, filler_prob=0.0)
        assert np.allclose(embed(provider, p), embed(provider, q), atol=1e-6)


def test_labeled_pairs_shape():
    pairs = synthetic.make_labeled_pairs(400, 0.5, 0.5, seed=2)
    assert pairs == synthetic.make_labeled_pairs(400, 0.5, 0.5, seed=2)
    dup = sum(p.duplicate for p in pairs)
    assert 160 <= dup <= 240
    assert all(p.q1 != p.q2 for p in pairs if not p.duplicate)


def test_context_suite_layout():
    suite = synthetic.make_context_suite(100, seed=0)
    assert len(suite.probes) == 100
    first = suite.probes[0]
    assert (first.query, first.history, first.expect_hit) == (
        synthetic.BACKGROUND_Q4, (synthetic.BACKGROUND_Q3,), False)
    assert suite.seed_entries[:2] == [
        (synthetic.BACKGROUND_Q1, f"answer to: {synthetic.BACKGROUND_Q1}", ()),
        (synthetic.BACKGROUND_Q2, suite.seed_entries[1][1], (synthetic.BACKGROUND_Q1,)),
    ]
    roots = {q for q, _, h in suite.seed_entries if not h}
    positives = [p for p in suite.probes if p.expect_hit]
    assert positives and all(p.source_root in roots for p in positives)
    assert all(p.source_root is None for p in suite.probes if not p.expect_hit)
