"""Synthetic queries, paraphrases and labeled pairs for tests and benchmarks.

Queries are assembled from small vocabularies so that unrelated queries share
few tokens, while paraphrases are produced by swapping words for synonyms the
stub provider folds back together and by prepending filler phrases.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .adapter import LabeledPair
from .embedding import SYNONYM_REWRITE, SYNONYMS

VERBS = [
    "draw", "change", "make", "increase", "decrease", "explain", "write", "sort",
    "remove", "fix", "buy", "find", "get", "use", "learn", "improve", "check",
    "convert", "combine", "split", "count", "read", "save", "send", "plan",
    "clean", "cook", "grow", "teach", "start", "stop", "show", "help",
]
ADJECTIVES = [
    "big", "small", "thick", "fast", "slow", "cheap", "healthy", "happy", "red",
    "blue", "green", "simple", "modern", "old", "new", "secure", "remote",
    "local", "daily", "weekly", "private", "public", "custom", "empty",
    "nested", "hidden", "broken", "shared", "offline", "portable",
]
NOUNS = [
    "line", "circle", "square", "car", "phone", "file", "error", "picture",
    "house", "money", "book", "movie", "song", "garden", "food", "trip", "list",
    "function", "job", "idea", "answer", "child", "doctor", "table", "server",
    "database", "router", "laptop", "password", "account", "bicycle", "guitar",
    "camera", "printer", "kitchen", "window", "letter", "resume", "essay",
    "report", "invoice", "playlist", "calendar", "website", "spreadsheet",
    "chart", "string", "dictionary", "backup", "keyboard",
]
TOPICS = [
    "python", "java", "rust", "excel", "linux", "windows", "android", "iphone",
    "javascript", "sql", "beginners", "students", "seniors", "weddings",
    "startups", "winter", "summer", "kubernetes", "docker", "photoshop",
    "marathons", "toddlers", "retirees", "teenagers", "farmers",
]
TEMPLATES = [
    "how do i {verb} a {adj} {noun} in {topic}",
    "{verb} the {adj} {noun} using {topic}",
    "best way to {verb} {adj} {noun} with {topic}",
    "{verb} my {adj} {noun} for {topic}",
]
FILLERS = ["please", "quick question", "hey there", "i wonder", "tell me"]

_WORD_RE = re.compile(r"[^\W_]+|[\W_]+", re.UNICODE)


def make_queries(n: int, seed: int = 0) -> list[str]:
    """``n`` distinct template queries drawn with a seeded generator."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        q = TEMPLATES[rng.integers(len(TEMPLATES))].format(
            verb=VERBS[rng.integers(len(VERBS))],
            adj=ADJECTIVES[rng.integers(len(ADJECTIVES))],
            noun=NOUNS[rng.integers(len(NOUNS))],
            topic=TOPICS[rng.integers(len(TOPICS))],
        )
        if q not in seen:
            seen.add(q)
            out.append(q)
    return out


def paraphrase(text: str, rng=None, swap_prob: float = 0.7, filler_prob: float = 0.5) -> str:
    """Rewrite ``text`` with synonyms and an optional filler prefix."""
    rng = np.random.default_rng() if rng is None else rng
    parts = []
    for piece in _WORD_RE.findall(text):
        low = piece.lower()
        canonical = SYNONYM_REWRITE.get(low, low)
        forms = SYNONYMS.get(canonical)
        if forms and rng.random() < swap_prob:
            choices = (canonical,) + forms
            piece = choices[int(rng.integers(len(choices)))]
        parts.append(piece)
    out = "".join(parts)
    if rng.random() < filler_prob:
        out = f"{FILLERS[int(rng.integers(len(FILLERS)))]} {out}"
    return out


def _hard_negative(query: str, rng) -> str:
    # Swap one content slot for a different word: many shared tokens, new meaning.
    words = query.split()
    pools = [VERBS, ADJECTIVES, NOUNS, TOPICS]
    candidates = [(i, pool) for i, w in enumerate(words) for pool in pools if w in pool]
    i, pool = candidates[int(rng.integers(len(candidates)))]
    replacement = words[i]
    while replacement == words[i]:
        replacement = pool[int(rng.integers(len(pool)))]
    words[i] = replacement
    return " ".join(words)


def make_labeled_pairs(
    n: int,
    duplicate_fraction: float = 0.5,
    hard_negative_fraction: float = 0.0,
    seed: int = 0,
) -> list[LabeledPair]:
    """Labeled pairs: paraphrase duplicates, random and optionally hard non-duplicates."""
    rng = np.random.default_rng(seed)
    pool = make_queries(2 * n + 10, seed=seed + 1)
    pairs = []
    for i in range(n):
        q = pool[2 * i]
        if rng.random() < duplicate_fraction:
            pairs.append(LabeledPair(q, paraphrase(q, rng), True))
        elif rng.random() < hard_negative_fraction:
            pairs.append(LabeledPair(q, _hard_negative(q, rng), False))
        else:
            pairs.append(LabeledPair(q, pool[2 * i + 1], False))
    return pairs


# --------------------------------------------------------------------------
# contextual conversations

FOLLOW_UPS = [
    "Change the color to red",
    "Make it thicker",
    "Now explain the output",
    "Show it as a chart",
    "Write a test for it",
    "Make it faster",
    "Translate it to java",
    "Add error handling",
    "Save the result to a file",
    "Sort it by date",
]

BACKGROUND_Q1 = "Draw a line in Python?"
BACKGROUND_Q2 = "Change the color to red"
BACKGROUND_Q3 = "Draw a circle?"
BACKGROUND_Q4 = "Change the color to red"


@dataclass(frozen=True)
class ContextProbe:
    query: str
    history: tuple[str, ...]
    # True when the cache holds this follow-up under an equivalent context
    expect_hit: bool
    # root of the cached conversation a positive probe repeats
    source_root: str | None = None


@dataclass(frozen=True)
class ContextSuite:
    # (query, response, history) triples to insert in order
    seed_entries: list[tuple[str, str, tuple[str, ...]]]
    probes: list[ContextProbe]


def make_context_suite(n_probes: int = 100, seed: int = 0) -> ContextSuite:
    """Conversations where a follow-up is cached under one root query.

    The first seeded conversation and first probe are the Q1..Q4 scenario.
    Negative probes ask a cached follow-up under a different root (any hit
    is a false context hit); positive probes repeat a cached conversation with
    paraphrased wording.
    """
    rng = np.random.default_rng(seed)
    n_roots = max(2, n_probes // 2)
    roots = [BACKGROUND_Q1] + make_queries(n_roots - 1, seed=seed + 7)
    seeds: list[tuple[str, str, tuple[str, ...]]] = []
    cached = []
    for i, root in enumerate(roots):
        follow = BACKGROUND_Q2 if i == 0 else FOLLOW_UPS[int(rng.integers(len(FOLLOW_UPS)))]
        seeds.append((root, f"answer to: {root}", ()))
        seeds.append((follow, f"answer to: {follow} (after: {root})", (root,)))
        cached.append((root, follow))

    fresh_roots = make_queries(n_probes, seed=seed + 13)
    probes = [ContextProbe(BACKGROUND_Q4, (BACKGROUND_Q3,), False)]
    while len(probes) < n_probes:
        root, follow = cached[int(rng.integers(len(cached)))]
        if len(probes) % 4 == 3:
            probes.append(ContextProbe(paraphrase(follow, rng, filler_prob=0.0),
                                       (paraphrase(root, rng, filler_prob=0.0),), True, root))
        else:
            other = fresh_roots[len(probes)]
            probes.append(ContextProbe(paraphrase(follow, rng, filler_prob=0.0), (other,), False))
    return ContextSuite(seeds, probes)
