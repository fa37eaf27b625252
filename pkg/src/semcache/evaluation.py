"""Semantic-cache metrics, workload generation and benchmark replay.

A semantic cache outcome is one of four kinds:

* true hit (TH): a hit that returned an entry of the query's duplicate group,
* false hit (FH): a hit when no duplicate was cached, or on the wrong entry,
* true miss (TM): a miss when no duplicate was cached,
* false miss (FM): a miss although a duplicate was cached.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyBase, EmptyCounts


class Outcome(str, enum.Enum):
    TH = "true_hit"
    FH = "false_hit"
    TM = "true_miss"
    FM = "false_miss"


@dataclass(frozen=True)
class ConfusionCounts:
    true_hit: int = 0
    false_hit: int = 0
    true_miss: int = 0
    false_miss: int = 0

    @property
    def total(self) -> int:
        return self.true_hit + self.false_hit + self.true_miss + self.false_miss

    def add(self, outcome: Outcome) -> "ConfusionCounts":
        d = asdict(self)
        d[outcome.value] += 1
        return ConfusionCounts(**d)

    @classmethod
    def from_outcomes(cls, outcomes) -> "ConfusionCounts":
        d = {o.value: 0 for o in Outcome}
        for o in outcomes:
            d[Outcome(o).value] += 1
        return cls(**d)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f_beta: float
    accuracy: float
    beta: float


def classify_outcome(predicted_hit: bool, has_duplicate: bool, correct_entry: bool = True) -> Outcome:
    if predicted_hit:
        return Outcome.TH if has_duplicate and correct_entry else Outcome.FH
    return Outcome.FM if has_duplicate else Outcome.TM


def f_beta_score(precision: float, recall: float, beta: float) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + b2) * precision * recall / denom


def compute_metrics(c: ConfusionCounts, beta: float = 0.5) -> MetricsReport:
    """Precision, recall, F-beta and accuracy from confusion counts.

    Empty ratios (no hits, or no duplicates) are reported as 0.
    """
    total = c.total
    if total <= 0:
        raise EmptyCounts("no classified events")
    hits = c.true_hit + c.false_hit
    positives = c.true_hit + c.false_miss
    precision = c.true_hit / hits if hits else 0.0
    recall = c.true_hit / positives if positives else 0.0
    accuracy = (c.true_hit + c.true_miss) / total
    return MetricsReport(precision, recall, f_beta_score(precision, recall, beta), accuracy, beta)


# --------------------------------------------------------------------------
# workloads


@dataclass(frozen=True)
class WorkloadItem:
    query: str
    # stream index of the first occurrence this item repeats, None if unique
    duplicate_of: Optional[int] = None
    history: tuple[str, ...] = ()
    response: Optional[str] = None

    @property
    def is_duplicate(self) -> bool:
        return self.duplicate_of is not None


def generate_workload(
    base_queries: Sequence[str],
    duplicate_ratio: float = 0.31,
    paraphraser: Callable | None = None,
    seed: int = 0,
    n_items: int | None = None,
) -> list[WorkloadItem]:
    """Stream of unique base queries interleaved with paraphrased repeats.

    Each item after the first is a repeat with probability ``duplicate_ratio``;
    a repeat paraphrases a uniformly chosen earlier unique item. Once the base
    queries run out, remaining items are forced repeats. ``paraphraser`` is
    called as ``paraphraser(text, rng)``.
    """
    if not base_queries:
        raise EmptyBase("base query list is empty")
    if not 0.0 <= duplicate_ratio <= 1.0:
        raise ValueError("duplicate_ratio must lie in [0, 1]")
    if paraphraser is None:
        from .synthetic import paraphrase as paraphraser
    n_items = len(base_queries) if n_items is None else n_items
    rng = np.random.default_rng(seed)
    stream: list[WorkloadItem] = []
    roots: list[int] = []
    next_base = 0
    for i in range(n_items):
        want_repeat = rng.random() < duplicate_ratio
        if roots and (want_repeat or next_base >= len(base_queries)):
            root = roots[int(rng.integers(len(roots)))]
            stream.append(WorkloadItem(paraphraser(stream[root].query, rng), duplicate_of=root))
        else:
            stream.append(WorkloadItem(base_queries[next_base]))
            roots.append(i)
            next_base += 1
    return stream


def load_contextual_dataset(path: str | Path) -> list[WorkloadItem]:
    """Read the contextual JSONL format into a replayable stream.

    Records carry ``id``, ``query``, ``response``, ``parent_id`` and
    ``duplicate_of`` (ids, or null). The history of a record is its parent
    chain, oldest first.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    by_id = {r["id"]: r for r in records}
    position = {r["id"]: i for i, r in enumerate(records)}
    items = []
    for r in records:
        chain = []
        pid = r.get("parent_id")
        while pid is not None:
            chain.append(by_id[pid]["query"])
            pid = by_id[pid].get("parent_id")
        dup = r.get("duplicate_of")
        items.append(
            WorkloadItem(
                r["query"],
                duplicate_of=None if dup is None else position[dup],
                history=tuple(reversed(chain)),
                response=r.get("response"),
            )
        )
    return items


# --------------------------------------------------------------------------
# benchmark


@dataclass
class LatencySummary:
    mean_ms: float
    p50_ms: float
    p95_ms: float

    @classmethod
    def from_samples(cls, seconds: Sequence[float]) -> "LatencySummary":
        if not len(seconds):
            return cls(0.0, 0.0, 0.0)
        ms = np.asarray(seconds) * 1000.0
        return cls(float(ms.mean()), float(np.percentile(ms, 50)), float(np.percentile(ms, 95)))


@dataclass
class BenchmarkResult:
    metrics: MetricsReport
    confusion: ConfusionCounts
    latency: LatencySummary
    hit_rate: float
    outcomes: list[Outcome] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "precision": self.metrics.precision,
            "recall": self.metrics.recall,
            "f_beta": self.metrics.f_beta,
            "beta": self.metrics.beta,
            "accuracy": self.metrics.accuracy,
            "hit_rate": self.hit_rate,
            "confusion": asdict(self.confusion),
            "latency_ms": {
                "mean": self.latency.mean_ms,
                "p50": self.latency.p50_ms,
                "p95": self.latency.p95_ms,
            },
        }


def default_response(index: int, item: WorkloadItem) -> str:
    return item.response or f"response #{index} to: {item.query}"


def run_benchmark(
    cache,
    stream: Sequence[WorkloadItem],
    cfg=None,
    beta: float = 0.5,
    responder: Callable[[int, WorkloadItem], str] = default_response,
) -> BenchmarkResult:
    """Replay ``stream`` through ``cache`` and classify every lookup.

    A miss inserts the item (query, generated response, history) as the
    upstream path would. An item's duplicate group is its ``duplicate_of``
    root (or itself); a hit counts as true only if the returned entry belongs
    to the same group.
    """
    group_of_entry: dict[int, int] = {}
    group_count: dict[int, int] = {}
    outcomes: list[Outcome] = []
    timings: list[float] = []
    hits = 0
    for i, item in enumerate(stream):
        if item.duplicate_of is not None and item.duplicate_of >= i:
            raise ValueError(f"item {i} repeats a later item {item.duplicate_of}")
        group = i if item.duplicate_of is None else item.duplicate_of
        has_dup = group_count.get(group, 0) > 0
        t0 = time.perf_counter()
        res = cache.lookup(item.query, list(item.history), cfg)
        timings.append(time.perf_counter() - t0)
        if res.hit:
            hits += 1
            correct = group_of_entry.get(res.entry.id) == group
            outcomes.append(classify_outcome(True, has_dup, correct))
        else:
            outcomes.append(classify_outcome(False, has_dup))
            entry_id = cache.insert(item.query, responder(i, item), list(item.history))
            group_of_entry[entry_id] = group
            group_count[group] = group_count.get(group, 0) + 1
    confusion = ConfusionCounts.from_outcomes(outcomes)
    return BenchmarkResult(
        metrics=compute_metrics(confusion, beta),
        confusion=confusion,
        latency=LatencySummary.from_samples(timings),
        hit_rate=hits / len(stream) if stream else 0.0,
        outcomes=outcomes,
    )


def write_report_csv(result: BenchmarkResult, path: str | Path) -> None:
    row = result.to_json()
    flat = {k: v for k, v in row.items() if not isinstance(v, dict)}
    flat.update({f"confusion_{k}": v for k, v in row["confusion"].items()})
    flat.update({f"latency_{k}_ms": v for k, v in row["latency_ms"].items()})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(flat) + "\n")
        fh.write(",".join(str(v) for v in flat.values()) + "\n")
