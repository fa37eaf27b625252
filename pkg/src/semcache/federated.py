"""Single-process simulation of federated adapter and threshold training.

Each round the server samples clients uniformly without replacement, every
sampled client trains the current global adapter on its own pairs and tunes a
local threshold on its held-out pairs, and the server merges the results:
adapter weights by sample-weighted FedAvg, thresholds by a plain mean.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import AdapterModel, LabeledPair, TrainingHyperparams, score_pairs, train_local
from .embedding import EmbeddingProvider
from .errors import EmptyInput, EmptyUpdates, InsufficientLabels, LengthMismatch
from .threshold import DEFAULT_TAU, evaluate_at, tune

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["round", "f_beta", "precision", "recall", "accuracy", "tau_global"]


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    weights: np.ndarray = field(repr=False)
    sample_count: int
    tau_local: float

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be at least 1")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("client weights must be finite")


@dataclass(frozen=True)
class GlobalModel:
    round: int
    weights: np.ndarray = field(repr=False)
    tau_global: float = DEFAULT_TAU

    def adapter(self, in_dim: int) -> AdapterModel:
        return AdapterModel.from_flat(self.weights, in_dim, len(self.weights) // in_dim)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, weights=self.weights, round=self.round, tau_global=self.tau_global)

    @classmethod
    def load(cls, path: str | Path) -> "GlobalModel":
        with np.load(path) as data:
            return cls(int(data["round"]), data["weights"].copy(), float(data["tau_global"]))


@dataclass(frozen=True)
class FlConfig:
    num_clients: int = 20
    clients_per_round: int = 4
    rounds: int = 50
    seed: int = 0
    hyperparams: TrainingHyperparams = TrainingHyperparams()
    validation_fraction: float = 0.2
    beta: float = 0.5

    def __post_init__(self):
        if self.num_clients < 1 or self.clients_per_round < 1:
            raise ValueError("num_clients and clients_per_round must be positive")
        if self.clients_per_round > self.num_clients:
            raise ValueError("clients_per_round cannot exceed num_clients")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "FlConfig":
        d = dict(d)
        hp = d.pop("hyperparams", None) or {}
        known = {f for f in cls.__dataclass_fields__}
        return cls(hyperparams=TrainingHyperparams(**hp), **{k: v for k, v in d.items() if k in known})


@dataclass
class ClientDataset:
    client_id: int
    pairs: list[LabeledPair]

    def split(self, validation_fraction: float) -> tuple[list[LabeledPair], list[LabeledPair]]:
        """Training pairs first, the last ``validation_fraction`` held out."""
        n_val = int(round(len(self.pairs) * validation_fraction))
        if n_val >= len(self.pairs):
            n_val = len(self.pairs) - 1
        cut = len(self.pairs) - n_val
        return self.pairs[:cut], self.pairs[cut:]


def split_among_clients(pairs: Sequence[LabeledPair], num_clients: int, seed: int = 0) -> list[ClientDataset]:
    """Shuffle ``pairs`` and deal them round-robin into non-overlapping shards."""
    order = np.random.default_rng(seed).permutation(len(pairs))
    shards: list[list[LabeledPair]] = [[] for _ in range(num_clients)]
    for pos, idx in enumerate(order):
        shards[pos % num_clients].append(pairs[idx])
    return [ClientDataset(i, shard) for i, shard in enumerate(shards)]


def fed_avg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-count weighted average of client weight vectors."""
    if not updates:
        raise EmptyUpdates("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    length = len(ordered[0].weights)
    if any(len(u.weights) != length for u in ordered):
        raise LengthMismatch("client weight vectors differ in length")
    total = sum(u.sample_count for u in ordered)
    out = np.zeros(length, dtype=np.float64)
    for u in ordered:
        out += (u.sample_count / total) * np.asarray(u.weights, dtype=np.float64)
    return out


def aggregate_tau(taus: Sequence[float]) -> float:
    """Unweighted mean of client thresholds."""
    if len(taus) == 0:
        raise EmptyInput("no thresholds to aggregate")
    if any(not 0.0 <= t <= 1.0 for t in taus):
        raise ValueError("thresholds must lie in [0, 1]")
    return math.fsum(taus) / len(taus)


def sample_clients(cfg: FlConfig, round_index: int) -> list[int]:
    rng = np.random.default_rng((cfg.seed ^ round_index) & 0xFFFFFFFFFFFFFFFF)
    return sorted(int(i) for i in rng.choice(cfg.num_clients, cfg.clients_per_round, replace=False))


def client_update(
    global_model: GlobalModel,
    client: ClientDataset,
    cfg: FlConfig,
    round_index: int,
    provider: EmbeddingProvider,
) -> ClientUpdate | None:
    """Local step of one client; ``None`` if it has no data."""
    if not client.pairs:
        logger.warning("client %d has no data; skipped in round %d", client.client_id, round_index)
        return None
    train, val = client.split(cfg.validation_fraction)
    in_dim = provider.descriptor.output_dim
    model = global_model.adapter(in_dim)
    seed = int(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, round_index, client.client_id]).generate_state(1)[0])
    trained, _ = train_local(model, train, provider, replace(cfg.hyperparams, seed=seed))
    tau_local = global_model.tau_global
    if val:
        try:
            tau_local = tune(score_pairs(val, provider, trained), cfg.beta).tau
        except InsufficientLabels:
            logger.info("client %d validation split is single-class; keeping tau_global", client.client_id)
    return ClientUpdate(client.client_id, trained.flat(), len(train), tau_local)


def run_round(
    global_model: GlobalModel,
    clients: Sequence[ClientDataset],
    cfg: FlConfig,
    round_index: int,
    provider: EmbeddingProvider,
) -> GlobalModel:
    if round_index >= cfg.rounds:
        raise ValueError(f"round {round_index} is beyond the configured {cfg.rounds} rounds")
    if len(clients) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} clients, got {len(clients)}")
    updates = []
    for idx in sample_clients(cfg, round_index):
        upd = client_update(global_model, clients[idx], cfg, round_index, provider)
        if upd is not None:
            updates.append(upd)
    if not updates:
        return GlobalModel(global_model.round + 1, global_model.weights, global_model.tau_global)
    updates.sort(key=lambda u: u.client_id)
    return GlobalModel(
        global_model.round + 1,
        fed_avg(updates),
        aggregate_tau([u.tau_local for u in updates]),
    )


def evaluate_global(global_model: GlobalModel, pairs: Sequence[LabeledPair], provider: EmbeddingProvider,
                    beta: float = 0.5) -> dict:
    """Held-out metrics of the global adapter at its global threshold."""
    scored = score_pairs(pairs, provider, global_model.adapter(provider.descriptor.output_dim))
    _, rep = evaluate_at(scored, global_model.tau_global, beta)
    return {
        "round": global_model.round,
        "f_beta": rep.f_beta,
        "precision": rep.precision,
        "recall": rep.recall,
        "accuracy": rep.accuracy,
        "tau_global": global_model.tau_global,
    }


@dataclass
class FlRun:
    history: list[GlobalModel]
    metrics: list[dict]

    @property
    def final(self) -> GlobalModel:
        return self.history[-1]


def simulate(
    clients: Sequence[ClientDataset],
    cfg: FlConfig,
    provider: EmbeddingProvider,
    initial: GlobalModel | None = None,
    eval_pairs: Sequence[LabeledPair] | None = None,
    metrics_csv: str | Path | None = None,
) -> FlRun:
    """Run ``cfg.rounds`` rounds, optionally logging held-out metrics per round."""
    if initial is None:
        dim = provider.descriptor.output_dim
        initial = GlobalModel(0, AdapterModel.identity(dim).flat(), DEFAULT_TAU)
    history = [initial]
    metrics: list[dict] = []
    writer = None
    fh = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
    try:
        current = initial
        for r in range(cfg.rounds):
            current = run_round(current, clients, cfg, r, provider)
            history.append(current)
            if eval_pairs:
                row = evaluate_global(current, eval_pairs, provider, cfg.beta)
                metrics.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                logger.info("round %d: %s", current.round, row)
    finally:
        if fh is not None:
            fh.close()
    return FlRun(history, metrics)


def global_model_summary(g: GlobalModel) -> dict:
    return {"round": g.round, "tau_global": g.tau_global, "num_weights": int(len(g.weights))}


__all__ = [
    "ClientDataset",
    "ClientUpdate",
    "FlConfig",
    "FlRun",
    "GlobalModel",
    "aggregate_tau",
    "client_update",
    "evaluate_global",
    "fed_avg",
    "run_round",
    "sample_clients",
    "simulate",
    "split_among_clients",
]
