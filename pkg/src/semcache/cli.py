"""Command-line entry point: ``semcache <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command echoes
its resolved configuration to stderr as one JSON line; results go to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synthetic
from .adapter import (
    AdapterModel,
    TrainingHyperparams,
    apply_adapter,
    load_adapter,
    load_pairs,
    save_adapter,
    score_pairs,
    train_local,
)
from .cache import LookupConfig, SemanticCache
from .compression import PcaModel, fit_pca, project
from .config import load_config, section
from .embedding import embed, make_provider
from .evaluation import generate_workload, run_benchmark, write_report_csv
from .federated import FlConfig, GlobalModel, simulate, split_among_clients
from .threshold import evaluate_at, load_scored_csv, tune

logger = logging.getLogger("semcache")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _echo_config(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "config": resolved}, default=str), file=sys.stderr)


def _provider(cfg: dict, args):
    emb = section(cfg, "embedding")
    if getattr(args, "dim", None):
        emb["dim"] = args.dim
    return make_provider(emb), emb


def _adapter(path):
    return load_adapter(path) if path else None


# --------------------------------------------------------------- commands


def cmd_embed(args, cfg):
    provider, emb = _provider(cfg, args)
    adapter = _adapter(args.adapter)
    pca = PcaModel.load(args.pca) if args.pca else None
    _echo_config("embed", {"embedding": emb, "adapter": args.adapter, "pca": args.pca})
    v = embed(provider, args.text)
    if adapter is not None:
        v = apply_adapter(adapter, v)
    if pca is not None:
        v = project(pca, v)
    print(json.dumps({"dim": int(v.shape[0]), "embedding": [float(x) for x in v]}))


def cmd_fit_pca(args, cfg):
    provider, emb = _provider(cfg, args)
    adapter = _adapter(args.adapter)
    _echo_config("fit-pca", {"embedding": emb, "pairs": args.pairs, "k": args.k, "out": args.out})
    texts = sorted({t for p in load_pairs(args.pairs) for t in (p.q1, p.q2)})
    samples = [embed(provider, t) for t in texts]
    if adapter is not None:
        samples = [apply_adapter(adapter, s) for s in samples]
    model = fit_pca(samples, args.k)
    model.save(args.out)
    X = np.stack(samples).astype(np.float64)
    total = float(np.var(X, axis=0, ddof=1).sum())
    print(json.dumps({
        "in_dim": model.in_dim,
        "k": model.k,
        "samples": len(samples),
        "explained_variance_ratio": float(model.explained_variance.sum() / total) if total else 0.0,
        "top_explained_variance": [float(v) for v in model.explained_variance[:5]],
        "out": args.out,
    }))


def _scored(args, cfg):
    if args.scored:
        return load_scored_csv(args.scored), {"scored": args.scored}
    provider, emb = _provider(cfg, args)
    return score_pairs(load_pairs(args.pairs), provider, _adapter(args.adapter)), {"embedding": emb, "pairs": args.pairs}


def cmd_tune_threshold(args, cfg):
    scored, src = _scored(args, cfg)
    _echo_config("tune-threshold", {**src, "beta": args.beta, "grid_step": args.grid_step})
    prof = tune(scored, args.beta, args.grid_step)
    _, rep = evaluate_at(scored, prof.tau, args.beta)
    print(json.dumps({"tau": prof.tau, "f_beta": prof.f_beta_at_tau, "beta": prof.beta,
                      "precision": rep.precision, "recall": rep.recall, "accuracy": rep.accuracy}))


def _hyperparams(args, base: dict) -> TrainingHyperparams:
    hp = dict(base)
    for name in ("epochs", "batch_size", "learning_rate", "margin", "mnr_scale", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            hp[name] = value
    return TrainingHyperparams(**hp)


def cmd_train_adapter(args, cfg):
    provider, emb = _provider(cfg, args)
    hp = _hyperparams(args, section(cfg, "train"))
    _echo_config("train-adapter", {"embedding": emb, "hyperparams": asdict(hp), "pairs": args.pairs, "out": args.out})
    model = _adapter(args.init) or AdapterModel.identity(provider.descriptor.output_dim)
    trained, metrics = train_local(model, load_pairs(args.pairs), provider, hp)
    save_adapter(trained, args.out)
    print(json.dumps({**metrics, "out": args.out}))


def cmd_fl_train(args, cfg):
    provider, emb = _provider(cfg, args)
    fl = section(cfg, "fl")
    data = section(cfg, "data")
    if args.rounds is not None:
        fl["rounds"] = args.rounds
    fl_cfg = FlConfig.from_dict(fl)
    pairs_path = args.pairs or data.get("pairs")
    seed = fl_cfg.seed
    if pairs_path:
        pairs = load_pairs(pairs_path)
    else:
        per_client = int(data.get("pairs_per_client", 60))
        pairs = synthetic.make_labeled_pairs(
            per_client * fl_cfg.num_clients,
            duplicate_fraction=float(data.get("duplicate_fraction", 0.5)),
            hard_negative_fraction=float(data.get("hard_negative_fraction", 0.5)),
            seed=seed,
        )
    test_path = data.get("test_pairs")
    if test_path:
        test_pairs = load_pairs(test_path)
    else:
        n_test = max(1, int(len(pairs) * float(data.get("test_fraction", 0.2))))
        pairs, test_pairs = pairs[:-n_test], pairs[-n_test:]
    metrics_csv = args.metrics_csv or section(cfg, "output").get("metrics_csv", "fl_rounds.csv")
    out = args.out or section(cfg, "output").get("model")
    _echo_config("fl-train", {"embedding": emb, "fl": {**asdict(fl_cfg)}, "pairs": pairs_path or "synthetic",
                              "train_pairs": len(pairs), "test_pairs": len(test_pairs),
                              "metrics_csv": metrics_csv, "out": out})
    clients = split_among_clients(pairs, fl_cfg.num_clients, seed)
    run = simulate(clients, fl_cfg, provider, eval_pairs=test_pairs, metrics_csv=metrics_csv)
    if out:
        run.final.save(out)
    last = run.metrics[-1] if run.metrics else {"round": run.final.round, "tau_global": run.final.tau_global}
    print(json.dumps({"final": last, "metrics_csv": metrics_csv, "out": out}))


def cmd_eval(args, cfg):
    scored, src = _scored(args, cfg)
    tau = args.tau if args.tau is not None else float(section(cfg, "lookup").get("tau", 0.83))
    _echo_config("eval", {**src, "tau": tau, "beta": args.beta})
    counts, rep = evaluate_at(scored, tau, args.beta)
    report = {**asdict(rep), "tau": tau, "confusion": asdict(counts)}
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2))
    if args.csv_out:
        with open(args.csv_out, "w", encoding="utf-8") as fh:
            fh.write("tau,precision,recall,f_beta,accuracy,true_hit,false_hit,true_miss,false_miss\n")
            fh.write(f"{tau},{rep.precision},{rep.recall},{rep.f_beta},{rep.accuracy},"
                     f"{counts.true_hit},{counts.false_hit},{counts.true_miss},{counts.false_miss}\n")
    print(json.dumps(report))


def cmd_bench(args, cfg):
    provider, emb = _provider(cfg, args)
    adapter = _adapter(args.adapter)
    tuning = synthetic.make_labeled_pairs(400, 0.5, 0.0, seed=args.seed + 101)
    pca = None
    if args.pca_k:
        texts = sorted({t for p in tuning for t in (p.q1, p.q2)})
        samples = [embed(provider, t) for t in texts]
        if adapter is not None:
            samples = [apply_adapter(adapter, s) for s in samples]
        pca = fit_pca(samples, args.pca_k)
    cache = SemanticCache(provider, adapter=adapter, pca=pca)
    if args.tau is not None:
        tau = args.tau
    else:
        tau = cache.retune(tuning, beta=args.beta).tau
    lookup = LookupConfig(tau=tau, top_k=args.top_k)
    _echo_config("bench", {"embedding": emb, "n": args.n, "ratio": args.ratio, "seed": args.seed,
                           "tau": tau, "top_k": args.top_k, "pca_k": args.pca_k})
    base = synthetic.make_queries(args.n, seed=args.seed)
    stream = generate_workload(base, args.ratio, seed=args.seed, n_items=args.n)
    result = run_benchmark(cache, stream, lookup, beta=args.beta)
    report = {**result.to_json(), "tau": tau, "entries": len(cache)}
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2))
    if args.csv_out:
        write_report_csv(result, args.csv_out)
    print(json.dumps(report))


def cmd_serve(args, cfg):
    import uvicorn

    from .proxy import ProxyConfig, ProxyService, UpstreamClient, create_app

    provider, emb = _provider(cfg, args)
    px = section(cfg, "proxy")
    lk = section(cfg, "lookup")
    for key, value in (("listen_addr", args.listen), ("upstream_base_url", args.upstream),
                       ("cache_path", args.cache_path), ("mock_latency_ms", args.mock_latency_ms)):
        if value is not None:
            px[key] = value
    lookup = LookupConfig(**lk) if lk else None
    pcfg = ProxyConfig(lookup=lookup, **px)
    adapter = _adapter(args.adapter)
    if pcfg.cache_path and Path(pcfg.cache_path).exists():
        cache = SemanticCache.load(pcfg.cache_path, provider, adapter)
    else:
        cache = SemanticCache(provider, adapter=adapter)
    _echo_config("serve", {"embedding": emb, "proxy": asdict(pcfg)})
    upstream = UpstreamClient(pcfg.upstream_base_url, latency_ms=pcfg.mock_latency_ms)
    app = create_app(ProxyService(cache, upstream, pcfg))
    host, port = pcfg.host_port()
    uvicorn.run(app, host=host, port=port, log_level="info")


def cmd_cache(args, cfg):
    _echo_config(f"cache {args.action}", {"path": args.path})
    cache = SemanticCache.load(args.path)
    if args.action == "inspect":
        entries = cache.entries()
        print(json.dumps({
            "path": args.path,
            "dim": cache.dim,
            "pca": None if cache.pca is None else {"in_dim": cache.pca.in_dim, "k": cache.pca.k},
            "threshold": asdict(cache.profile),
            "entries": len(entries),
            "context_only": sum(e.context_only for e in entries),
            "sample": [{"id": e.id, "parent_id": e.parent_id, "query": e.query_text,
                        "created_at": e.created_at} for e in entries[: args.limit]],
        }))
    else:
        removed = cache.compact()
        cache.save(args.path)
        print(json.dumps({"path": args.path, "removed": removed, "entries": len(cache)}))


def cmd_feedback(args, cfg):
    import httpx

    _echo_config("feedback", {"url": args.url, "entry_id": args.entry_id, "judgment": args.judgment})
    resp = httpx.post(args.url.rstrip("/") + "/feedback",
                      json={"entry_id": args.entry_id, "judgment": args.judgment}, timeout=10)
    print(resp.text)
    if resp.status_code >= 400:
        raise RuntimeError(f"feedback rejected with HTTP {resp.status_code}")


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file (overrides $SEMCACHE_CONFIG)")
    common.add_argument("--dim", type=int, help="stub embedding dimension")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="semcache", description="User-side semantic cache for LLM services.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", parents=[common], help="embed one text")
    p.add_argument("--text", required=True)
    p.add_argument("--adapter")
    p.add_argument("--pca")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("fit-pca", parents=[common], help="fit a PCA compression model")
    p.add_argument("--pairs", required=True)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--adapter")
    p.set_defaults(func=cmd_fit_pca)

    def scored_source(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--pairs", help="JSONL labeled pairs")
        src.add_argument("--scored", help="CSV of similarity,duplicate")
        p.add_argument("--adapter")
        p.add_argument("--beta", type=float, default=0.5)

    p = sub.add_parser("tune-threshold", parents=[common], help="find the F-beta optimal threshold")
    scored_source(p)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.set_defaults(func=cmd_tune_threshold)

    p = sub.add_parser("train-adapter", parents=[common], help="train an adapter locally")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--mnr-scale", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("fl-train", parents=[common], help="simulate federated training")
    p.add_argument("--pairs")
    p.add_argument("--rounds", type=int)
    p.add_argument("--metrics-csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fl_train)

    p = sub.add_parser("eval", parents=[common], help="metrics of a threshold on labeled pairs")
    scored_source(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--json-out")
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="replay a synthetic workload through a cache")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--pca-k", type=int, default=0)
    p.add_argument("--adapter")
    p.add_argument("--json-out")
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", parents=[common], help="run the caching proxy")
    p.add_argument("--listen")
    p.add_argument("--upstream")
    p.add_argument("--cache-path")
    p.add_argument("--mock-latency-ms", type=float)
    p.add_argument("--adapter")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("cache", parents=[common], help="inspect or compact a cache file")
    p.add_argument("action", choices=["inspect", "compact"])
    p.add_argument("path")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("feedback", parents=[common], help="report a wrong or right cached answer to a proxy")
    p.add_argument("--url", default="http://127.0.0.1:8080")
    p.add_argument("--entry-id", type=int, required=True)
    p.add_argument("--judgment", choices=["accepted", "rejected"], required=True)
    p.set_defaults(func=cmd_feedback)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, _ = load_config(args.config)
        args.func(args, cfg)
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"semcache {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
