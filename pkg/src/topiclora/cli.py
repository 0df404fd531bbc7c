"""Command-line interface for the full pipeline.

The intended end-to-end chain on a synthetic corpus:

    topiclora make-synthetic --out-dir data
    topiclora ingest --input data/train.jsonl --out data/corpus.jsonl
    topiclora cluster --corpus data/corpus.jsonl --k 8 --min-docs 3 --out run/topics.tpc
    topiclora train --corpus data/corpus.jsonl --topic-model run/topics.tpc \\
        --assignments run/topics.tpc.assignments.jsonl --out-dir run/experts \\
        --pretrain-steps 600 --workers 4
    topiclora route --topic-model run/topics.tpc --mode fallback \\
        --queries data/val.jsonl --out run/decisions.jsonl
    topiclora eval --base run/experts/base.model --adapters run/experts \\
        --topic-model run/topics.tpc --val data/val.jsonl --mc data/mc.jsonl \\
        --shards run/experts/shards --out run/eval.json
    topiclora serve-sim --nodes 4 --cache 2 --policy hash \\
        --trace run/decisions.jsonl --out run/serving.json
    topiclora report --eval run/eval.json --serving run/serving.json \\
        --topic-model run/topics.tpc --out-dir run/report
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, serving
from .corpus import (
    load_corpus, load_mc_items, make_synthetic_corpus, make_synthetic_mc,
    save_corpus, save_mc_items,
)
from .embedding import (
    HashedNgramEmbedder, load_embedder_config, save_embedder_config,
    save_embeddings,
)
from .lm import ModelConfig, TinyCausalLM, load_base, pretrain, save_base
from .lora import AdapterRegistry
from .routing import Router, RoutingMode, save_decisions, summarize_decisions
from .topics import TopicKMeans, load_topic_model, save_topic_model
from .training import TrainRecipe, load_manifest, shard_corpus, train_all


def _outpath(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _embedder_sidecar(topic_model_path: str | Path) -> Path:
    return Path(str(topic_model_path) + ".embedder.json")


def _assignments_path(topic_model_path: str | Path) -> Path:
    return Path(str(topic_model_path) + ".assignments.jsonl")


def _load_router(args, mode) -> Router:
    model = load_topic_model(args.topic_model)
    sidecar = _embedder_sidecar(args.topic_model)
    if not sidecar.exists():
        raise SystemExit(
            f"missing embedder sidecar {sidecar}; run `cluster` to produce it"
        )
    embedder = load_embedder_config(sidecar)
    return Router(model, embedder, mode=mode, max_query_chars=args.max_query_chars)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = make_synthetic_corpus(
        args.topics, args.docs_per_topic, args.vocab_per_topic, args.seed,
        words_per_doc=args.words_per_doc, split="train",
    )
    val = make_synthetic_corpus(
        args.topics, args.val_docs_per_topic, args.vocab_per_topic, args.seed,
        words_per_doc=args.words_per_doc, split="validation",
    )
    items = []
    if args.topics >= 2 and args.mc_items_per_topic >= 1:
        items = make_synthetic_mc(
            args.topics, args.mc_items_per_topic, args.vocab_per_topic, args.seed,
            num_options=min(4, args.topics),
        )
    save_corpus(train, out / "train.jsonl")
    save_corpus(val, out / "val.jsonl")
    save_mc_items(items, out / "mc.jsonl")
    print(f"wrote {len(train)} train docs ({train.total_tokens} tokens), "
          f"{len(val)} validation docs, {len(items)} MC items to {out}")
    return 0


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.input)
    save_corpus(corpus, _outpath(args.out))
    lengths = [d.num_tokens for d in corpus]
    print(f"ingested {len(corpus)} documents, {corpus.total_tokens} tokens "
          f"(min {min(lengths)}, max {max(lengths)} per doc) -> {args.out}")
    return 0


def cmd_cluster(args) -> int:
    corpus = load_corpus(args.corpus)
    embedder = HashedNgramEmbedder(
        dim=args.dim, ngram_size=args.ngram, hash_buckets=args.hash_buckets,
        projection_seed=args.projection_seed,
    ).fit()
    X = embedder.transform(corpus.texts())
    if args.embeddings_out:
        save_embeddings(X, _outpath(args.embeddings_out))
    model = TopicKMeans(
        n_clusters=args.k, seed=args.seed, max_iters=args.max_iters, tol=args.tol
    ).fit(X)
    if args.min_docs > 0:
        model = model.prune(args.min_docs)
    model.extract_keywords(corpus.texts(), top_n=args.keywords)
    save_topic_model(model, _outpath(args.out))
    save_embedder_config(embedder, _embedder_sidecar(args.out))
    with _assignments_path(args.out).open("w", encoding="utf-8") as fh:
        for doc, label in zip(corpus, model.labels_):
            fh.write(json.dumps({"id": doc.doc_id, "topic": int(label)}) + "\n")
    print(f"clustered {len(corpus)} docs into k={model.k} "
          f"({model.n_iter_} iterations, WCSS {model.inertia_:.4f})")
    print(model.retention_summary())
    for topic_id in model.retained_topics:
        words = ", ".join(model.keywords_[topic_id])
        print(f"  topic {topic_id}: {words}")
    return 0


def cmd_pretrain(args) -> int:
    corpus = load_corpus(args.corpus)
    config = ModelConfig(
        d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
        context_len=args.context, init_seed=args.seed,
    )
    model = TinyCausalLM(config)
    losses = pretrain(
        model, corpus, args.steps, lr_max=args.lr_max, lr_min=args.lr_min,
        batch_size=args.batch_size, seed=args.seed,
    )
    model.freeze()
    save_base(model, _outpath(args.out))
    first = losses[0] if losses else float("nan")
    last = losses[-1] if losses else float("nan")
    print(f"pretrained {args.steps} steps on {corpus.total_tokens} tokens: "
          f"loss {first:.4f} -> {last:.4f}; frozen base saved to {args.out}")
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    topic_model = load_topic_model(args.topic_model)
    assignments: dict[int, int] = {}
    with Path(args.assignments).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                assignments[obj["id"]] = obj["topic"]
    try:
        labels = [assignments[doc.doc_id] for doc in corpus]
    except KeyError as exc:
        raise SystemExit(f"document {exc} has no topic assignment") from None

    if args.base:
        model = load_base(args.base)
        if not model.frozen:
            model.freeze()
    elif args.pretrain_steps > 0:
        model = TinyCausalLM(ModelConfig(init_seed=args.seed))
        losses = pretrain(model, corpus, args.pretrain_steps, seed=args.seed)
        model.freeze()
        print(f"pretrained base inline: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    else:
        raise SystemExit("pass --base PATH or --pretrain-steps N")

    recipe = TrainRecipe(
        lr_max=args.lr_max, lr_min=args.lr_min, epochs=args.epochs,
        micro_batch=args.micro_batch, grad_accum=args.grad_accum,
        rank=args.rank, seed=args.seed,
    )
    shards = shard_corpus(list(corpus), labels, topic_model.retained_)
    entries = train_all(
        model, shards, recipe, args.out_dir,
        max_workers=args.workers, holdout_fraction=args.holdout,
    )
    ok = [e for e in entries if e.status == "ok"]
    failed = [e for e in entries if e.status == "failed"]
    print(f"trained {len(ok)} experts ({len(failed)} failed) -> {args.out_dir}")
    for entry in failed:
        print(f"  topic {entry.topic_id}: FAILED")
    return 1 if failed else 0


def cmd_route(args) -> int:
    router = _load_router(args, RoutingMode(args.mode))
    queries = load_corpus(args.queries, split="validation")
    decisions = router.route_batch((d.doc_id, d.text) for d in queries)
    save_decisions(decisions, _outpath(args.out))
    stats = summarize_decisions(decisions)
    print(f"routed {stats.total} queries, fallback rate {stats.fallback_rate:.3f} "
          f"-> {args.out}")
    if args.inspect > 0:
        for doc in list(queries)[: args.inspect]:
            print(router.inspect(doc.doc_id, doc.text))
    return 0


def cmd_eval(args) -> int:
    model = load_base(args.base)
    registry = AdapterRegistry(args.adapters)
    report: dict = {"perplexity": {}, "manifest": None}
    val = list(load_corpus(args.val, split="validation"))

    variants: list[tuple[str, Router | None]] = [("base", None)]
    for mode in (RoutingMode.FALLBACK, RoutingMode.ALWAYS_ROUTE):
        variants.append((mode.value, _load_router(args, mode)))
    for name, router in variants:
        result = evaluation.eval_perplexity(model, registry, router, val)
        report["perplexity"][name] = result.to_json()
        print(f"perplexity[{name}] = {result.perplexity:.4f}")

    if args.mc:
        items = load_mc_items(args.mc)
        report["mc"] = {}
        for name, router in variants:
            result = evaluation.eval_mc(model, registry, router, items)
            report["mc"][name] = result.to_json()
            print(f"mc accuracy[{name}] = {result.accuracy:.4f} "
                  f"({result.correct}/{result.total})")

    if args.shards:
        holdouts = evaluation.load_holdouts(args.shards)
        pairs = evaluation.per_expert_perplexity(model, registry, holdouts)
        report["per_expert_perplexity"] = [[t, p] for t, p in pairs]

    manifest_path = Path(args.adapters) / "manifest.jsonl"
    if manifest_path.exists():
        report["manifest"] = [e.to_json() for e in load_manifest(manifest_path)]

    _outpath(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"evaluation report -> {args.out}")
    return 0


def cmd_serve_sim(args) -> int:
    from .routing import load_decisions

    decisions = load_decisions(args.trace)
    topology = serving.Topology(
        num_nodes=args.nodes, cache_capacity=args.cache, policy=args.policy,
        cost_hit=args.cost_hit, cost_load=args.cost_load,
    )
    metrics = serving.simulate(decisions, topology)
    serving.save_metrics(metrics, _outpath(args.out))
    print(metrics.render())
    return 0


def cmd_report(args) -> int:
    eval_report = json.loads(Path(args.eval).read_text(encoding="utf-8"))
    topic_model = load_topic_model(args.topic_model)
    report: dict = {
        "perplexity": eval_report["perplexity"],
        "docs_per_topic": topic_model.doc_counts_.tolist(),
        "retained": topic_model.retained_.tolist(),
    }
    if eval_report.get("mc"):
        report["mc"] = eval_report["mc"]
    if eval_report.get("per_expert_perplexity"):
        report["per_expert_perplexity"] = eval_report["per_expert_perplexity"]
    if topic_model.keywords_ is not None:
        report["keywords"] = {
            str(t): topic_model.keywords_[t] for t in topic_model.retained_topics
        }
    if args.serving:
        report["serving"] = serving.load_metrics(args.serving).to_json()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = evaluation.render_report(report)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"report bundle -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topiclora",
        description="Per-topic LoRA experts over a frozen toy base model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a planted-topic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--docs-per-topic", type=int, default=300)
    p.add_argument("--val-docs-per-topic", type=int, default=30)
    p.add_argument("--vocab-per-topic", type=int, default=120)
    p.add_argument("--words-per-doc", type=int, default=60)
    p.add_argument("--mc-items-per-topic", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("ingest", help="validate and normalize a JSONL corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cluster", help="embed the corpus and fit the topic model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="topic model output path")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--min-docs", type=int, default=0, help="prune topics below this size")
    p.add_argument("--keywords", type=int, default=4, help="keywords per topic")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--ngram", type=int, default=3)
    p.add_argument("--hash-buckets", type=int, default=4096)
    p.add_argument("--projection-seed", type=int, default=0)
    p.add_argument("--embeddings-out", default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("pretrain", help="pretrain and freeze the toy base model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--context", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr-max", type=float, default=4e-4)
    p.add_argument("--lr-min", type=float, default=4e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one expert per retained topic")
    p.add_argument("--corpus", required=True)
    p.add_argument("--topic-model", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--base", default=None, help="frozen base model path")
    p.add_argument("--pretrain-steps", type=int, default=0,
                   help="pretrain the base inline when --base is not given")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--micro-batch", type=int, default=4)
    p.add_argument("--grad-accum", type=int, default=4)
    p.add_argument("--lr-max", type=float, default=4e-4)
    p.add_argument("--lr-min", type=float, default=4e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("route", help="route queries to experts")
    p.add_argument("--topic-model", required=True)
    p.add_argument("--mode", choices=["fallback", "always"], required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-query-chars", type=int, default=4096)
    p.add_argument("--inspect", type=int, default=0,
                   help="print routing inspection for the first N queries")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("eval", help="perplexity and multiple-choice evaluation")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--topic-model", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--mc", default=None)
    p.add_argument("--shards", default=None, help="shards dir with holdout files")
    p.add_argument("--out", required=True)
    p.add_argument("--max-query-chars", type=int, default=4096)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve-sim", help="replay a routing trace against a topology")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--cache", type=int, required=True)
    p.add_argument("--policy", choices=["hash", "rr", "balanced"], required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cost-hit", type=float, default=1.0)
    p.add_argument("--cost-load", type=float, default=10.0)
    p.set_defaults(func=cmd_serve_sim)

    p = sub.add_parser("report", help="assemble the final report bundle")
    p.add_argument("--eval", required=True)
    p.add_argument("--serving", default=None)
    p.add_argument("--topic-model", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
