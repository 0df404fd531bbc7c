"""Per-topic low-rank experts over a frozen toy language model.

The pipeline: tokenize a corpus, embed documents with hashed n-grams,
cluster them into topics, train one LoRA adapter per retained topic
against a frozen base transformer, route queries to the nearest centroid,
and evaluate/serve the resulting mixture.
"""

from .corpus import (
    BOS_ID, EOS_ID, VOCAB_SIZE, Corpus, Document, McItem, detokenize,
    load_corpus, load_mc_items, make_synthetic_corpus, make_synthetic_mc,
    save_corpus, save_mc_items, tokenize,
)
from .embedding import (
    HashedNgramEmbedder, hash_ngram, is_degenerate, load_embeddings,
    save_embeddings,
)
from .evaluation import (
    cross_perplexity_matrix, docs_per_topic, eval_mc, eval_perplexity,
    load_holdouts, per_expert_perplexity, render_docs_histogram,
    render_report, score_option,
)
from .lm import (
    ModelConfig, TinyCausalLM, base_checksum, cosine_lr, lm_loss, load_base,
    perplexity, pretrain, save_base,
)
from .lora import (
    AdapterRegistry, LoraAdapter, adapter_filename, init_adapter,
    load_adapter, lora_delta, merged_weight, save_adapter,
)
from .routing import (
    Router, RoutingDecision, RoutingMode, load_decisions, save_decisions,
    summarize_decisions,
)
from .serving import (
    NodeState, PlacementPolicy, ServingMetrics, Topology, load_metrics,
    place, save_metrics, simulate,
)
from .topics import (
    TopicKMeans, ctfidf_keywords, load_topic_model, save_topic_model,
    squared_distances,
)
from .training import (
    ManifestEntry, TopicShard, TrainRecipe, TrainReport, derive_seed,
    load_manifest, save_manifest, shard_corpus, split_for_validation,
    train_all, train_expert,
)

__version__ = "0.1.0"
