"""Embedding evaluation: retrieval, probes, clustering, reranking, pairs, STS, zero-shot."""

from .embeddings import EmbeddingMatrix, LookupEmbedder
from .metrics import (
    average_precision,
    mean_average_precision,
    ndcg_at_k,
    recall_at_k,
    spearman,
    v_measure,
)
from .report import EvalReport, run_task
from .tasks import (
    eval_classification,
    eval_clustering,
    eval_pair_classification,
    eval_reranking,
    eval_retrieval,
    eval_sts,
    eval_summarization,
    zero_shot_classify,
)

__all__ = [
    "EmbeddingMatrix", "LookupEmbedder", "EvalReport", "run_task",
    "average_precision", "mean_average_precision", "ndcg_at_k", "recall_at_k", "spearman", "v_measure",
    "eval_classification", "eval_clustering", "eval_pair_classification", "eval_reranking",
    "eval_retrieval", "eval_sts", "eval_summarization", "zero_shot_classify",
]
