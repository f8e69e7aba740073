"""Embedding-task evaluators.

Every evaluator takes ``embed``, any callable mapping a list of texts to an
``[N, d]`` array, so the same code scores a live model or a cached export.
"""

from __future__ import annotations

import logging
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import metrics as M
from .probes import LogisticRegression, MiniBatchKMeans, SCORE_DECIMALS, accuracy, cosine_matrix, unit_rows

log = logging.getLogger(__name__)

Embed = Callable[[Sequence[str]], np.ndarray]


class TaskInputError(ValueError):
    """The task data violates an evaluator precondition."""


def _embed_unique(embed: Embed, texts: Sequence[str]) -> dict:
    uniq = list(dict.fromkeys(texts))
    vecs = np.asarray(embed(uniq), dtype=np.float64)
    if vecs.shape[0] != len(uniq):
        raise TaskInputError("embedder returned the wrong number of rows")
    return dict(zip(uniq, vecs))


def _pair_cosines(embed: Embed, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
    table = _embed_unique(embed, [t for p in pairs for t in p])
    a = unit_rows([table[p[0]] for p in pairs])
    b = unit_rows([table[p[1]] for p in pairs])
    return np.round(np.sum(a * b, axis=1), SCORE_DECIMALS)


# ---------------------------------------------------------------- retrieval


def retrieval_metrics(query_vecs: np.ndarray, query_ids: Sequence[str], doc_vecs: np.ndarray,
                      doc_ids: Sequence[str], qrels: Mapping[str, Mapping[str, int]],
                      k_values: Sequence[int] = (10, 100)) -> dict:
    """Mean nDCG@k and Recall@k over judged queries, ranking by cosine similarity."""
    if len(doc_ids) == 0:
        raise TaskInputError("retrieval corpus is empty")
    sims = cosine_matrix(query_vecs, doc_vecs)
    per_k = {k: ([], []) for k in k_values}
    used = 0
    depth = max(k_values)
    order_ids = np.array(doc_ids, dtype=object)
    # sort once by id so a stable sort on -score breaks ties by ascending id
    by_id = np.argsort(order_ids.astype(str), kind="stable")
    for qi, qid in enumerate(query_ids):
        rels = qrels.get(qid, {})
        if not any(r > 0 for r in rels.values()):
            log.warning("query %s has no relevant judgments; skipped", qid)
            continue
        used += 1
        s = sims[qi][by_id]
        top = by_id[np.argsort(-s, kind="stable")[:depth]]
        ranking = [doc_ids[i] for i in top]
        for k in k_values:
            per_k[k][0].append(M.ndcg_at_k(ranking, rels, k))
            per_k[k][1].append(M.recall_at_k(ranking, rels, k))
    if not used:
        raise TaskInputError("no query has a relevant judgment")
    out = {"num_queries": used}
    for k in k_values:
        out[f"ndcg@{k}"] = float(np.mean(per_k[k][0]))
        out[f"recall@{k}"] = float(np.mean(per_k[k][1]))
    return out


def eval_retrieval(embed: Embed, corpus: Mapping[str, str], queries: Mapping[str, str],
                   qrels: Mapping[str, Mapping[str, int]], k_values: Sequence[int] = (10, 100)) -> dict:
    if not corpus:
        raise TaskInputError("retrieval corpus is empty")
    doc_ids = list(corpus)
    query_ids = list(queries)
    dv = np.asarray(embed([corpus[i] for i in doc_ids]))
    qv = np.asarray(embed([queries[i] for i in query_ids]))
    return retrieval_metrics(qv, query_ids, dv, doc_ids, qrels, k_values)


# ---------------------------------------------------------------- probes


def eval_classification(embed: Embed, train_texts: Sequence[str], train_labels: Sequence,
                        test_texts: Sequence[str], test_labels: Sequence,
                        C: float = 1.0, max_iter: int = 100) -> dict:
    """Linear probe accuracy; a test label never seen in training can only be wrong."""
    if len(set(train_labels)) < 2:
        raise TaskInputError("classification needs at least two training classes")
    table = _embed_unique(embed, list(train_texts) + list(test_texts))
    clf = LogisticRegression(C=C, max_iter=max_iter)
    clf.fit(np.array([table[t] for t in train_texts]), list(train_labels))
    pred = clf.predict(np.array([table[t] for t in test_texts]))
    return {"accuracy": accuracy(pred, list(test_labels))}


def eval_clustering(embed: Embed, texts: Sequence[str], labels: Sequence, k: Optional[int] = None,
                    batch_size: int = 32, max_iter: int = 100, seed: int = 0) -> dict:
    k = len(set(labels)) if k is None else k
    if k < 2:
        raise TaskInputError("clustering needs at least two distinct labels")
    if len(texts) < k:
        raise TaskInputError(f"{len(texts)} texts cannot form {k} clusters")
    table = _embed_unique(embed, texts)
    X = np.array([table[t] for t in texts])
    assign = MiniBatchKMeans(k, batch_size=batch_size, max_iter=max_iter, seed=seed).fit_predict(X)
    hom, com, v = M.homogeneity_completeness_v(list(labels), assign.tolist())
    return {"v_measure": v, "homogeneity": hom, "completeness": com}


# ---------------------------------------------------------------- reranking and pairs


def eval_reranking(embed: Embed, samples: Sequence[Mapping]) -> dict:
    """MAP over ``{"query", "positive": [...], "negative": [...]}`` samples.

    Candidates are ranked by cosine similarity; ties keep candidate order
    (positives listed first).
    """
    texts = []
    for s in samples:
        texts.append(s["query"])
        texts.extend(s["positive"])
        texts.extend(s["negative"])
    table = _embed_unique(embed, texts)
    aps = []
    for s in samples:
        if not s["positive"]:
            log.warning("reranking sample without positives skipped: %.40r", s["query"])
            continue
        cands = list(s["positive"]) + list(s["negative"])
        flags = [1] * len(s["positive"]) + [0] * len(s["negative"])
        scores = cosine_matrix([table[c] for c in cands], [table[s["query"]]])[:, 0]
        order = M.rank_by_score(list(range(len(cands))), scores.tolist())
        aps.append(M.average_precision([flags[i] for i in order]))
    if not aps:
        raise TaskInputError("no reranking sample has a positive candidate")
    return {"map": float(np.mean(aps)), "num_queries": len(aps)}


def eval_pair_classification(embed: Embed, pairs: Sequence[tuple[str, str]], labels: Sequence[int]) -> dict:
    y = [int(bool(v)) for v in labels]
    if len(set(y)) < 2:
        raise TaskInputError("pair classification needs both classes present")
    scores = _pair_cosines(embed, pairs)
    acc, thr = M.best_threshold_accuracy(scores, y)
    return {"ap": M.average_precision_from_scores(scores.tolist(), y), "accuracy": acc, "threshold": thr}


# ---------------------------------------------------------------- correlations


def eval_sts(embed: Embed, pairs: Sequence[tuple[str, str]], gold: Sequence[float]) -> dict:
    if len(pairs) < 3 or len(pairs) != len(gold):
        raise TaskInputError("STS needs at least three scored pairs")
    scores = _pair_cosines(embed, pairs)
    try:
        rho = M.spearman(scores, gold)
    except M.MetricError as exc:
        raise TaskInputError(str(exc)) from None
    return {"spearman": rho}


def eval_summarization(embed: Embed, summaries: Sequence[str], references: Sequence[Sequence[str]],
                       human_scores: Sequence[float]) -> dict:
    """Spearman between human scores and each summary's best reference cosine."""
    if any(len(r) == 0 for r in references):
        raise TaskInputError("every summary needs at least one reference")
    if not len(summaries) == len(references) == len(human_scores):
        raise TaskInputError("summaries, references and scores must align")
    table = _embed_unique(embed, list(summaries) + [t for refs in references for t in refs])
    quality = []
    for summ, refs in zip(summaries, references):
        quality.append(float(np.max(cosine_matrix([table[summ]], [table[r] for r in refs]))))
    try:
        rho = M.spearman(quality, human_scores)
    except M.MetricError as exc:
        raise TaskInputError(str(exc)) from None
    return {"spearman": rho, "quality": quality}


# ---------------------------------------------------------------- zero-shot


def zero_shot_classify(embed: Embed, texts: Sequence[str], labels: Sequence[str],
                       verbalizers: Sequence[str], gold: Optional[Sequence[str]] = None,
                       normalize: bool = True) -> dict:
    """Predict the label whose verbalizer has the largest inner product with the text.

    Verbalizers may be bare words (``"positive"``) or full prompts
    (``"this is an example of positive movie review"``); both are just texts.
    """
    if len(labels) < 2 or len(labels) != len(verbalizers):
        raise TaskInputError("need at least two labels, each with one verbalizer")
    if len(set(verbalizers)) != len(verbalizers):
        raise TaskInputError("verbalizers must be distinct")
    if any(not v.strip() for v in verbalizers):
        raise TaskInputError("verbalizers must be non-empty")
    table = _embed_unique(embed, list(texts) + list(verbalizers))
    X = np.array([table[t] for t in texts])
    V = np.array([table[v] for v in verbalizers])
    scores = cosine_matrix(X, V) if normalize else X @ V.T
    pred = [labels[i] for i in np.argmax(scores, axis=1)]
    out = {"predictions": pred}
    if gold is not None:
        out["accuracy"] = accuracy(pred, list(gold))
    return out
