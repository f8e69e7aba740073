"""Ranking, correlation and clustering metrics on plain arrays.

Ranking ties are always broken by ascending item id so results never depend
on sort stability or platform.
"""

from __future__ import annotations

import math
from typing import Hashable, Mapping, Sequence

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def rank_by_score(ids: Sequence[Hashable], scores: Sequence[float]) -> list:
    """Ids sorted by descending score, ties by ascending id."""
    return [i for _, i in sorted(zip(scores, ids), key=lambda t: (-t[0], t[1]))]


def dcg(gains: Sequence[float]) -> float:
    return float(sum(g / math.log2(r + 2) for r, g in enumerate(gains)))


def ndcg_at_k(ranking: Sequence, rels: Mapping, k: int = 10) -> float:
    """nDCG@k with gain ``2^rel - 1`` and ideal ordering taken from the judgments."""
    gains = [2.0 ** rels.get(d, 0) - 1.0 for d in ranking[:k]]
    ideal = sorted((2.0 ** r - 1.0 for r in rels.values()), reverse=True)[:k]
    best = dcg(ideal)
    return dcg(gains) / best if best > 0 else 0.0


def recall_at_k(ranking: Sequence, rels: Mapping, k: int = 100) -> float:
    relevant = {d for d, r in rels.items() if r > 0}
    if not relevant:
        return 0.0
    return len(relevant.intersection(ranking[:k])) / len(relevant)


def average_precision(relevance: Sequence[int]) -> float:
    """AP of a ranked list of binary relevance flags (0 if nothing is relevant)."""
    hits, total = 0, 0.0
    for r, flag in enumerate(relevance, start=1):
        if flag:
            hits += 1
            total += hits / r
    return total / hits if hits else 0.0


def mean_average_precision(lists: Sequence[Sequence[int]]) -> float:
    return float(np.mean([average_precision(r) for r in lists]))


def average_precision_from_scores(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AP of the list ranked by descending score, ties by ascending position."""
    order = rank_by_score(list(range(len(scores))), list(scores))
    return average_precision([labels[i] for i in order])


def best_threshold_accuracy(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Best accuracy of ``score > t`` over midpoints of consecutive unique scores.

    Thresholds just below the minimum and at the maximum are included, so the
    all-positive and all-negative predictions are always candidates.
    Returns ``(accuracy, threshold)``; the lowest threshold wins ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    u = np.unique(s)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1]]])
    best_acc, best_t = -1.0, float(cands[0])
    for t in cands:
        acc = float(np.mean((s > t) == y))
        if acc > best_acc:
            best_acc, best_t = acc, float(t)
    return best_acc, best_t


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if den == 0:
        raise MetricError("correlation is undefined for a constant input")
    return float(np.clip(np.dot(xc, yc) / den, -1.0, 1.0))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise MetricError("spearman needs equally long inputs")
    if len(x) < 2:
        raise MetricError("spearman needs at least two points")
    return pearson(average_ranks(x), average_ranks(y))


def contingency(labels_true: Sequence, labels_pred: Sequence) -> np.ndarray:
    classes = {c: i for i, c in enumerate(sorted(set(labels_true), key=str))}
    clusters = {c: i for i, c in enumerate(sorted(set(labels_pred), key=str))}
    table = np.zeros((len(classes), len(clusters)), dtype=np.int64)
    for a, b in zip(labels_true, labels_pred):
        table[classes[a], clusters[b]] += 1
    return table


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def homogeneity_completeness_v(labels_true: Sequence, labels_pred: Sequence,
                               beta: float = 1.0) -> tuple[float, float, float]:
    if len(labels_true) != len(labels_pred) or not len(labels_true):
        raise MetricError("need equally long, non-empty label sequences")
    table = contingency(labels_true, labels_pred)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    # conditional entropies H(C|K) and H(K|C)
    h_c_given_k = float(-np.sum(joint * np.log(table[nz] / table.sum(axis=0)[np.nonzero(nz)[1]])))
    h_k_given_c = float(-np.sum(joint * np.log(table[nz] / table.sum(axis=1)[np.nonzero(nz)[0]])))
    hom = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    com = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    if hom + com == 0:
        return hom, com, 0.0
    v = (1 + beta) * hom * com / (beta * hom + com)
    return hom, com, float(min(max(v, 0.0), 1.0))


def v_measure(labels_true: Sequence, labels_pred: Sequence) -> float:
    return homogeneity_completeness_v(labels_true, labels_pred)[2]
