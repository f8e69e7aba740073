"""Cosine similarity and the contrastive objectives used in both training stages.

All losses take raw (unnormalized) embedding tensors and are differentiable
with respect to them.  Similarities are divided by a temperature and reduced
with a single stabilized logsumexp per query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, DomainError, Tensor

DEFAULT_TEMPERATURE = 0.01
LOSS_VARIANTS = ("improved", "vanilla_infonce")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = DEFAULT_TEMPERATURE
    variant: str = "improved"
    # count the positive q_i.d_i term once in Z instead of twice
    dedupe_positive_in_z: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {LOSS_VARIANTS}")


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-d tensor to unit L2 norm."""
    x = T._as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d tensor, got shape {x.shape}")
    if x.shape[1] == 0:
        raise DomainError("cannot normalize empty vectors")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))
    if np.any(norms == 0):
        raise DomainError("zero-norm vector has no cosine similarity")
    sq = T.sum(x * x, axis=1, keepdims=True)
    return x / T.broadcast_to(T.sqrt(sq), x.shape)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity, ``[n, d] x [m, d] -> [n, m]``."""
    a, b = T._as_tensor(a), T._as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    return T.matmul(normalize_rows(a), T.transpose(normalize_rows(b)))


def cosine_similarity(q, d) -> Tensor:
    """``q.d / (|q| |d|)`` for two vectors, as a scalar tensor."""
    q, d = T._as_tensor(q), T._as_tensor(d)
    if q.ndim != 1 or q.shape != d.shape:
        raise DimensionError(f"cosine_similarity: need equal 1-d shapes, got {q.shape} and {d.shape}")
    s = cosine_matrix(T.reshape(q, (1, -1)), T.reshape(d, (1, -1)))
    return T.reshape(s, ())


def infonce_loss(q, d_pos, negs, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Single-query InfoNCE with an explicit negative list.

    ``-log(e^{s+/t} / (e^{s+/t} + sum_i e^{s_i/t}))``; zero negatives give 0.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    q, d_pos = T._as_tensor(q), T._as_tensor(d_pos)
    if q.ndim != 1 or q.size == 0:
        raise DomainError("infonce_loss: query must be a non-empty vector")
    docs = [T.reshape(d_pos, (1, -1))] + [T.reshape(T._as_tensor(n), (1, -1)) for n in negs]
    sims = cosine_matrix(T.reshape(q, (1, -1)), T.concat(docs, axis=0))
    logits = T.scale(T.reshape(sims, (-1,)), 1.0 / temperature)
    return T.logsumexp(logits, axis=0) - logits[0]


def vanilla_inbatch_loss(Q, D, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Query-to-document InfoNCE with the other in-batch documents as negatives.

    ``D`` may hold more rows than ``Q`` (e.g. grouped hard negatives); the
    positive for query ``i`` is row ``i * (len(D) // len(Q))``.
    """
    Q, D = T._as_tensor(Q), T._as_tensor(D)
    n = Q.shape[0]
    if n == 0 or D.shape[0] % n:
        raise DimensionError(f"vanilla_inbatch_loss: {D.shape[0]} documents for {n} queries")
    g = D.shape[0] // n
    logits = T.scale(cosine_matrix(Q, D), 1.0 / temperature)
    pos = logits[np.arange(n), np.arange(n) * g]
    return T.mean(T.logsumexp(logits, axis=1) - pos)


def _off_diagonal(s: Tensor) -> Tensor:
    """``[n, n] -> [n, n-1]``, dropping the diagonal of each row."""
    n = s.shape[0]
    if n == 1:
        return None
    cols = np.array([[j for j in range(n) if j != i] for i in range(n)])
    rows = np.repeat(np.arange(n)[:, None], n - 1, axis=1)
    return s[rows, cols]


def improved_partition_logits(Q, D, temperature: float = DEFAULT_TEMPERATURE, extra_docs=None,
                              dedupe_positive_in_z: bool = False) -> tuple[Tensor, Tensor]:
    """Per-query logit rows whose logsumexp is ``log Z_i``, plus the positive logits.

    Row ``i`` concatenates ``s(q_i, d_j)`` for all j, ``s(q_i, q_j)`` for j != i,
    ``s(q_j, d_i)`` for all j and ``s(d_j, d_i)`` for j != i.  Each row ``x``
    of ``extra_docs`` (``[m, d]``) appends one more ``s(q_i, x)``.
    """
    Q, D = T._as_tensor(Q), T._as_tensor(D)
    if Q.ndim != 2 or Q.shape != D.shape:
        raise DimensionError(f"improved loss: Q {Q.shape} and D {D.shape} must be equal 2-d shapes")
    n = Q.shape[0]
    if n == 0:
        raise DimensionError("improved loss: empty batch")
    inv = 1.0 / temperature
    Qn, Dn = normalize_rows(Q), normalize_rows(D)
    s_qd = T.scale(T.matmul(Qn, T.transpose(Dn)), inv)
    s_qq = T.scale(T.matmul(Qn, T.transpose(Qn)), inv)
    s_dd = T.scale(T.matmul(Dn, T.transpose(Dn)), inv)
    pos = s_qd[np.arange(n), np.arange(n)]

    blocks = [s_qd]
    qq = _off_diagonal(s_qq)
    if qq is not None:
        blocks.append(qq)
    reverse = T.transpose(s_qd)  # row i holds s(q_j, d_i)
    if dedupe_positive_in_z:
        reverse = _off_diagonal(reverse)
    if reverse is not None:
        blocks.append(reverse)
    dd = _off_diagonal(T.transpose(s_dd))
    if dd is not None:
        blocks.append(dd)
    if extra_docs is not None:
        X = T._as_tensor(extra_docs)
        if X.ndim != 2 or X.shape[1] != Q.shape[1]:
            raise DimensionError(f"extra documents {X.shape} do not match embedding width {Q.shape[1]}")
        blocks.append(T.scale(T.matmul(Qn, T.transpose(normalize_rows(X))), inv))
    return T.concat(blocks, axis=1), pos


def improved_contrastive_loss(Q, D, temperature: float = DEFAULT_TEMPERATURE,
                              dedupe_positive_in_z: bool = False) -> Tensor:
    """Bidirectional in-batch loss with query-query and doc-doc negatives.

    ``L = -(1/n) sum_i log(e^{s(q_i,d_i)/t} / Z_i)``; with the printed
    partition the positive enters ``Z_i`` twice, so ``n = 1`` gives ``ln 2``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits, pos = improved_partition_logits(Q, D, temperature, dedupe_positive_in_z=dedupe_positive_in_z)
    return T.mean(T.logsumexp(logits, axis=1) - pos)


def finetune_group_loss(Q, G, group_size: int, temperature: float = DEFAULT_TEMPERATURE,
                        dedupe_positive_in_z: bool = False) -> Tensor:
    """Improved loss over a batch of train groups.

    ``G`` stacks ``n`` groups of ``group_size`` documents, positive first.
    The positives play the role of ``D`` in the improved partition and each
    query additionally contrasts against every non-positive group document in
    the batch (its own hard negatives and everyone else's).
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    Q, G = T._as_tensor(Q), T._as_tensor(G)
    if group_size < 1:
        raise DimensionError("train group must hold at least the positive")
    n = Q.shape[0]
    if G.ndim != 2 or G.shape[0] != n * group_size:
        raise DimensionError(f"expected {n} groups of {group_size} documents, got shape {G.shape}")
    starts = np.arange(n) * group_size
    D = G[starts]
    extra = None
    if group_size > 1:
        rest = np.array([i for i in range(n * group_size) if i % group_size])
        extra = G[rest]
    logits, pos = improved_partition_logits(Q, D, temperature, extra_docs=extra,
                                            dedupe_positive_in_z=dedupe_positive_in_z)
    return T.mean(T.logsumexp(logits, axis=1) - pos)


def contrastive_loss(Q, D, config: LossConfig, group_size: int = 1) -> Tensor:
    """Dispatch on ``config.variant``; ``D`` holds ``group_size`` rows per query."""
    if config.variant == "vanilla_infonce":
        return vanilla_inbatch_loss(Q, D, config.temperature)
    if group_size == 1:
        return improved_contrastive_loss(Q, D, config.temperature, config.dedupe_positive_in_z)
    return finetune_group_loss(Q, D, group_size, config.temperature, config.dedupe_positive_in_z)
