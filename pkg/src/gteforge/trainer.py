"""Two-stage contrastive training: in-batch pre-training, then grouped fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Sampler, SourceRegistry, build_finetune_group
from .encoder import EncoderConfig, EncoderModel, Vocabulary, encode, tokenize_batch
from .objectives import LOSS_VARIANTS, LossConfig, contrastive_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training stage.

    Defaults are toy scale.  The reference scale is batch 16384 for 50k steps
    with lr 2e-4 (base) when pre-training, and batch 128 with groups of 16 and
    a tenfold smaller lr when fine-tuning.
    """

    stage: str = "pretrain"
    total_steps: int = 500
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.05
    batch_size: int = 32
    group_size: int = 16
    max_seq_len: int = 128
    temperature: float = 0.01
    alpha: float = 0.5
    loss_variant: str = "improved"
    dedupe_positive_in_z: bool = False
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie strictly between 0 and 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1 or self.group_size < 1 or self.max_seq_len < 2:
            raise ValueError("batch_size, group_size >= 1 and max_seq_len >= 2 required")
        if not self.peak_lr >= 0 or not self.temperature > 0:
            raise ValueError("peak_lr must be >= 0 and temperature > 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive when set")

    @classmethod
    def finetune_defaults(cls, pretrain: "TrainConfig", **overrides) -> "TrainConfig":
        """Fine-tuning stage derived from a pre-training config: lr / 10, seq len 512."""
        base = replace(pretrain, stage="finetune", peak_lr=pretrain.peak_lr / 10, max_seq_len=512)
        return replace(base, **overrides)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature, self.loss_variant, self.dedupe_positive_in_z)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def warmup_steps(config: TrainConfig) -> int:
    # exact decimal arithmetic: 0.05 * 60 is 3.0000000000000004 in floats
    return max(1, math.ceil(Fraction(repr(config.warmup_fraction)) * config.total_steps))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` over the first 5% of steps, then linear decay to 0."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    w = warmup_steps(config)
    if step >= total:
        return 0.0
    # ratio first, so the junction yields peak_lr * 1.0 exactly
    if step <= w:
        return config.peak_lr * (step / w)
    return config.peak_lr * ((total - step) / (total - w))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})

    def to_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, config: TrainConfig) -> None:
    """One AdamW update with decoupled weight decay and bias correction, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise TrainingError(f"shape mismatch for parameter {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def _clip(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def initial_checkpoint(encoder_config: EncoderConfig, vocab: Vocabulary, seed: int = 0) -> Checkpoint:
    if len(vocab) > encoder_config.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} tokens but vocab_size is {encoder_config.vocab_size}")
    model = EncoderModel.init(encoder_config, seed)
    return Checkpoint(encoder_config.to_dict(), {k: p.data.copy() for k, p in model.params.items()},
                      list(vocab.tokens), extra={"init_seed": seed})


def model_from_checkpoint(ckpt: Checkpoint) -> EncoderModel:
    cfg = EncoderConfig.from_dict(ckpt.encoder_config)
    params = {k: T.Tensor(v.copy(), requires_grad=True, name=k) for k, v in ckpt.params.items()}
    return EncoderModel(cfg, params)


def vocab_from_checkpoint(ckpt: Checkpoint) -> Vocabulary:
    return Vocabulary(ckpt.vocab)


def pair_batch_loss(model, vocab, records, config: TrainConfig) -> T.Tensor:
    q_ids, q_mask = tokenize_batch([r.query for r in records], vocab, config.max_seq_len)
    d_ids, d_mask = tokenize_batch([r.doc for r in records], vocab, config.max_seq_len)
    Q = encode(model, q_ids, q_mask)
    D = encode(model, d_ids, d_mask)
    return contrastive_loss(Q, D, config.loss_config())


def group_batch_loss(model, vocab, queries, groups, config: TrainConfig) -> T.Tensor:
    """Loss over queries and their flattened train groups (positive first in each)."""
    q_ids, q_mask = tokenize_batch(queries, vocab, config.max_seq_len)
    flat = [t for g in groups for t in g]
    g_ids, g_mask = tokenize_batch(flat, vocab, config.max_seq_len)
    Q = encode(model, q_ids, q_mask)
    G = encode(model, g_ids, g_mask)
    return contrastive_loss(Q, G, config.loss_config(), group_size=len(groups[0]))


def source_corpus(records) -> list[str]:
    """Distinct positive and negative texts of a triple source, first-seen order."""
    return list(dict.fromkeys(t for r in records for t in (r.pos, *r.negs)))


def _train(config: TrainConfig, start: Checkpoint, registry: SourceRegistry, kind: str,
           on_step: Optional[Callable] = None) -> Checkpoint:
    model = model_from_checkpoint(start)
    vocab = vocab_from_checkpoint(start)
    if config.max_seq_len > model.config.max_seq_len:
        raise TrainingError(
            f"stage max_seq_len {config.max_seq_len} exceeds encoder max_seq_len {model.config.max_seq_len}"
        )
    sources = registry.of_kind(kind)
    if len(sources) == 0:
        raise TrainingError(f"{config.stage} needs at least one {kind} source")
    sampler = Sampler(sources, config.alpha, config.seed, config.stage)
    corpora = {s.name: source_corpus(s.records) for s in sources} if kind == "triple" else {}
    opt = OptimizerState.zeros_like(model.params)
    loss_log = []

    for step in range(config.total_steps):
        lr = lr_at(step, config)
        batch = sampler.next_batch(config.batch_size)
        with T.Tape() as tape:
            if kind == "pair":
                loss = pair_batch_loss(model, vocab, batch.records, config)
            else:
                rng = np.random.default_rng([config.seed, step, 1])
                groups = [build_finetune_group(r, corpora[batch.source], config.group_size, rng)
                          for r in batch.records]
                loss = group_batch_loss(model, vocab, [r.query for r in batch.records], groups, config)
            tape.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in model.params.items()}
        if config.max_grad_norm is not None:
            _clip(grads, config.max_grad_norm)
        adamw_step(model.params, grads, opt, lr, config)
        model.zero_grad()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss became non-finite at step {step}")
        loss_log.append([step, value, lr])
        if on_step is not None:
            on_step(step, value, lr)
        log.debug("%s step %d loss %.6f lr %.3g", config.stage, step, value, lr)

    history = list(start.extra.get("history", []))
    if start.train_config is not None:
        history.append({"stage": start.stage, "steps": start.step})
    extra = dict(start.extra)
    extra["history"] = history
    extra["epoch_fraction"] = config.total_steps * config.batch_size / sources.total_records()
    return Checkpoint(
        encoder_config=start.encoder_config,
        params={k: p.data.copy() for k, p in model.params.items()},
        vocab=list(start.vocab),
        step=config.total_steps,
        stage=config.stage,
        train_config=config.to_dict(),
        optimizer=opt.to_dict(),
        sampler=sampler.state.to_dict(),
        loss_log=loss_log,
        extra=extra,
    )


def pretrain(config: TrainConfig, registry: SourceRegistry, start: Checkpoint,
             on_step: Optional[Callable] = None) -> Checkpoint:
    """Contrastive pre-training on pair sources with in-batch negatives only."""
    if config.stage != "pretrain":
        config = replace(config, stage="pretrain")
    return _train(config, start, registry, "pair", on_step)


def finetune(config: TrainConfig, checkpoint: Checkpoint, registry: SourceRegistry,
             on_step: Optional[Callable] = None) -> Checkpoint:
    """Supervised fine-tuning on triple sources with hard-negative train groups."""
    if config.stage != "finetune":
        config = replace(config, stage="finetune")
    return _train(config, checkpoint, registry, "triple", on_step)
