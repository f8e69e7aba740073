import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gteforge import tensor as T
from gteforge.checkpoint import Checkpoint, CheckpointError
from gteforge.data import Sampler, Source, SourceRegistry
from gteforge.encoder import Embedder, EncoderConfig, encode, tokenize_batch
from gteforge.objectives import improved_contrastive_loss
from gteforge.trainer import (
    OptimizerState,
    TrainConfig,
    TrainingError,
    adamw_step,
    finetune,
    initial_checkpoint,
    lr_at,
    model_from_checkpoint,
    pretrain,
    vocab_from_checkpoint,
    warmup_steps,
)

TOY = EncoderConfig(vocab_size=600, embed_dim=16, num_layers=1, num_heads=2, ffn_dim=32, max_seq_len=16)


@pytest.fixture(scope="module")
def pair_registry(world):
    return SourceRegistry([Source("para", "pair", world.pairs(120, seed=1)),
                           Source("copy", "pair", world.copy_pairs(60, seed=2))])


@pytest.fixture(scope="module")
def start(world_vocab):
    return initial_checkpoint(TOY, world_vocab, seed=0)


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    cfg = TrainConfig(total_steps=200, peak_lr=1e-3)
    w = math.ceil(0.05 * 200)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(200, cfg) == 0.0
    assert lr_at(w, cfg) == 1e-3
    assert lr_at(w // 2, cfg) == pytest.approx(0.5e-3, abs=1e-18)
    with pytest.raises(ValueError):
        lr_at(201, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_warmup_uses_exact_ceiling():
    # 0.05 * 60 evaluates to 3.0000000000000004 in binary floating point
    assert warmup_steps(TrainConfig(total_steps=60)) == 3
    assert warmup_steps(TrainConfig(total_steps=10)) == 1
    assert warmup_steps(TrainConfig(total_steps=1)) == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3000), st.floats(1e-6, 1.0))
def test_lr_piecewise_linear_with_peak_at_junction(total, peak):
    cfg = TrainConfig(total_steps=total, peak_lr=peak)
    lrs = np.array([lr_at(s, cfg) for s in range(total + 1)])
    w = warmup_steps(cfg)
    assert np.all(lrs >= 0) and lrs[-1] == 0.0
    if w < total:
        assert lrs.max() == peak == lrs[w]
        up, down = np.diff(lrs[: w + 1]), np.diff(lrs[w:])
        assert np.allclose(down, -peak / (total - w), rtol=1e-9, atol=0)
    else:  # ramp ends exactly at the final step, which is pinned to 0
        assert lrs.max() <= peak
        up = np.diff(lrs[:total])
    assert np.allclose(up, peak / w, rtol=1e-9, atol=0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(stage="midtrain")
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.5)


def test_finetune_defaults():
    pt = TrainConfig(peak_lr=2e-4, max_seq_len=128)
    ft = TrainConfig.finetune_defaults(pt)
    assert ft.stage == "finetune"
    assert ft.peak_lr == pytest.approx(2e-5, rel=1e-15)
    assert ft.max_seq_len == 512 and ft.group_size == 16
    assert TrainConfig.from_dict(ft.to_dict()) == ft


# ---------------------------------------------------------------- AdamW


def _scalar_param(value):
    return {"w": T.Tensor(np.array([value]), requires_grad=True)}


def test_adamw_zero_grad_no_decay_is_fixed_point():
    params = _scalar_param(1.5)
    state = OptimizerState.zeros_like(params)
    cfg = TrainConfig(weight_decay=0.0)
    for _ in range(3):
        adamw_step(params, {"w": np.zeros(1)}, state, 0.1, cfg)
    assert params["w"].data[0] == 1.5


def test_adamw_first_step_closed_form():
    theta, g, lr = 0.7, -0.3, 0.01
    cfg = TrainConfig(weight_decay=0.01)
    params = _scalar_param(theta)
    state = OptimizerState.zeros_like(params)
    adamw_step(params, {"w": np.array([g])}, state, lr, cfg)
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g * g / (1 - 0.999)
    expected = theta * (1 - lr * 0.01) - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert params["w"].data[0] == pytest.approx(expected, abs=1e-15)
    # essentially -lr * sign(g) plus the decay term
    assert params["w"].data[0] == pytest.approx(theta * (1 - lr * 0.01) + lr, abs=1e-9)
    assert state.step == 1


def test_adamw_second_step_recurrence():
    cfg = TrainConfig(weight_decay=0.0)
    params = _scalar_param(0.0)
    state = OptimizerState.zeros_like(params)
    g1, g2, lr = 0.5, -2.0, 0.1
    adamw_step(params, {"w": np.array([g1])}, state, lr, cfg)
    after1 = params["w"].data[0]
    adamw_step(params, {"w": np.array([g2])}, state, lr, cfg)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    expected = after1 - lr * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert params["w"].data[0] == pytest.approx(expected, abs=1e-14)


def test_adamw_decoupled_decay_in_isolation():
    cfg = TrainConfig(weight_decay=0.1)
    params = _scalar_param(2.0)
    state = OptimizerState.zeros_like(params)
    adamw_step(params, {"w": np.zeros(1)}, state, 0.01, cfg)
    assert params["w"].data[0] == pytest.approx(2.0 - 0.01 * 0.1 * 2.0, abs=1e-16)


def test_adamw_rejects_non_finite_gradient():
    params = {"layer0.ffn.w1": T.Tensor(np.ones(2), requires_grad=True)}
    state = OptimizerState.zeros_like(params)
    with pytest.raises(TrainingError, match="layer0.ffn.w1"):
        adamw_step(params, {"layer0.ffn.w1": np.array([1.0, np.nan])}, state, 0.1, TrainConfig())
    assert np.all(params["layer0.ffn.w1"].data == 1.0)


def test_optimizer_moments_mirror_parameters(start):
    model = model_from_checkpoint(start)
    state = OptimizerState.zeros_like(model.params)
    assert all(state.m[k].shape == p.shape == state.v[k].shape for k, p in model.params.items())


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bytes(start, pair_registry, tmp_path):
    ckpt = pretrain(TrainConfig(total_steps=3, batch_size=4, max_seq_len=16), pair_registry, start)
    ckpt.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    loaded.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    texts = ["alpha beta", "the of a", ""]
    e1 = Embedder(model_from_checkpoint(ckpt), vocab_from_checkpoint(ckpt))(texts)
    e2 = Embedder(model_from_checkpoint(loaded), vocab_from_checkpoint(loaded))(texts)
    assert np.array_equal(e1, e2)


def test_checkpoint_layout(start):
    blob = start.to_bytes()
    assert blob[:4] == b"GTEF"
    assert int.from_bytes(blob[4:8], "little") == 1


def test_checkpoint_corruption_detected(start, tmp_path):
    blob = start.to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(blob[:20])
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "missing.ckpt")


# ---------------------------------------------------------------- training loops


def test_zero_step_pretrain_is_identity(start, pair_registry):
    out = pretrain(TrainConfig(total_steps=0, max_seq_len=16), pair_registry, start)
    assert out.loss_log == []
    assert all(np.array_equal(out.params[k], start.params[k]) for k in start.params)


def test_zero_step_finetune_is_identity(start, world):
    reg = SourceRegistry([Source("tri", "triple", world.triples(20, seed=3))])
    out = finetune(TrainConfig(stage="finetune", total_steps=0, max_seq_len=16), start, reg)
    assert all(np.array_equal(out.params[k], start.params[k]) for k in start.params)


def test_pretrain_deterministic(start, pair_registry):
    cfg = TrainConfig(total_steps=4, batch_size=4, max_seq_len=16, seed=9)
    assert pretrain(cfg, pair_registry, start).to_bytes() == pretrain(cfg, pair_registry, start).to_bytes()


def test_pretrain_records_schedule_and_metadata(start, pair_registry):
    cfg = TrainConfig(total_steps=5, batch_size=4, max_seq_len=16)
    out = pretrain(cfg, pair_registry, start)
    assert [row[0] for row in out.loss_log] == list(range(5))
    assert [row[2] for row in out.loss_log] == [lr_at(s, cfg) for s in range(5)]
    assert out.step == 5 and out.stage == "pretrain"
    assert out.optimizer["step"] == 5
    assert out.sampler["draws"] == 5
    assert out.extra["epoch_fraction"] == pytest.approx(5 * 4 / 180)


def test_pretrain_needs_pair_source(start, world):
    reg = SourceRegistry([Source("tri", "triple", world.triples(5, seed=3))])
    with pytest.raises(TrainingError):
        pretrain(TrainConfig(total_steps=1, max_seq_len=16), reg, start)


def test_stage_seq_len_cannot_exceed_encoder(start, pair_registry):
    with pytest.raises(TrainingError):
        pretrain(TrainConfig(total_steps=1, max_seq_len=32), pair_registry, start)


def test_group_size_one_matches_direct_improved_loss(start, world):
    triples = world.triples(30, seed=4)
    reg = SourceRegistry([Source("tri", "triple", triples)])
    cfg = TrainConfig(stage="finetune", total_steps=1, batch_size=6, group_size=1, max_seq_len=16, seed=2)
    out = finetune(cfg, start, reg)
    batch = Sampler(reg, cfg.alpha, cfg.seed, "finetune").next_batch(cfg.batch_size)
    model = model_from_checkpoint(start)
    vocab = vocab_from_checkpoint(start)
    q = encode(model, *tokenize_batch([r.query for r in batch.records], vocab, 16))
    d = encode(model, *tokenize_batch([r.pos for r in batch.records], vocab, 16))
    direct = improved_contrastive_loss(q, d, cfg.temperature).item()
    assert abs(out.loss_log[0][1] - direct) < 1e-9


def test_finetune_history_records_previous_stage(start, pair_registry, world):
    pt = pretrain(TrainConfig(total_steps=2, batch_size=4, max_seq_len=16), pair_registry, start)
    reg = SourceRegistry([Source("tri", "triple", world.triples(20, seed=3))])
    ft = finetune(TrainConfig(stage="finetune", total_steps=2, batch_size=2, group_size=4, max_seq_len=16),
                  pt, reg)
    assert ft.extra["history"] == [{"stage": "pretrain", "steps": 2}]
    assert ft.train_config["stage"] == "finetune"


def _mean(log, sl):
    return float(np.mean([row[1] for row in log[sl]]))


def test_copy_pair_loss_starts_at_floor(world, world_vocab):
    """Identical query and doc give s(q_i, d_i) = 1, the largest possible similarity.

    With the positive counted twice in Z the loss can never go below ln 2,
    and an untrained encoder already sits within 1e-6 of it on copy pairs.
    """
    reg = SourceRegistry([Source("copy", "pair", world.copy_pairs(300, seed=5))])
    start = initial_checkpoint(TOY, world_vocab, seed=1)
    out = pretrain(TrainConfig(total_steps=10, peak_lr=0.0, batch_size=16, max_seq_len=16, seed=1), reg, start)
    losses = np.array([row[1] for row in out.loss_log])
    assert np.all(losses >= math.log(2) - 1e-12)
    assert np.all(losses - math.log(2) < 1e-6)


@pytest.mark.slow
def test_copy_pair_descent(world, world_vocab):
    reg = SourceRegistry([Source("copy", "pair", world.copy_pairs(300, seed=5))])
    start = initial_checkpoint(TOY, world_vocab, seed=1)
    out = pretrain(TrainConfig(total_steps=200, batch_size=16, max_seq_len=16, seed=1), reg, start)
    assert _mean(out.loss_log, slice(-10, None)) < _mean(out.loss_log, slice(0, 10))


@pytest.mark.slow
def test_copy_pair_loss_halves_within_500_steps(world, world_vocab):
    reg = SourceRegistry([Source("copy", "pair", world.copy_pairs(500, seed=6))])
    start = initial_checkpoint(TOY, world_vocab, seed=2)
    out = pretrain(TrainConfig(total_steps=500, batch_size=16, max_seq_len=16, seed=2), reg, start)
    assert _mean(out.loss_log, slice(0, 10)) >= 2 * _mean(out.loss_log, slice(-10, None))


@pytest.mark.slow
@pytest.mark.parametrize("variant,dedupe", [("vanilla_infonce", False), ("improved", True)])
def test_copy_pair_loss_halves_when_floor_is_zero(world, world_vocab, variant, dedupe):
    # both variants count the positive once, so a perfect encoder reaches loss 0
    reg = SourceRegistry([Source("copy", "pair", world.copy_pairs(500, seed=6))])
    start = initial_checkpoint(TOY, world_vocab, seed=2)
    cfg = TrainConfig(total_steps=500, batch_size=16, max_seq_len=16, seed=2, temperature=0.1,
                      loss_variant=variant, dedupe_positive_in_z=dedupe)
    out = pretrain(cfg, reg, start)
    assert _mean(out.loss_log, slice(0, 10)) >= 2 * _mean(out.loss_log, slice(-10, None))


@pytest.mark.slow
def test_finetune_descent_with_noise_negatives(world, world_vocab):
    reg = SourceRegistry([Source("tri", "triple", world.triples(200, seed=7, hard_negatives=3,
                                                                noise_negatives=True))])
    start = initial_checkpoint(TOY, world_vocab, seed=3)
    cfg = TrainConfig(stage="finetune", total_steps=200, batch_size=4, group_size=4,
                      max_seq_len=16, peak_lr=1e-3, seed=3)
    out = finetune(cfg, start, reg)
    assert _mean(out.loss_log, slice(-10, None)) < _mean(out.loss_log, slice(0, 10))


def test_grad_clipping_option(start, pair_registry):
    cfg = TrainConfig(total_steps=2, batch_size=4, max_seq_len=16, max_grad_norm=1e-3)
    clipped = pretrain(cfg, pair_registry, start)
    free = pretrain(replace(cfg, max_grad_norm=None), pair_registry, start)
    assert clipped.loss_log[0] == free.loss_log[0]
    assert not np.array_equal(clipped.params["tok_emb"], free.params["tok_emb"])
