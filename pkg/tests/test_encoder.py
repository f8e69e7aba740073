import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from gteforge import tensor as T
from gteforge.encoder import (
    BOS_ID,
    PAD_ID,
    UNK_ID,
    Embedder,
    EncoderConfig,
    EncoderModel,
    InputError,
    Vocabulary,
    build_vocab,
    encode,
    parameter_count,
    parameter_shapes,
    split_tokens,
    tokenize,
    tokenize_batch,
)
from gteforge.objectives import cosine_similarity, improved_contrastive_loss

from gradcheck import relative_error

# ---------------------------------------------------------------- vocabulary


def test_vocab_frequency_order():
    v = build_vocab(["a b", "a"], 10)
    assert v.tokens[:3] == ["[PAD]", "[UNK]", "[BOS]"]
    assert {"a", "b"} <= set(v.tokens)
    assert v.id_of("a") < v.id_of("b")
    assert v.id_of("[PAD]") == PAD_ID == 0


def test_unseen_token_maps_to_unk():
    v = build_vocab(["a b"], 10)
    assert v.id_of("zebra") == UNK_ID
    ids, _ = tokenize("zebra", v, 4)
    assert ids[1] == UNK_ID


def test_vocab_rebuild_is_identical():
    corpus = ["The cat sat.", "the dog, the cat!", "x y z"]
    assert build_vocab(corpus, 50) == build_vocab(corpus, 50)


def test_vocab_ties_keep_first_seen_order():
    v = build_vocab(["q w e", "e w q"], 10)
    assert v.tokens[3:] == ["q", "w", "e"]


def test_vocab_truncation():
    v = build_vocab(["a a a b b c d"], 5)
    assert v.tokens == ["[PAD]", "[UNK]", "[BOS]", "a", "b"]


def test_empty_corpus_rejected():
    with pytest.raises(InputError):
        build_vocab([], 10)


def test_vocab_ids_dense_and_injective():
    v = build_vocab(["alpha beta gamma, delta. alpha"], 100)
    ids = [v.id_of(t) for t in v.tokens]
    assert ids == list(range(len(v)))


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["héllo wörld", "tab\tsep"], 20)
    v.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines()
    assert lines == v.tokens
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_split_tokens_lowercases_and_splits_punctuation():
    assert split_tokens("Hello, World!") == ["hello", ",", "world", "!"]


# ---------------------------------------------------------------- tokenize


@pytest.fixture
def abc_vocab():
    return build_vocab(["a b c d e f g"], 20)


def test_tokenize_empty(abc_vocab):
    ids, mask = tokenize("", abc_vocab, 5)
    assert ids == [BOS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert mask == [1, 0, 0, 0, 0]


def test_tokenize_exact_fit(abc_vocab):
    ids, mask = tokenize("a b c d", abc_vocab, 5)
    assert PAD_ID not in ids
    assert mask == [1] * 5


def test_tokenize_truncates(abc_vocab):
    ids, mask = tokenize("a b c d e f g", abc_vocab, 4)
    expected = [BOS_ID] + [abc_vocab.id_of(t) for t in ("a", "b", "c")]
    assert ids == expected
    assert len(ids) == 4 and sum(mask) == 4


def test_tokenize_needs_room_for_bos(abc_vocab):
    with pytest.raises(InputError):
        tokenize("a", abc_vocab, 1)


def test_tokenize_batch_pads_to_longest(abc_vocab):
    ids, mask = tokenize_batch(["a", "a b c"], abc_vocab, 10)
    assert ids.shape == (2, 4)
    assert_array_equal(mask.sum(axis=1), [2, 4])


# ---------------------------------------------------------------- config and init


def test_config_validation():
    with pytest.raises(InputError):
        EncoderConfig(embed_dim=10, num_heads=3)
    with pytest.raises(InputError):
        EncoderConfig(num_heads=0)
    with pytest.raises(InputError):
        EncoderConfig(max_seq_len=0)


def test_parameter_count_is_function_of_config(tiny_config):
    a = EncoderModel.init(tiny_config, seed=0)
    b = EncoderModel.init(tiny_config, seed=1)
    n = sum(p.size for p in a.params.values())
    assert n == sum(p.size for p in b.params.values()) == parameter_count(tiny_config)
    d, f, V, L = 8, 12, 40, 10
    per_layer = 4 * d + 4 * d * d + 4 * d + d * f + f + f * d + d
    assert n == V * d + L * d + per_layer + 2 * d


def test_init_statistics():
    cfg = EncoderConfig(vocab_size=500, embed_dim=32, num_layers=1, num_heads=2, ffn_dim=64, max_seq_len=16)
    m = EncoderModel.init(cfg, seed=0)
    w = m.params["tok_emb"].data
    assert np.all(np.abs(w) <= 2 * cfg.init_std)
    assert abs(w.std() - 0.02 * 0.8796) < 1e-3  # std of a normal truncated at 2 sigma
    assert np.all(m.params["layer0.attn.bq"].data == 0)
    assert np.all(m.params["ln_f.gamma"].data == 1)
    for p in m.params.values():
        assert np.all(np.isfinite(p.data))


def test_parameter_names_are_canonical(tiny_config):
    assert list(EncoderModel.init(tiny_config).params) == list(parameter_shapes(tiny_config))


# ---------------------------------------------------------------- forward


def _ids(model, rng, B, L, lengths=None):
    ids = rng.integers(3, model.config.vocab_size, size=(B, L))
    ids[:, 0] = BOS_ID
    mask = np.ones((B, L), dtype=np.int64)
    if lengths is not None:
        for i, n in enumerate(lengths):
            ids[i, n:] = PAD_ID
            mask[i, n:] = 0
    return ids, mask


def test_identical_rows_identical_embeddings(tiny_model):
    ids, mask = _ids(tiny_model, np.random.default_rng(0), 1, 6)
    out = encode(tiny_model, np.repeat(ids, 3, axis=0), np.repeat(mask, 3, axis=0)).data
    assert out[0].tobytes() == out[1].tobytes() == out[2].tobytes()


def test_single_token_pools_to_its_hidden_state(tiny_model):
    ids, mask = _ids(tiny_model, np.random.default_rng(1), 2, 5, lengths=[1, 3])
    pooled, hidden = tiny_model.forward(ids, mask, return_hidden=True)
    assert_allclose(pooled.data[0], hidden.data[0, 0], rtol=0, atol=1e-15)


def test_pooling_recomputed_externally(tiny_model):
    ids, mask = _ids(tiny_model, np.random.default_rng(2), 4, 7, lengths=[7, 2, 5, 1])
    pooled, hidden = tiny_model.forward(ids, mask, return_hidden=True)
    h = hidden.data
    manual = np.stack([(mask[i][:, None] * h[i]).sum(0) / mask[i].sum() for i in range(4)])
    assert np.max(np.abs(pooled.data - manual)) < 1e-12


def test_pool_without_bos_flag(tiny_config):
    cfg = EncoderConfig(**dict(tiny_config.to_dict(), pool_include_bos=False))
    model = EncoderModel.init(cfg, seed=3)
    ids, mask = _ids(model, np.random.default_rng(3), 2, 5, lengths=[5, 1])
    pooled, hidden = model.forward(ids, mask, return_hidden=True)
    assert_allclose(pooled.data[0], hidden.data[0, 1:].mean(0), atol=1e-14)
    assert_allclose(pooled.data[1], hidden.data[1, 0], atol=1e-14)


def test_padding_invariance(tiny_model):
    rng = np.random.default_rng(4)
    ids, mask = _ids(tiny_model, rng, 3, 5, lengths=[5, 3, 2])
    base = encode(tiny_model, ids, mask).data
    for extra in (1, 3, 5):
        pids = np.pad(ids, ((0, 0), (0, extra)), constant_values=PAD_ID)
        pmask = np.pad(mask, ((0, 0), (0, extra)))
        assert np.max(np.abs(encode(tiny_model, pids, pmask).data - base)) < 1e-9


def test_padding_content_is_ignored(tiny_model):
    """Whatever id sits under a zero mask cannot leak into the embedding."""
    rng = np.random.default_rng(5)
    ids, mask = _ids(tiny_model, rng, 2, 6, lengths=[3, 4])
    noisy = ids.copy()
    noisy[mask == 0] = rng.integers(3, tiny_model.config.vocab_size, size=int((mask == 0).sum()))
    assert np.max(np.abs(encode(tiny_model, noisy, mask).data - encode(tiny_model, ids, mask).data)) < 1e-9


def test_row_permutation(tiny_model):
    rng = np.random.default_rng(6)
    ids, mask = _ids(tiny_model, rng, 5, 6, lengths=[6, 2, 4, 1, 5])
    perm = rng.permutation(5)
    a = encode(tiny_model, ids, mask).data
    b = encode(tiny_model, ids[perm], mask[perm]).data
    assert_allclose(b, a[perm], rtol=0, atol=1e-14)


def test_encode_errors(tiny_model):
    ids, mask = _ids(tiny_model, np.random.default_rng(7), 2, 4)
    bad = ids.copy()
    bad[0, 1] = tiny_model.config.vocab_size
    with pytest.raises(InputError):
        encode(tiny_model, bad, mask)
    with pytest.raises(InputError):
        encode(tiny_model, ids, np.zeros_like(mask))
    with pytest.raises(InputError):
        encode(tiny_model, np.zeros((1, 11), dtype=int), np.ones((1, 11)))


def test_embedder_matches_encode_and_records_nothing(tiny_model):
    vocab = build_vocab(["one two three four five"], 40)
    texts = ["one two", "three four five", "", "one two"]
    out = Embedder(tiny_model, vocab, batch_size=3)(texts)
    ids, mask = tokenize_batch(texts, vocab, 10)
    assert_allclose(out, encode(tiny_model, ids, mask).data, atol=1e-12)
    assert out[0].tobytes() == out[3].tobytes()
    assert np.all(np.isfinite(out))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.text(alphabet="abc d,.", max_size=20), min_size=1, max_size=5))
def test_embedding_deterministic(texts):
    model = EncoderModel.init(EncoderConfig(vocab_size=20, embed_dim=4, num_layers=1, num_heads=1,
                                            ffn_dim=4, max_seq_len=8), seed=0)
    vocab = build_vocab(["a b c d , ."], 20)
    e = Embedder(model, vocab)
    assert e(texts).tobytes() == e(texts).tobytes()


# ---------------------------------------------------------------- gradients through the encoder


def _param_fd(model, loss_fn, h=1e-6):
    with T.Tape() as tape:
        tape.backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in model.params.items()}
    model.zero_grad()
    numeric = {}
    for k, p in model.params.items():
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn().item()
            flat[i] = old - h
            fm = loss_fn().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        numeric[k] = g
    return analytic, numeric


def test_full_model_gradients_match_finite_differences(tiny_model):
    rng = np.random.default_rng(8)
    qi, qm = _ids(tiny_model, rng, 3, 5, lengths=[5, 3, 4])
    di, dm = _ids(tiny_model, rng, 3, 6, lengths=[6, 2, 4])

    def loss():
        return improved_contrastive_loss(encode(tiny_model, qi, qm), encode(tiny_model, di, dm), 0.01)

    analytic, numeric = _param_fd(tiny_model, loss)
    keys = list(analytic)
    assert relative_error([analytic[k] for k in keys], [numeric[k] for k in keys]) < 1e-3
    # parameters the batch touches get a non-zero gradient
    assert np.any(analytic["layer0.ffn.w1"] != 0)


def test_cosine_probe_gradient(tiny_model):
    rng = np.random.default_rng(9)
    ids, mask = _ids(tiny_model, rng, 2, 6, lengths=[6, 4])

    def probe():
        e = encode(tiny_model, ids, mask)
        return cosine_similarity(e[0], e[1])

    analytic, numeric = _param_fd(tiny_model, probe)
    keys = list(analytic)
    assert relative_error([analytic[k] for k in keys], [numeric[k] for k in keys]) < 1e-3
