import numpy as np
import pytest
from hypothesis import given, settings

from idiomcircuits.errors import ConfigError, SequenceTooLongError, TokenizationError, ZeroNormError
from idiomcircuits.fixtures import _OracleModel
from idiomcircuits.model import (
    ModelConfig, Vocab, Weights, cosine, embedding_cosine, expected_tensor_shapes, forward,
    layer_cosine, random_weights, run, tokenize,
)
from strategies import max_abs_diff, toy_models


def small_config(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=8, d_head=4, d_mlp=8, vocab_size=6, max_seq=5)
    base.update(kw)
    return ModelConfig(**base)


@pytest.mark.parametrize("field,value", [
    ("n_layers", 0), ("n_heads", -1), ("d_model", 2.5), ("vocab_size", True),
    ("norm_kind", "batch"), ("positional_kind", "alibi"),
])
def test_config_rejects_bad_values(field, value):
    with pytest.raises(ConfigError):
        small_config(**{field: value})


def test_rotary_needs_even_head_dim():
    with pytest.raises(ConfigError, match="even"):
        small_config(d_head=3, positional_kind="rotary")


def test_config_round_trip():
    c = small_config(norm_kind="layer", positional_kind="learned")
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_tensor_inventory_names():
    shapes = expected_tensor_shapes(small_config(positional_kind="learned"))
    assert shapes["embed.W_E"] == (6, 8)
    assert shapes["pos.W_pos"] == (5, 8)
    assert shapes["blocks.1.attn.W_O"] == (2, 4, 8)
    assert "pos.W_pos" not in expected_tensor_shapes(small_config())


def test_weights_are_read_only():
    w = random_weights(small_config())
    with pytest.raises(ValueError):
        w.W_Q[0, 0, 0, 0] = 1.0


def test_weights_reject_wrong_shape():
    w = random_weights(small_config())
    t = w.to_tensors()
    t["blocks.0.attn.W_Q"] = t["blocks.0.attn.W_Q"][:, :3]
    with pytest.raises(Exception):
        Weights.from_tensors(w.config, t)


def test_greedy_longest_match():
    v = Vocab(["a", "ab", "abc", "b", "c"])
    toks = tokenize("abcab", v)
    assert toks.text_spans == ("abc", "ab")
    assert toks.ids == (2, 1)


def test_tokenization_error_names_byte_offset():
    v = Vocab(["é", "x"])
    with pytest.raises(TokenizationError) as info:
        tokenize("éxz", v)
    # the accented letter takes two bytes in UTF-8
    assert info.value.byte_offset == 3
    assert "byte offset 3" in str(info.value)


def test_vocab_rejects_duplicates():
    with pytest.raises(ConfigError):
        Vocab(["a", "a"])


def test_sequence_too_long():
    w = random_weights(small_config())
    with pytest.raises(SequenceTooLongError):
        run(w, [0] * 6)


def test_cache_shapes_and_truncation():
    w = random_weights(small_config())
    full = run(w, [0, 1, 2])
    assert full.resid.shape == (3, 3, 8)
    assert full.pattern.shape == (2, 2, 3, 3)
    assert full.logits.shape == (3, 6)
    part = run(w, [0, 1, 2], max_layer=0)
    assert part.logits is None and part.n_layers_computed == 1
    np.testing.assert_array_equal(part.resid, full.resid[:2])


def test_attention_is_causal():
    w = random_weights(small_config())
    p = run(w, [0, 1, 2, 3]).pattern
    assert np.all(np.triu(p[0, 0], 1) == 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-6)


def test_cosine_of_zero_vector_raises():
    with pytest.raises(ZeroNormError):
        cosine(np.zeros(3), np.ones(3))


def test_cosine_values():
    assert cosine([1, 0], [0, 2]) == 0.0
    assert cosine([1, 1], [2, 2]) == pytest.approx(1.0)
    assert cosine([1, 0], [-3, 0]) == -1.0


def test_embedding_cosine_zero_row():
    w = random_weights(small_config())
    t = w.to_tensors()
    t["embed.W_E"] = t["embed.W_E"].copy()
    t["embed.W_E"][2] = 0
    w0 = Weights.from_tensors(w.config, t)
    with pytest.raises(ZeroNormError):
        embedding_cosine(2, 1, w0)


def test_layer_cosine_reads_final_token():
    w = random_weights(small_config())
    a = forward(w, [0, 1, 2])
    b = forward(w, [3, 1, 2])
    # final tokens only differ through attention to position 0
    assert layer_cosine(a, a, 1) == pytest.approx(1.0)
    assert layer_cosine(a, b, 0) == 1.0  # embeddings of the last token coincide


@settings(max_examples=25, deadline=None)
@given(toy_models())
def test_forward_matches_loop_oracle(model):
    weights, ids, _ = model
    cache = run(weights, ids)
    resids, _ = _OracleModel(weights).forward(ids, weights.config.n_layers - 1)
    ref = np.array(resids)
    scale = max(1.0, float(np.max(np.abs(ref))))
    assert max_abs_diff(cache.resid, ref) <= 1e-4 * scale


@settings(max_examples=25, deadline=None)
@given(toy_models())
def test_forward_is_deterministic(model):
    weights, ids, _ = model
    a, b = run(weights, ids), run(weights, ids)
    assert np.array_equal(a.resid, b.resid) and np.array_equal(a.pattern, b.pattern)
