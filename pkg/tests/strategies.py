"""Shared hypothesis strategies and small helpers for the test modules."""

import numpy as np
from hypothesis import strategies as st

from idiomcircuits.discovery import Circuit
from idiomcircuits.graph import build_graph
from idiomcircuits.model import ModelConfig, random_weights


@st.composite
def toy_configs(draw, max_layers=4, max_heads=4, max_seq=8):
    pos = draw(st.sampled_from(["none", "learned", "rotary"]))
    d_head = draw(st.sampled_from([2, 4, 6]))
    return ModelConfig(
        n_layers=draw(st.integers(1, max_layers)),
        n_heads=draw(st.integers(1, max_heads)),
        d_model=draw(st.sampled_from([4, 6, 8])),
        d_head=d_head,
        d_mlp=draw(st.sampled_from([4, 8])),
        vocab_size=draw(st.integers(3, 12)),
        max_seq=max_seq,
        norm_kind=draw(st.sampled_from(["rms", "layer"])),
        positional_kind=pos,
    )


@st.composite
def toy_models(draw, **kw):
    """(weights, clean ids, corrupt ids) with equal-length sequences."""
    config = draw(toy_configs(**kw))
    seed = draw(st.integers(0, 2**31 - 1))
    weights = random_weights(config, seed=seed)
    T = draw(st.integers(1, config.max_seq))
    ids = st.lists(st.integers(0, config.vocab_size - 1), min_size=T, max_size=T)
    return weights, tuple(draw(ids)), tuple(draw(ids))


def random_circuit(rng, n_heads=2, T=4, layer=1, p=0.3, idiom="x", corruptions=None):
    """Circuit with a random subset of the universe and random signed weights."""
    graph = build_graph(ModelConfig(layer + 1, n_heads, 4, 2, 4, 5, T), T, layer)
    edges = {}
    for e in graph.edges:
        if rng.random() < p:
            # few distinct magnitudes so ties between inputs actually happen
            edges[e] = float(rng.choice([-0.03, -0.01, 0.01, 0.02, 0.03, 0.05]))
    meta = {"idiom": idiom, "layer": layer}
    if corruptions is not None:
        meta["corruptions"] = corruptions
    return Circuit(edges, n_heads, T, layer, meta)


def max_abs_diff(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
