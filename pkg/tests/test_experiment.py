import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idiomcircuits.errors import ConfigError
from idiomcircuits.experiment import (
    Corruption, ExperimentSpec, SimilarityCurves, candidate_corruptions, dump_experiment,
    layerwise_similarity, load_experiment, select_L, validate_corruption,
)
from idiomcircuits.fixtures import IDIOM, MEANING, fixture_vocab
from idiomcircuits.model import ModelConfig

# plain fixture embeddings are e_t + e_const; " died" adds 8 e_meaning
PLAIN_COS = 0.5
DIED_COS = 1 / math.sqrt(132)
WRITTEN_COS = 65 / 66


def _spec(*corruptions, **kw):
    return ExperimentSpec(IDIOM, MEANING, [Corruption(s, p, 0.05) for s, p in corruptions], **kw)


def test_yaml_round_trip(tmp_path):
    spec = _spec(("He booted the bucket", 1), layer=0, name="demo")
    (tmp_path / "e.yaml").write_text(dump_experiment(spec, "m.tensors", "v.tsv"), encoding="utf-8")
    back = load_experiment(tmp_path / "e.yaml")
    assert back.corruptions == spec.corruptions and back.layer == 0 and back.name == "demo"
    assert back.model == str(tmp_path / "m.tensors")


def test_malformed_yaml(tmp_path):
    (tmp_path / "e.yaml").write_text("idiom: x\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "e.yaml")
    (tmp_path / "f.yaml").write_text("- 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "f.yaml")


def test_tau_must_be_positive():
    with pytest.raises(ConfigError):
        Corruption("x", 0, 0.0)


def test_check_rejects_bad_corruptions():
    v = fixture_vocab()
    cfg = ModelConfig(1, 1, 12, 10, 4, len(v), 8)
    _spec(("He booted the bucket", 1)).check(v, cfg)
    with pytest.raises(ConfigError, match="tokens"):
        _spec(("He booted the", 1)).check(v, cfg)
    with pytest.raises(ConfigError, match="declared 3"):
        _spec(("He booted the bucket", 3)).check(v, cfg)
    with pytest.raises(ConfigError, match="differs at positions"):
        _spec(("He booted the pail", 1)).check(v, cfg)
    with pytest.raises(ConfigError, match="layer"):
        _spec(layer=2).check(v, cfg)


def test_candidate_corruptions_rank_and_ties(get_planted):
    _, w, v, _ = get_planted("minimal")
    kicked = v.id(" kicked")
    got = candidate_corruptions(kicked, 3, w)
    # all plain tokens tie; lower ids come first
    assert [i for i, _ in got] == [0, 2, 3]
    assert all(c == pytest.approx(PLAIN_COS, abs=1e-12) for _, c in got)
    died = candidate_corruptions(v.id(" died"), 1, w)
    assert died[0][1] == pytest.approx(DIED_COS, abs=1e-9)


def test_candidate_corruptions_bounds(get_planted):
    _, w, v, _ = get_planted("minimal")
    with pytest.raises(ValueError):
        candidate_corruptions(0, len(v), w)
    with pytest.raises(ValueError):
        candidate_corruptions(0, 0, w)


def test_layerwise_similarity_on_step_fixture(get_planted):
    _, w, v, spec = get_planted("step")
    curves = layerwise_similarity(spec, w, v)
    assert curves.n_points == 5
    np.testing.assert_allclose(curves.idiom, [DIED_COS] * 3 + [WRITTEN_COS] * 2, atol=1e-6)
    np.testing.assert_allclose(curves.corruptions[0], [DIED_COS] * 5, atol=1e-6)
    assert curves.at_block(2) == pytest.approx(WRITTEN_COS, abs=1e-6)


def _curves(block_margins):
    idiom = np.concatenate([[0.0], block_margins])
    return SimilarityCurves(idiom, ())


def test_select_L_hand_cases():
    assert select_L(_curves([0.0, 0.1, 0.5, 0.505]), 0.02) == 2
    assert select_L(_curves([0.0, 0.1, 0.5, 0.505]), 0.6) == 0
    # margin still rising at the end: last block
    assert select_L(_curves([0.0, 0.1, 0.2, 0.3]), 0.02) == 3
    # a later rise after a flat stretch counts
    assert select_L(_curves([0.5, 0.5, 0.5, 0.9]), 0.02) == 3
    assert select_L(_curves([0.7]), 0.02) == 0


def test_select_L_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        select_L(_curves([0.1, 0.2]), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8),
       st.lists(st.floats(1e-4, 2), min_size=2, max_size=10))
def test_select_L_is_monotone_in_epsilon(margins, eps):
    curves = _curves(margins)
    chosen = [select_L(curves, e) for e in sorted(eps)]
    assert all(a >= b for a, b in zip(chosen, chosen[1:]))


def test_validation_report_checks(get_planted):
    _, w, v, _ = get_planted("minimal")
    spec = _spec(("He booted the bucket", 1), ("He booted the pail", 1), ("He kicked the bucket", 1),
                 ("He kicked", 1), ("He kickedX", 1), ("He booted the bucket", 2))
    ok = validate_corruption(spec, 0, v, w)
    assert ok.passed and "manual review" in str(ok)
    assert validate_corruption(spec, 1, v).failures() == ["single-token corruption"]
    assert validate_corruption(spec, 2, v).failures() == ["corruption identical to original"]
    assert validate_corruption(spec, 3, v).failures() == ["equal token counts"]
    assert validate_corruption(spec, 4, v).failures() == ["tokenization"]
    assert validate_corruption(spec, 5, v).failures() == ["declared position"]
    strict = validate_corruption(spec, 0, v, w, cosine_floor=0.9)
    assert strict.failures() == ["embedding cosine floor"]
