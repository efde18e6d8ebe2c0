import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings

from idiomcircuits.container import load_model, read_tensors, read_vocab, save_model, write_vocab
from idiomcircuits.errors import ConfigError, HeaderError, NonFiniteError, ShapeError
from idiomcircuits.model import ModelConfig, Vocab, random_weights
from strategies import toy_configs


def _weights():
    return random_weights(ModelConfig(2, 2, 6, 2, 4, 5, 4, positional_kind="learned"), seed=3)


def _rewrite(path, mutate_header=None, data=None):
    blob = path.read_bytes()
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + n])
    if mutate_header:
        mutate_header(header)
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + (blob[8 + n:] if data is None else data))


def test_round_trip_is_exact(tmp_path):
    w = _weights()
    save_model(tmp_path / "m.tensors", w)
    config, loaded = load_model(tmp_path / "m.tensors")
    assert config == w.config
    for name, arr in w.to_tensors().items():
        assert np.array_equal(arr, loaded.to_tensors()[name])


def test_saving_is_byte_deterministic(tmp_path):
    save_model(tmp_path / "a", _weights())
    save_model(tmp_path / "b", _weights())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@settings(max_examples=15, deadline=None)
@given(toy_configs())
def test_round_trip_any_config(tmp_path_factory, config):
    path = tmp_path_factory.mktemp("c") / "m.tensors"
    w = random_weights(config, seed=1)
    save_model(path, w)
    assert load_model(path)[1].to_tensors().keys() == w.to_tensors().keys()


def test_truncated_prefix(tmp_path):
    p = tmp_path / "m"
    p.write_bytes(b"\x01\x02")
    with pytest.raises(HeaderError, match="too short"):
        read_tensors(p)


def test_header_length_past_end(tmp_path):
    p = tmp_path / "m"
    p.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(HeaderError, match="exceeds"):
        read_tensors(p)


def test_header_not_json(tmp_path):
    p = tmp_path / "m"
    p.write_bytes(struct.pack("<Q", 3) + b"{x}")
    with pytest.raises(HeaderError, match="JSON"):
        read_tensors(p)


def test_header_without_metadata(tmp_path):
    p = tmp_path / "m"
    save_model(p, _weights())
    _rewrite(p, lambda h: h.pop("__metadata__"))
    with pytest.raises(HeaderError, match="metadata"):
        read_tensors(p)


def test_length_disagrees_with_shape(tmp_path):
    p = tmp_path / "m"
    save_model(p, _weights())
    _rewrite(p, lambda h: h["embed.W_E"].update(length=4))
    with pytest.raises(HeaderError, match="byte length"):
        read_tensors(p)


def test_data_range_outside_file(tmp_path):
    p = tmp_path / "m"
    save_model(p, _weights())
    _rewrite(p, data=b"")
    with pytest.raises(HeaderError, match="outside"):
        read_tensors(p)


def test_missing_tensor(tmp_path):
    p = tmp_path / "m"
    save_model(p, _weights())
    _rewrite(p, lambda h: h.pop("unembed.W_U"))
    with pytest.raises(ShapeError, match="unembed.W_U"):
        load_model(p)


def test_wrong_shape(tmp_path):
    p = tmp_path / "m"
    save_model(p, _weights())

    def reshape(h):
        e = h["embed.W_E"]
        e["shape"] = [e["shape"][1], e["shape"][0]]
    _rewrite(p, reshape)
    with pytest.raises(ShapeError, match="embed.W_E"):
        load_model(p)


def test_non_finite(tmp_path):
    p = tmp_path / "m"
    w = _weights()
    save_model(p, w)
    blob = bytearray(p.read_bytes())
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + n])
    off = 8 + n + header["ln_final.w"]["offset"]
    blob[off:off + 4] = np.float32(np.nan).tobytes()
    p.write_bytes(bytes(blob))
    with pytest.raises(NonFiniteError, match="ln_final.w"):
        load_model(p)


def test_vocab_round_trip(tmp_path):
    v = Vocab(["He", " kicked", "été", " "])
    write_vocab(tmp_path / "v.tsv", v)
    assert read_vocab(tmp_path / "v.tsv") == v


def test_vocab_bad_line(tmp_path):
    (tmp_path / "v.tsv").write_text("0\ta\nzero b\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=":2:"):
        read_vocab(tmp_path / "v.tsv")


def test_vocab_gap_in_ids(tmp_path):
    (tmp_path / "v.tsv").write_text("0\ta\n2\tb\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_vocab(tmp_path / "v.tsv")
