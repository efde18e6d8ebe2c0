import re

import numpy as np
import pydot
import pytest
from hypothesis import given, settings, strategies as st

from idiomcircuits.discovery import Circuit, SweepResult, discover_circuit, merge_circuits
from idiomcircuits.export import (
    RenderStyle, circuit_from_dict, circuit_to_json, drawn_edges, export_sweep_chart, load_circuit,
    render_graph, save_circuit, sweep_from_csv, sweep_to_csv,
)
from idiomcircuits.graph import k_edge, out_edge, q_edge, v_edge
from strategies import random_circuit


def _parse(dot):
    graphs = pydot.graph_from_dot_data(dot)
    assert graphs and len(graphs) == 1
    return graphs[0]


def _edge_attrs(graph):
    out = {}
    for e in graph.get_edges():
        out[(e.get_source().strip('"'), e.get_destination().strip('"'))] = e.get_attributes()
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_circuit_json_round_trip(seed):
    c = random_circuit(np.random.default_rng(seed), corruptions=[{"string": "s", "position": 1, "tau": 0.01}])
    text = circuit_to_json(c)
    import json
    back = circuit_from_dict(json.loads(text))
    assert back == c and circuit_to_json(back) == text


def test_circuit_file_io(tmp_path, get_planted):
    _, w, v, spec = get_planted("chain")
    c = discover_circuit(w, v, spec, 0)
    save_circuit(tmp_path / "c.json", c)
    assert load_circuit(tmp_path / "c.json") == c


def test_rejects_foreign_json():
    with pytest.raises(ValueError, match="not a circuit"):
        circuit_from_dict({"format": "other"})


def test_sweep_csv_round_trip():
    s = SweepResult([0.001, 0.002], [10, 3], [0.25, 0.125])
    text = sweep_to_csv(s)
    assert text.splitlines()[0] == "tau,edge_count,cosine"
    back = sweep_from_csv(text)
    assert back.taus == s.taus and back.edge_counts == s.edge_counts and back.cosines == s.cosines
    with pytest.raises(ValueError):
        sweep_from_csv("a,b\n1,2\n")


def test_empty_circuit_renders_chain_only():
    c = Circuit({}, 2, 3, 1, {"tokens": ["a", "b", '"c"']})
    g = _parse(render_graph(c))
    shapes = {n.get_name().strip('"'): n.get_attributes().get("shape") for n in g.get_nodes()
              if n.get_name() not in ("node", "edge")}
    assert {k for k, s in shapes.items() if s == "triangle"} == {"R-1@0", "R-1@1", "R-1@2"}
    assert sum(s == "circle" for s in shapes.values()) == 6
    assert all(s in ("triangle", "circle") for s in shapes.values() if s)
    # one residual edge per token and block, all neutral
    edges = _edge_attrs(g)
    assert len(edges) == 6
    assert all(a["color"] == "gray70" for a in edges.values())


def test_colors_labels_and_widths():
    c = Circuit({
        out_edge(1, 0, 3): 0.10,
        q_edge(1, 0, 3): 0.02,
        k_edge(1, 0, 1, 3): 0.05, v_edge(1, 0, 1, 3): 0.03,
        k_edge(1, 0, 0, 3): -0.02,
        v_edge(1, 0, 2, 3): 0.04,
    }, 2, 4, 1, {})
    edges = _edge_attrs(_parse(render_graph(c)))
    head = "H1.0@3"
    assert edges[(head, "R1@3")]["color"] == "red"
    assert "label" not in edges[("R0@3", head)]
    assert edges[("R0@1", head)]["label"] == '"KV"'
    assert edges[("R0@0", head)]["label"] == '"K"' and edges[("R0@0", head)]["color"] == "blue"
    assert edges[("R0@2", head)]["label"] == '"V"'
    w_big = float(edges[(head, "R1@3")]["penwidth"])
    w_small = float(edges[("R0@3", head)]["penwidth"])
    assert w_big == pytest.approx(5 * w_small)


def test_every_edge_has_one_color_and_label_class(get_planted):
    _, w, v, spec = get_planted("single")
    merged = merge_circuits([discover_circuit(w, v, spec, i) for i in range(2)])
    style = RenderStyle()
    rows = drawn_edges(merged, style)
    assert sum(len(r[4]) for r in rows) == len(merged)
    for src, dst, label, weight, members in rows:
        assert style.color(weight) in ("red", "blue")
        assert label == ("" if members in (("Q",), ("HeadOut",)) else "".join(members))


def test_pen_width_clamps():
    s = RenderStyle()
    assert s.pen_width(0.0) == s.min_pen and s.pen_width(5.0) == s.max_pen


def test_render_is_deterministic(get_planted):
    _, w, v, spec = get_planted("chain")
    c = discover_circuit(w, v, spec, 0)
    assert render_graph(c) == render_graph(load_circuit_copy(c))


def load_circuit_copy(c):
    import json
    return circuit_from_dict(json.loads(circuit_to_json(c)))


def _series_markers(svg, gid):
    m = re.search(r'<g id="%s">(.*?)</g>\s*</g>' % gid, svg, re.S)
    return m.group(1).count("<use")


def test_chart_single_point():
    svg = export_sweep_chart(SweepResult([0.01], [4], [0.5]))
    assert svg.lstrip().startswith("<?xml")
    assert _series_markers(svg, "series-cosine") == 1
    assert _series_markers(svg, "series-edges") == 1


def test_chart_is_deterministic_and_dual_axis():
    s = SweepResult([0.001, 0.002, 0.004], [200, 30, 0], [0.9, 0.8, 0.1], label="demo")
    a, b = export_sweep_chart(s), export_sweep_chart(s)
    assert a == b
    assert _series_markers(a, "series-edges") == 3
    # glyphs are paths; matplotlib keeps the text in comments
    assert "<!-- number of edges -->" in a and "<!-- final cosine to meaning -->" in a
    assert a.count('id="axes_1"') == 1 and a.count('id="axes_2"') == 1


def test_chart_rejects_empty():
    class Empty:
        def __len__(self):
            return 0
    with pytest.raises(ValueError):
        export_sweep_chart(Empty())
