"""Serialization and rendering of circuits and sweeps.

Circuit files are JSON (``format: idiomcircuits.circuit/1``) with sorted keys,
so identical circuits serialize to identical bytes. Sweeps are CSV with
columns ``tau,edge_count,cosine``. Graphs are emitted in the Graphviz dot
language; sweep charts as standalone SVG.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .discovery import Circuit, SweepResult
from .graph import K, V, EdgeId, NodeId, Resid

CIRCUIT_FORMAT = "idiomcircuits.circuit/1"


# ---------------------------------------------------------------------------
# Circuit files


def circuit_to_dict(circuit: Circuit) -> dict:
    edges = [{**e.to_dict(), "weight": float(circuit.edges[e])} for e in circuit.sorted_edges()]
    nodes = sorted(circuit.nodes, key=lambda n: (n.layer, n.token, n.kind, n.head))
    return {
        "format": CIRCUIT_FORMAT,
        "layer": circuit.layer,
        "n_heads": circuit.n_heads,
        "T": circuit.T,
        "metadata": circuit.metadata,
        "nodes": [n.to_dict() for n in nodes],
        "edges": edges,
    }


def circuit_to_json(circuit: Circuit) -> str:
    return json.dumps(circuit_to_dict(circuit), indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def circuit_from_dict(d: dict) -> Circuit:
    if d.get("format") != CIRCUIT_FORMAT:
        raise ValueError(f"not a circuit file (format {d.get('format')!r})")
    edges = {}
    for rec in d["edges"]:
        edges[EdgeId.from_dict(rec)] = float(rec["weight"])
    return Circuit(edges, int(d["n_heads"]), int(d["T"]), int(d["layer"]), d.get("metadata", {}))


def save_circuit(path, circuit: Circuit) -> None:
    Path(path).write_text(circuit_to_json(circuit), encoding="utf-8")


def load_circuit(path) -> Circuit:
    return circuit_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Sweep tables


def sweep_to_csv(sweep: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "edge_count", "cosine"])
    for t, n, c in zip(sweep.taus, sweep.edge_counts, sweep.cosines):
        w.writerow([repr(t), n, repr(c)])
    return buf.getvalue()


def sweep_from_csv(text: str, label: str = "") -> SweepResult:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or set(rows[0]) != {"tau", "edge_count", "cosine"}:
        raise ValueError("sweep table needs columns tau, edge_count, cosine")
    return SweepResult(
        taus=[float(r["tau"]) for r in rows],
        edge_counts=[int(r["edge_count"]) for r in rows],
        cosines=[float(r["cosine"]) for r in rows],
        label=label,
    )


# ---------------------------------------------------------------------------
# Graph rendering


@dataclass(frozen=True)
class RenderStyle:
    """Visual conventions for circuit graphs.

    Pen width is ``pen_per_unit * |d|`` clamped to ``[min_pen, max_pen]``, so
    widths are proportional to ``|d|`` inside ``[0.01, 0.2]`` with the defaults.
    """

    embed_shape: str = "triangle"
    embed_color: str = "gold"
    resid_shape: str = "circle"
    resid_color: str = "palegreen"
    head_shape: str = "square"
    head_color: str = "orange"
    drop_color: str = "red"
    gain_color: str = "blue"
    chain_color: str = "gray70"
    pen_per_unit: float = 50.0
    min_pen: float = 0.5
    max_pen: float = 10.0

    def pen_width(self, d: float) -> float:
        return min(self.max_pen, max(self.min_pen, self.pen_per_unit * abs(d)))

    def color(self, d: float) -> str:
        return self.drop_color if d > 0 else self.gain_color

    @staticmethod
    def label_class(etypes) -> str:
        """'K', 'V' or 'KV' for cross-token edges; '' for Q and HeadOut."""
        kinds = set(etypes) & {K, V}
        if kinds == {K, V}:
            return "KV"
        return next(iter(kinds)) if kinds else ""


def _node_name(n: NodeId) -> str:
    return f'"{n}"'


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def drawn_edges(circuit: Circuit, style: RenderStyle = RenderStyle()) -> list:
    """Retained edges as drawn: K and V edges between the same pair become one edge.

    Returns tuples ``(src, dst, label, weight, members)`` in a fixed order.
    """
    groups: dict = {}
    for e, d in circuit.edges.items():
        key = (e.src, e.dst, "KV" if e.etype in (K, V) else e.etype)
        groups.setdefault(key, []).append((e, d))
    out = []
    for (src, dst, _), members in groups.items():
        label = style.label_class(e.etype for e, _ in members)
        weight = max((d for _, d in members), key=lambda d: (abs(d), d))
        out.append((src, dst, label, weight, tuple(sorted(e.etype for e, _ in members))))
    out.sort(key=lambda r: (r[1].layer, r[1].token, r[1].kind, r[1].head, r[0].layer, r[0].token, r[0].kind, r[0].head, r[4]))
    return out


def render_graph(circuit: Circuit, style: RenderStyle = RenderStyle()) -> str:
    """Dot description: tokens as columns, layers as rows, embeddings at the bottom."""
    tokens = circuit.metadata.get("tokens") or [str(t) for t in range(circuit.T)]
    lines = [
        "digraph circuit {",
        "  rankdir=BT;",
        "  newrank=true;",
        '  node [style=filled, fontsize=10, fixedsize=false];',
        "  edge [arrowsize=0.5];",
    ]
    heads = sorted(circuit.head_nodes, key=lambda n: (n.layer, n.token, n.head))
    for layer in range(-1, circuit.layer + 1):
        row = []
        for t in range(circuit.T):
            n = Resid(layer, t)
            if layer < 0:
                attrs = f'shape={style.embed_shape}, fillcolor={style.embed_color}, label="{_escape(tokens[t])}"'
            else:
                attrs = f'shape={style.resid_shape}, fillcolor={style.resid_color}, label="{layer}"'
            lines.append(f"  {_node_name(n)} [{attrs}];")
            row.append(_node_name(n))
        lines.append(f"  {{ rank=same; {' '.join(row)} }}")
        layer_heads = [h for h in heads if h.layer == layer]
        for h in layer_heads:
            lines.append(f'  {_node_name(h)} [shape={style.head_shape}, fillcolor={style.head_color}, label="{h.layer},{h.head}"];')
        if layer_heads:
            lines.append(f"  {{ rank=same; {' '.join(_node_name(h) for h in layer_heads)} }}")
    for t in range(circuit.T):
        for layer in range(circuit.layer + 1):
            lines.append(
                f"  {_node_name(Resid(layer - 1, t))} -> {_node_name(Resid(layer, t))} "
                f"[color={style.chain_color}, style=dashed, penwidth={_fmt(style.min_pen)}];"
            )
    for src, dst, label, weight, _ in drawn_edges(circuit, style):
        attrs = f"color={style.color(weight)}, penwidth={_fmt(style.pen_width(weight))}"
        if label:
            attrs += f', label="{label}"'
        attrs += f', tooltip="d={weight:.5f}"'
        lines.append(f"  {_node_name(src)} -> {_node_name(dst)} [{attrs}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sweep chart


def export_sweep_chart(sweep: SweepResult, title: str = "") -> str:
    """Dual-axis SVG: cosine on the left, edge count (symlog) on the right."""
    if not len(sweep):
        raise ValueError("empty sweep")
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": "idiomcircuits", "svg.fonttype": "path"}):
        fig = Figure(figsize=(6, 4))
        FigureCanvasSVG(fig)
        ax = fig.add_subplot(1, 1, 1)
        (cos_line,) = ax.plot(sweep.taus, sweep.cosines, color="tab:blue", marker="o", label="cosine")
        cos_line.set_gid("series-cosine")
        ax.set_xlabel("threshold")
        ax.set_ylabel("final cosine to meaning", color="tab:blue")
        ax2 = ax.twinx()
        (edge_line,) = ax2.plot(sweep.taus, sweep.edge_counts, color="tab:red", marker="s", label="edges")
        edge_line.set_gid("series-edges")
        ax2.set_yscale("symlog", linthresh=1)
        ax2.set_ylabel("number of edges", color="tab:red")
        if title or sweep.label:
            ax.set_title(title or sweep.label)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()
