"""Reports over discovered circuits: per-head effect tables, QK dot-product
matrices, augmented-reception detection and antagonistic components."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional, Sequence

import numpy as np

from .discovery import Circuit, merge_circuits
from .errors import AnalysisError, ConfigError
from .graph import HEAD_OUT, Q, EdgeId, NodeId, edge_sort_key, k_edge, out_edge, q_edge
from .model import Vocab, Weights, forward, tokenize

DISPLAY_FLOOR = 0.01
CELL_WIDTH = 4
GROUP_GAP = "  "


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


# ---------------------------------------------------------------------------
# Head-effect tables


@dataclass(frozen=True)
class HeadCell:
    d: float  # raw HeadOut weight
    starred: bool  # no incoming Q edge anywhere for this head

    @property
    def value(self) -> int:
        """``d`` in units of 1e-2, rounded half away from zero."""
        return _round_half_away(self.d * 100)

    @property
    def text(self) -> str:
        return f"{self.value}{'*' if self.starred else ''}"


@dataclass
class HeadEffectTable:
    """Rows are idioms, columns ``(layer, head)`` pairs shown in at least one row."""

    rows: list
    columns: list
    cells: dict = field(default_factory=dict)  # (row, (layer, head)) -> HeadCell
    display_floor: float = DISPLAY_FLOOR

    def cell(self, row: str, layer: int, head: int) -> Optional[HeadCell]:
        return self.cells.get((row, (layer, head)))

    def text(self, row: str, col) -> str:
        c = self.cells.get((row, col))
        return c.text if c is not None else "--"

    def _groups(self):
        groups: dict = {}
        for layer, head in self.columns:
            groups.setdefault(layer, []).append(head)
        return groups

    def format(self) -> str:
        """Fixed-width layout: layer group labels, head labels, one line per idiom."""
        label_w = max([len("Idiom")] + [len(r) for r in self.rows])
        groups = self._groups()
        top, sub = [" " * label_w], ["Idiom".ljust(label_w)]
        for layer, heads in groups.items():
            width = len(heads) * CELL_WIDTH + len(heads) - 1
            top.append(f"L{layer}".ljust(width))
            sub.append(" ".join(f"H{h}".rjust(CELL_WIDTH) for h in heads))
        lines = [GROUP_GAP.join(top).rstrip(), GROUP_GAP.join(sub).rstrip()]
        for row in self.rows:
            parts = [row.ljust(label_w)]
            for layer, heads in groups.items():
                parts.append(" ".join(self.text(row, (layer, h)).rjust(CELL_WIDTH) for h in heads))
            lines.append(GROUP_GAP.join(parts).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """Same layout as :meth:`format` as comma-separated text; blank cells are empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["idiom"] + [f"L{l}H{h}" for l, h in self.columns])
        for row in self.rows:
            w.writerow([row] + [self.text(row, c) if (row, c) in self.cells else "" for c in self.columns])
        return buf.getvalue()


def _head_cells(circuit: Circuit, floor: float) -> dict:
    best: dict = {}
    has_q = set()
    for e, d in circuit.edges.items():
        h = e.head_node
        key = (h.layer, h.head)
        if e.etype == Q:
            has_q.add(key)
        elif e.etype == HEAD_OUT:
            cur = best.get(key)
            if cur is None or abs(d) > abs(cur) or (abs(d) == abs(cur) and d > cur):
                best[key] = d
    return {k: HeadCell(d, k not in has_q) for k, d in best.items() if abs(d) > floor}


def head_effect_table(circuits: Mapping, display_floor: float = DISPLAY_FLOOR) -> HeadEffectTable:
    """One row per idiom from its merged circuit (or a list of circuits to merge).

    Each cell is the largest-magnitude HeadOut weight of that head over all
    tokens, shown only when it exceeds ``display_floor`` in magnitude.
    """
    rows, cells, columns = [], {}, set()
    for name, c in circuits.items():
        if not isinstance(c, Circuit):
            c = merge_circuits(c)
        rows.append(name)
        for key, cell in _head_cells(c, display_floor).items():
            cells[(name, key)] = cell
            columns.add(key)
    return HeadEffectTable(rows, sorted(columns), cells, display_floor)


# ---------------------------------------------------------------------------
# Reference head-effect data


@dataclass(frozen=True)
class ReferenceCell:
    idiom: str
    layer: int
    head: int
    value: int  # units of 1e-2
    starred: bool


def load_reference_cells(path=None) -> list:
    """Read a long-form head-effect transcription (idiom,layer,head,value,starred)."""
    if path is None:
        text = resources.files("idiomcircuits").joinpath("data/reference_head_effects.csv").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(ReferenceCell(rec["idiom"], int(rec["layer"]), int(rec["head"]),
                                 int(rec["value"]), rec["starred"].strip() in ("1", "true", "yes")))
    return out


def reference_circuits(cells: Sequence[ReferenceCell], n_heads: int = 8, T: int = 6, layer: int = 4,
                       distractors: bool = True) -> dict:
    """Rebuild per-idiom circuits whose head-effect table reproduces ``cells``.

    A cell value ``v`` becomes a HeadOut weight ``sign(v) * (|v| + 0.25) / 100``
    on the final token, inside the rounding interval of ``v``. Unstarred heads
    also get a Q edge, every head gets a K edge from token 0. With
    ``distractors`` every idiom also carries sub-floor HeadOut edges on other
    heads, which the display filter has to hide.
    """
    t = T - 1
    by_idiom: dict = {}
    for c in cells:
        if c.layer > layer:
            raise ConfigError(f"cell layer {c.layer} above circuit layer {layer}")
        edges = by_idiom.setdefault(c.idiom, {})
        d = math.copysign((abs(c.value) + 0.25) / 100.0, c.value)
        edges[out_edge(c.layer, c.head, t)] = d
        edges[k_edge(c.layer, c.head, 0, t)] = abs(d)
        if not c.starred:
            edges[q_edge(c.layer, c.head, t)] = abs(d) / 2
    out = {}
    for i, (idiom, edges) in enumerate(by_idiom.items()):
        if distractors:
            used = {(e.head_node.layer, e.head_node.head) for e in edges}
            free = [(l, h) for l in range(layer + 1) for h in range(n_heads) if (l, h) not in used]
            for j, (l, h) in enumerate(free[i % 3::5]):
                d = (0.004 + 0.0059 * ((i + j) % 2)) * (-1 if j % 3 == 0 else 1)
                edges[out_edge(l, h, t)] = d
                edges[k_edge(l, h, 0, t)] = abs(d)
        out[idiom] = Circuit(edges, n_heads, T, layer, {"idiom": idiom})
    return out


# ---------------------------------------------------------------------------
# QK dot products


@dataclass
class QKMatrix:
    """``values[i, j]`` is query of row ``i`` dotted with key of column ``j``.

    ``aux[i]`` (diagonal only) is ``(mean corrupted query . clean key,
    mean clean query . corrupted key)``; entries are None when no corruption
    was supplied for that slot.
    """

    rows: list
    columns: list
    values: np.ndarray
    aux: dict
    head: tuple

    def format(self, fmt: str = "{:.0f}") -> str:
        cells = []
        for i in range(len(self.rows)):
            line = []
            for j in range(len(self.columns)):
                s = fmt.format(self.values[i, j])
                if i == j and i in self.aux:
                    a, b = (("--" if x is None else fmt.format(x)) for x in self.aux[i])
                    s += f" ({a}, {b})"
                line.append(s)
            cells.append(line)
        widths = [max([len(self.columns[j])] + [len(r[j]) for r in cells]) for j in range(len(self.columns))]
        label_w = max([0] + [len(r) for r in self.rows])
        lines = [(" " * label_w + "  " + "  ".join(c.rjust(w) for c, w in zip(self.columns, widths))).rstrip()]
        for name, line in zip(self.rows, cells):
            lines.append((name.ljust(label_w) + "  " + "  ".join(s.rjust(w) for s, w in zip(line, widths))).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query", "key", "dot", "corrupted_query_dot", "corrupted_key_dot"])
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.columns):
                a, b = self.aux.get(i, (None, None)) if i == j else (None, None)
                w.writerow([r, c, repr(float(self.values[i, j])),
                            "" if a is None else repr(a), "" if b is None else repr(b)])
        return buf.getvalue()


def _slot_positions(template: str, fills: Sequence[str], vocab: Vocab):
    """Token ids of the filled template and the token index of each slot."""
    pieces = template.split("{}")
    if len(pieces) != len(fills) + 1:
        raise ConfigError(f"template {template!r} has {len(pieces) - 1} slots, got {len(fills)} fills")
    text, spans = pieces[0], []
    for word, rest in zip(fills, pieces[1:]):
        spans.append((len(text), len(text) + len(word)))
        text += word + rest
    toks = tokenize(text, vocab)
    offsets, at = [], 0
    for piece in toks.text_spans:
        offsets.append((at, at + len(piece)))
        at += len(piece)
    positions = []
    for (a, b), word in zip(spans, fills):
        # a token may carry the whitespace in front of the slot
        starts = (a, a - 1) if a > 0 and text[a - 1].isspace() else (a,)
        idx = [i for i, (s, e) in enumerate(offsets) if e == b and s in starts]
        if len(idx) != 1:
            raise ConfigError(f"slot filler {word!r} is not a single token in {text!r}")
        positions.append(idx[0])
    return toks, positions


def qk_dot_products(weights: Weights, vocab: Vocab, fill_pairs: Sequence, head: tuple,
                    template: str = "He {} the {}", corruptions: Optional[Sequence] = None,
                    query_slot: int = 1, key_slot: int = 0) -> QKMatrix:
    """Raw query.key products of one head between the critical tokens of several idioms.

    Each entry of ``fill_pairs`` fills the template's two slots. Rows take the
    query at ``query_slot`` of pair ``i``, columns the key at ``key_slot`` of
    pair ``j``, each from the run of its own filled template. Vectors are taken
    after positional encoding and before the ``1/sqrt(d_head)`` scale.
    ``corruptions[i]`` is ``(alternatives for slot 0, alternatives for slot 1)``.
    """
    layer, h = head
    if not 0 <= layer < weights.config.n_layers or not 0 <= h < weights.config.n_heads:
        raise ConfigError(f"head {head} outside the model")
    if {query_slot, key_slot} != {0, 1}:
        raise ConfigError("query_slot and key_slot must be 0 and 1 in some order")
    lengths = set()

    def vectors(fills):
        toks, pos = _slot_positions(template, fills, vocab)
        lengths.add(len(toks))
        if len(lengths) > 1:
            raise ConfigError("filled templates tokenize to different lengths")
        cache = forward(weights, toks)
        return (cache.q[layer, h, pos[query_slot]].astype(np.float64),
                cache.k[layer, h, pos[key_slot]].astype(np.float64))

    pairs = [tuple(p) for p in fill_pairs]
    clean = [vectors(p) for p in pairs]
    n = len(pairs)
    values = np.array([[clean[i][0] @ clean[j][1] for j in range(n)] for i in range(n)])
    aux = {}
    if corruptions is not None:
        if len(corruptions) != n:
            raise ConfigError("need one corruption entry per fill pair")
        for i, alts in enumerate(corruptions):
            q_alts, k_alts = alts[query_slot], alts[key_slot]
            q_i, k_i = clean[i]
            corrupted_q = k_vals = None
            if q_alts:
                corrupted_q = float(np.mean([vectors(_swap(pairs[i], query_slot, w))[0] @ k_i for w in q_alts]))
            if k_alts:
                k_vals = float(np.mean([q_i @ vectors(_swap(pairs[i], key_slot, w))[1] for w in k_alts]))
            aux[i] = (corrupted_q, k_vals)
    rows = [p[query_slot].strip() for p in pairs]
    cols = [p[key_slot].strip() for p in pairs]
    return QKMatrix(rows, cols, values, aux, (layer, h))


def _swap(pair, slot, word):
    out = list(pair)
    out[slot] = word
    return tuple(out)


# ---------------------------------------------------------------------------
# Structural reports


def detect_augmented_reception(circuit: Circuit, corrupted_position: int) -> list:
    """Heads with a retained Q edge on a token after the corrupted one."""
    if circuit.is_merged:
        raise AnalysisError("augmented reception is defined for single-corruption circuits only")
    if not 0 <= corrupted_position < circuit.T:
        raise AnalysisError(f"corrupted position {corrupted_position} outside [0, {circuit.T - 1}]")
    heads = {e.dst for e in circuit.edges if e.etype == Q and e.dst.token > corrupted_position}
    return sorted(heads, key=lambda n: (n.layer, n.head, n.token))


def antagonistic_components(circuit: Circuit) -> list:
    """Retained edges with negative effect, most negative first."""
    neg = [(e, d) for e, d in circuit.edges.items() if d < 0]
    neg.sort(key=lambda r: (r[1], r[0].head_node.layer, r[0].head_node.head, r[0].head_node.token, edge_sort_key(r[0])))
    return neg
