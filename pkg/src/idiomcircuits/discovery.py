"""Greedy edge pruning against an intermediate-layer cosine metric, threshold
sweeps, circuit merging and interpretability pruning."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, IncompatibleCircuitsError
from .experiment import ExperimentSpec
from .graph import (HEAD, HEAD_OUT, Q, CircuitGraph, EdgeId, NodeId, Resid, build_graph,
                    edge_sort_key, forward_with_patches, out_edge, reverse_topological_order)
from .model import ActivationCache, TokenSequence, Vocab, Weights, layer_cosine, run, tokenize

TYPICAL_TAU_RANGE = (0.004, 0.008)
JUMP_RATIO = 1.5
TAIL_RESIDUAL = 0.2


def metric(patched_cache: ActivationCache, meaning_cache: ActivationCache, layer: int) -> float:
    """Cosine to the meaning string of the final-token residual after block ``layer``."""
    return layer_cosine(patched_cache, meaning_cache, layer + 1)


class PatchingProblem:
    """Clean/corrupted/meaning runs for one corruption, truncated at ``layer``.

    The corrupted and meaning caches are computed once and reused for every
    edge evaluation.
    """

    def __init__(self, weights: Weights, clean: TokenSequence, corrupt: TokenSequence,
                 meaning: TokenSequence, layer: int):
        if len(clean) != len(corrupt):
            raise ConfigError(f"clean has {len(clean)} tokens, corrupted has {len(corrupt)}")
        self.weights = weights
        self.clean = clean
        self.corrupt = corrupt
        self.meaning = meaning
        self.layer = int(layer)
        self.graph = build_graph(weights.config, len(clean), self.layer)
        self.corrupt_cache = run(weights, corrupt.ids, max_layer=self.layer)
        self.meaning_cache = run(weights, meaning.ids, max_layer=self.layer)
        self.n_evaluations = 0

    def patched(self, patches) -> ActivationCache:
        return forward_with_patches(self.weights, self.clean, self.corrupt_cache, patches, self.layer, graph=self.graph)

    def score(self, patches) -> float:
        self.n_evaluations += 1
        return metric(self.patched(patches), self.meaning_cache, self.layer)


def make_problem(weights: Weights, vocab: Vocab, spec: ExperimentSpec, index: int,
                 layer: Optional[int] = None) -> PatchingProblem:
    layer = spec.layer if layer is None else layer
    if layer is None:
        raise ConfigError("experiment has no layer L; choose one with select_L or pass it explicitly")
    spec.check(vocab, weights.config)
    return PatchingProblem(
        weights,
        tokenize(spec.idiom, vocab),
        tokenize(spec.corruptions[index].string, vocab),
        tokenize(spec.meaning, vocab),
        layer,
    )


# ---------------------------------------------------------------------------
# Circuits


def _corruption_key(entry):
    return (entry["position"], entry["string"], entry["tau"])


@dataclass(eq=False)
class Circuit:
    """Retained edges with signed effect weights.

    ``metadata["corruptions"]`` holds one record per contributing corruption
    (string, position, tau and the cosines measured for it).
    """

    edges: dict
    n_heads: int
    T: int
    layer: int
    metadata: dict = field(default_factory=dict)

    @property
    def corruptions(self) -> list:
        return self.metadata.get("corruptions", [])

    @property
    def is_merged(self) -> bool:
        return len(self.corruptions) > 1

    @property
    def nodes(self) -> set:
        out = {Resid(l, t) for l in range(-1, self.layer + 1) for t in range(self.T)}
        for e in self.edges:
            out.add(e.src)
            out.add(e.dst)
        return out

    @property
    def head_nodes(self) -> set:
        return {n for n in self.nodes if n.kind == HEAD}

    def incoming(self, node: NodeId) -> list:
        return sorted((e for e in self.edges if e.dst == node), key=edge_sort_key)

    def sorted_edges(self) -> list:
        return sorted(self.edges, key=lambda e: (e.head_node.layer, e.head_node.head, e.head_node.token, edge_sort_key(e)))

    def graph_key(self):
        return (self.n_heads, self.T, self.layer)

    def __eq__(self, other):
        return (
            isinstance(other, Circuit)
            and self.graph_key() == other.graph_key()
            and self.edges == other.edges
            and self.metadata == other.metadata
        )

    def __len__(self):
        return len(self.edges)


@dataclass
class EdgeEvaluation:
    edge: EdgeId
    d: float
    removed: bool
    n_removed_before: int
    skipped: bool = False


def discover_circuit(weights: Weights, vocab: Vocab, spec: ExperimentSpec, index: int,
                     tau: Optional[float] = None, layer: Optional[int] = None,
                     trace: Optional[list] = None, problem: Optional[PatchingProblem] = None) -> Circuit:
    """Greedy reverse-topological pruning of the edge universe.

    Every incoming edge of every node is tentatively patched on top of the
    edges already removed; it is removed for good when the cosine changes by at
    most ``tau`` and otherwise retained with the signed change ``d``. Edges into
    a head whose output edge is already removed cannot change anything and are
    removed without a forward pass.
    """
    entry = spec.corruptions[index]
    tau = entry.tau if tau is None else float(tau)
    if problem is None:
        problem = make_problem(weights, vocab, spec, index, layer)
    graph = problem.graph

    removed: set = set()
    retained: dict = {}
    cos_full = problem.score(removed)
    current = cos_full
    for node in reverse_topological_order(graph):
        for e in graph.incoming(node):
            skipped = e.dst.kind == HEAD and out_edge(e.dst.layer, e.dst.head, e.dst.token) in removed
            if skipped:
                d, new = 0.0, current
            else:
                new = problem.score(removed | {e})
                d = current - new
            drop = abs(d) <= tau
            if trace is not None:
                trace.append(EdgeEvaluation(e, d, drop, len(removed), skipped))
            if drop:
                removed.add(e)
                current = new
            else:
                retained[e] = d

    record = {
        "string": entry.string,
        "position": int(entry.position),
        "tau": float(tau),
        "cos_full": float(cos_full),
        "cos_circuit": float(current),
        "cos_corrupt": float(metric(problem.corrupt_cache, problem.meaning_cache, problem.layer)),
    }
    metadata = {
        "idiom": spec.idiom,
        "meaning": spec.meaning,
        "layer": int(problem.layer),
        "tokens": list(problem.clean.text_spans),
        "corruptions": [record],
    }
    return Circuit(retained, graph.n_heads, graph.T, problem.layer, metadata)


def complement_patches(graph: CircuitGraph, circuit: Circuit) -> set:
    return set(graph.edges) - set(circuit.edges)


def circuit_cosine(weights: Weights, vocab: Vocab, spec: ExperimentSpec, circuit: Circuit) -> list:
    """Cosine with every edge outside ``circuit`` patched, once per corruption of ``spec``."""
    out = []
    for i in range(len(spec.corruptions)):
        problem = make_problem(weights, vocab, spec, i, circuit.layer)
        out.append(problem.score(complement_patches(problem.graph, circuit)))
    return out


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(eq=False)
class SweepResult:
    taus: tuple
    edge_counts: tuple
    cosines: tuple
    circuits: tuple = ()
    label: str = ""

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        self.edge_counts = tuple(int(c) for c in self.edge_counts)
        self.cosines = tuple(float(c) for c in self.cosines)
        if not (len(self.taus) == len(self.edge_counts) == len(self.cosines)):
            raise ValueError("sweep columns differ in length")
        _check_grid(self.taus)
        if any(c < 0 for c in self.edge_counts):
            raise ValueError("edge counts must be non-negative")

    def __len__(self):
        return len(self.taus)


def _check_grid(grid):
    if not len(grid):
        raise ValueError("threshold grid is empty")
    if any(not (b > a) for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly ascending")


def _sweep_point(args):
    weights, vocab, spec, index, tau, layer = args
    return discover_circuit(weights, vocab, spec, index, tau=tau, layer=layer)


def threshold_sweep(weights: Weights, vocab: Vocab, spec: ExperimentSpec, index: int, grid,
                    layer: Optional[int] = None, workers: int = 1) -> SweepResult:
    """Independent discovery run per threshold in ``grid``."""
    grid = [float(t) for t in grid]
    _check_grid(grid)
    if any(t <= 0 for t in grid):
        raise ValueError("thresholds must be positive")
    jobs = [(weights, vocab, spec, index, t, layer) for t in grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            circuits = list(pool.map(_sweep_point, jobs))
    else:
        circuits = [_sweep_point(j) for j in jobs]
    return SweepResult(
        taus=grid,
        edge_counts=[len(c) for c in circuits],
        cosines=[c.corruptions[0]["cos_circuit"] for c in circuits],
        circuits=tuple(circuits),
        label=spec.corruptions[index].string,
    )


@dataclass
class ThresholdSuggestion:
    tau: float
    flags: list
    tail_end: Optional[int] = None
    jumps: list = field(default_factory=list)


def _exponential_tail(taus, log_counts, counts):
    """Index of the last point of the longest decreasing log-linear prefix (>= 3 points)."""
    end = None
    for k in range(2, len(taus)):
        if not all(counts[i + 1] < counts[i] for i in range(k)):
            break
        x, y = taus[: k + 1], log_counts[: k + 1]
        slope, icpt = np.polyfit(x, y, 1)
        if slope >= 0 or np.max(np.abs(y - (slope * x + icpt))) >= TAIL_RESIDUAL:
            break
        end = k
    return end


def suggest_threshold(sweep: SweepResult) -> ThresholdSuggestion:
    """Heuristic threshold between the low-threshold exponential tail and the first jump.

    A jump is an adjacent-threshold edge-count ratio of at least 1.5 at or
    beyond the end of the tail. The suggestion is the midpoint between the
    tail's last threshold and the threshold where the first jump starts.
    """
    taus = np.asarray(sweep.taus, dtype=float)
    counts = np.asarray(sweep.edge_counts, dtype=float)
    if len(taus) < 4:
        raise ValueError("threshold suggestion needs at least 4 sweep points")
    flags = []
    log_counts = np.log(np.maximum(counts, 1.0))
    tail = _exponential_tail(taus, log_counts, counts)
    if tail is None:
        flags.append("no exponential tail detected")
    start = 0 if tail is None else tail

    jumps = []
    for i in range(start, len(taus) - 1):
        a, b = counts[i], counts[i + 1]
        ratio = math.inf if (b == 0 and a > 0) else (a / b if b > 0 else 1.0)
        if ratio >= JUMP_RATIO:
            jumps.append(i)

    if not jumps:
        flags.append("no topology jump detected")
        tau = float(np.median(taus))
    else:
        if len(jumps) > 1:
            flags.append(f"multiple jumps detected ({len(jumps)}); using the lowest")
        j = jumps[0]
        if j == start:
            flags.append("jump adjacent to the start of the plateau")
        tau = float((taus[start] + taus[j]) / 2.0)
    lo, hi = TYPICAL_TAU_RANGE
    if not lo <= tau <= hi:
        flags.append(f"suggested threshold {tau:.4g} is outside the typical range {lo}-{hi}")
    flags.append("manual confirmation advised")
    return ThresholdSuggestion(tau, flags, tail, jumps)


# ---------------------------------------------------------------------------
# Merging and pruning


def _pick(a: float, b: float) -> float:
    """Larger magnitude wins; on equal magnitude the larger value."""
    if abs(a) != abs(b):
        return a if abs(a) > abs(b) else b
    return max(a, b)


def merge_circuits(circuits) -> Circuit:
    """Union of edges; each weight is the input weight of largest magnitude, sign kept."""
    circuits = list(circuits)
    if not circuits:
        raise IncompatibleCircuitsError("nothing to merge")
    first = circuits[0]
    for c in circuits[1:]:
        if c.graph_key() != first.graph_key():
            raise IncompatibleCircuitsError(f"graph shape {c.graph_key()} differs from {first.graph_key()}")
        if c.metadata.get("idiom") != first.metadata.get("idiom"):
            raise IncompatibleCircuitsError("circuits belong to different idiom strings")
    edges: dict = {}
    for c in circuits:
        for e, d in c.edges.items():
            edges[e] = _pick(edges[e], d) if e in edges else d
    entries = {}
    for c in circuits:
        for rec in c.corruptions:
            key = _corruption_key(rec)
            if key in entries and entries[key] != rec:
                merged = {k: v for k, v in entries[key].items() if rec.get(k) == v}
                entries[key] = merged
            else:
                entries.setdefault(key, dict(rec))
    metadata = {}
    for k, v in first.metadata.items():
        if k != "corruptions" and all(c.metadata.get(k) == v for c in circuits):
            metadata[k] = v
    metadata["corruptions"] = [entries[k] for k in sorted(entries)]
    return Circuit(edges, first.n_heads, first.T, first.layer, metadata)


def prune_circuit(merged: Circuit) -> Circuit:
    """Drop heads whose retained incoming edges are empty or only their Q edge.

    A dropped head loses all its edges. Repeats to a fixpoint; since heads only
    read from residual nodes the first pass already reaches it.
    """
    edges = dict(merged.edges)
    while True:
        incoming: dict = {}
        heads = set()
        for e in edges:
            heads.add(e.head_node)
            if e.etype != HEAD_OUT:
                incoming.setdefault(e.dst, []).append(e.etype)
        doomed = {h for h in heads if all(t == Q for t in incoming.get(h, []))}
        if not doomed:
            break
        edges = {e: d for e, d in edges.items() if e.head_node not in doomed}
    metadata = dict(merged.metadata)
    metadata["pruned"] = True
    return Circuit(edges, merged.n_heads, merged.T, merged.layer, metadata)
