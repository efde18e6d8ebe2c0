"""Computational graph at head/residual/token granularity, and patched runs.

Nodes are post-MLP residual streams ``Resid(l, t)`` (``l = -1`` is the
embedding) and attention heads ``Head(l, h, t)``. Edges are Q/K/V reads from
``Resid(l-1, .)`` into ``Head(l, h, t)`` and the ``HeadOut`` write from
``Head(l, h, t)`` into ``Resid(l, t)``. K and V edges only connect strictly
earlier source tokens; the residual chain itself is never an edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

from .errors import PatchError
from .model import ActivationCache, LayerPatch, ModelConfig, TokenSequence, Weights, run

RESID, HEAD = "Resid", "Head"
Q, K, V, HEAD_OUT = "Q", "K", "V", "HeadOut"
ETYPES = (HEAD_OUT, Q, K, V)
_ETYPE_RANK = {e: i for i, e in enumerate(ETYPES)}


class NodeId(NamedTuple):
    kind: str
    layer: int
    token: int
    head: int = -1  # -1 for residual nodes

    def __str__(self):
        if self.kind == RESID:
            return f"R{self.layer}@{self.token}"
        return f"H{self.layer}.{self.head}@{self.token}"

    def to_dict(self):
        d = {"kind": self.kind, "layer": self.layer, "token": self.token}
        if self.kind == HEAD:
            d["head"] = self.head
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d["layer"]), int(d["token"]), int(d.get("head", -1)))


def Resid(layer: int, token: int) -> NodeId:
    return NodeId(RESID, layer, token)


def Head(layer: int, head: int, token: int) -> NodeId:
    return NodeId(HEAD, layer, token, head)


class EdgeId(NamedTuple):
    src: NodeId
    dst: NodeId
    etype: str

    def __str__(self):
        return f"{self.src}-{self.etype}->{self.dst}"

    @property
    def head_node(self) -> NodeId:
        return self.src if self.etype == HEAD_OUT else self.dst

    def to_dict(self):
        return {"etype": self.etype, "src": self.src.to_dict(), "dst": self.dst.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(NodeId.from_dict(d["src"]), NodeId.from_dict(d["dst"]), d["etype"])


def q_edge(layer, head, token) -> EdgeId:
    return EdgeId(Resid(layer - 1, token), Head(layer, head, token), Q)


def k_edge(layer, head, src_token, dst_token) -> EdgeId:
    return EdgeId(Resid(layer - 1, src_token), Head(layer, head, dst_token), K)


def v_edge(layer, head, src_token, dst_token) -> EdgeId:
    return EdgeId(Resid(layer - 1, src_token), Head(layer, head, dst_token), V)


def out_edge(layer, head, token) -> EdgeId:
    return EdgeId(Head(layer, head, token), Resid(layer, token), HEAD_OUT)


def node_sort_key(node: NodeId):
    """Reverse topological key: layer desc, token desc, Resid before Head, head asc."""
    return (-node.layer, -node.token, 0 if node.kind == RESID else 1, node.head)


def edge_sort_key(edge: EdgeId):
    """Evaluation order of edges into one node: HeadOut, Q, K, V, then src token, layer, head."""
    s = edge.src
    return (_ETYPE_RANK[edge.etype], s.token, s.layer, s.head)


@dataclass(frozen=True)
class CircuitGraph:
    """Full node/edge universe for ``T`` tokens, truncated after ``max_layer``."""

    config: ModelConfig
    T: int
    max_layer: int

    def __post_init__(self):
        if not 1 <= self.T <= self.config.max_seq:
            raise ValueError(f"T={self.T} outside [1, {self.config.max_seq}]")
        if not 0 <= self.max_layer <= self.config.n_layers - 1:
            raise ValueError(f"max_layer={self.max_layer} outside [0, {self.config.n_layers - 1}]")

    @property
    def n_heads(self):
        return self.config.n_heads

    @cached_property
    def nodes(self) -> tuple:
        out = [Resid(l, t) for l in range(-1, self.max_layer + 1) for t in range(self.T)]
        out += [Head(l, h, t) for l in range(self.max_layer + 1) for h in range(self.n_heads) for t in range(self.T)]
        return tuple(out)

    @cached_property
    def edges(self) -> tuple:
        out = []
        for l in range(self.max_layer + 1):
            for h in range(self.n_heads):
                for t in range(self.T):
                    out.append(q_edge(l, h, t))
                    out.extend(k_edge(l, h, s, t) for s in range(t))
                    out.extend(v_edge(l, h, s, t) for s in range(t))
                    out.append(out_edge(l, h, t))
        return tuple(out)

    def sink(self) -> NodeId:
        return Resid(self.max_layer, self.T - 1)

    def contains_node(self, n: NodeId) -> bool:
        if not 0 <= n.token < self.T:
            return False
        if n.kind == RESID:
            return -1 <= n.layer <= self.max_layer and n.head == -1
        if n.kind == HEAD:
            return 0 <= n.layer <= self.max_layer and 0 <= n.head < self.n_heads
        return False

    def contains_edge(self, e: EdgeId) -> bool:
        try:
            src, dst, etype = e
        except (TypeError, ValueError):
            return False
        if not (self.contains_node(src) and self.contains_node(dst)):
            return False
        if etype == HEAD_OUT:
            return src.kind == HEAD and dst.kind == RESID and src.layer == dst.layer and src.token == dst.token
        if etype in (Q, K, V):
            if not (src.kind == RESID and dst.kind == HEAD and src.layer == dst.layer - 1):
                return False
            return src.token == dst.token if etype == Q else src.token < dst.token
        return False

    def incoming(self, node: NodeId) -> list:
        """Edges into ``node`` in evaluation order."""
        if node.kind == RESID:
            if node.layer < 0:
                return []
            return [out_edge(node.layer, h, node.token) for h in range(self.n_heads)]
        l, h, t = node.layer, node.head, node.token
        edges = [q_edge(l, h, t)]
        edges += [k_edge(l, h, s, t) for s in range(t)]
        edges += [v_edge(l, h, s, t) for s in range(t)]
        return edges


def build_graph(config: ModelConfig, T: int, max_layer: int) -> CircuitGraph:
    return CircuitGraph(config, int(T), int(max_layer))


def reverse_topological_order(graph: CircuitGraph) -> list:
    return sorted(graph.nodes, key=node_sort_key)


def patch_masks(graph: CircuitGraph, patches: Iterable[EdgeId]) -> dict:
    """Translate a set of edges into per-layer LayerPatch masks."""
    masks = {}
    for e in patches:
        if not graph.contains_edge(e):
            raise PatchError(f"edge {e} is not in the graph universe (T={graph.T}, max_layer={graph.max_layer})")
        head = e.head_node
        lp = masks.get(head.layer)
        if lp is None:
            lp = masks[head.layer] = LayerPatch.empty(graph.n_heads, graph.T)
        if e.etype == Q:
            lp.q[head.head, head.token] = True
        elif e.etype == K:
            lp.k[head.head, head.token, e.src.token] = True
        elif e.etype == V:
            lp.v[head.head, head.token, e.src.token] = True
        else:
            lp.out[head.head, head.token] = True
    return masks


def forward_with_patches(weights: Weights, clean, corrupt_cache: ActivationCache,
                         patches: Iterable[EdgeId], max_layer: int,
                         graph: CircuitGraph | None = None) -> ActivationCache:
    """Run ``clean`` with every edge in ``patches`` fed from ``corrupt_cache``.

    Layers above ``max_layer`` are not computed.
    """
    ids = clean.ids if isinstance(clean, TokenSequence) else tuple(clean)
    T = len(ids)
    if corrupt_cache.seq_len != T:
        raise PatchError(f"clean length {T} differs from corrupted length {corrupt_cache.seq_len}")
    if corrupt_cache.n_layers_computed < max_layer + 1:
        raise PatchError(f"corrupted cache covers {corrupt_cache.n_layers_computed} layers, need {max_layer + 1}")
    if graph is None:
        graph = build_graph(weights.config, T, max_layer)
    elif graph.T != T or graph.max_layer != max_layer:
        raise PatchError("graph does not match sequence length / max_layer")
    masks = patch_masks(graph, patches)
    return run(weights, ids, corrupt=corrupt_cache, patches=masks, max_layer=max_layer)
