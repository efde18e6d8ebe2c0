"""Hand-built models with known circuits, and a brute-force single-edge oracle.

Every fixture uses a tiny vocabulary around "He kicked the bucket" / "He died".
Residual dimensions are one-hot token directions plus a few named feature
directions; heads are wired by hand and their query/key/value gains are then
calibrated on the idiom string so that designed attention is hard
(softmax mass >= 1 - 1e-4) and designed writes have a set magnitude.

The oracle in this module recomputes patched runs with per-token loops in
float64 and shares no forward-pass code with :mod:`idiomcircuits.model`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .container import save_model, write_vocab
from .errors import FixtureError, OracleError
from .experiment import Corruption, ExperimentSpec, dump_experiment
from .graph import EdgeId, build_graph, k_edge, out_edge, q_edge, v_edge
from .model import ModelConfig, Vocab, Weights, run, tokenize

TOKENS = ("He", " kicked", " booted", " the", " bucket", " pail", " died")
FEATURES = ("const", "sink", "meaning", "feature", "echo")
IDIOM = "He kicked the bucket"
MEANING = "He died"
VERB_CORRUPTION = ("He booted the bucket", 1)
NOUN_CORRUPTION = ("He kicked the pail", 3)

MATCH_SCORE = 30.0
SINK_SCORE = 12.0
DIAG_SCORE = 40.0
DIAG_LEAK_SCORE = 10.0
MEANING_GAIN = 8.0

# head-space channels
CH_SINK, CH_MATCH, CH_VALUE, CH_TOKEN0 = 0, 1, 2, 3


def fixture_vocab() -> Vocab:
    return Vocab(TOKENS)


def _dim(name):
    if name in FEATURES:
        return len(TOKENS) + FEATURES.index(name)
    return TOKENS.index(name)


@dataclass(frozen=True)
class HeadDesign:
    """Hand wiring for one head.

    ``query``/``key`` name the residual directions feeding the match channel,
    ``value`` the direction feeding the value channel and ``writes`` the output
    direction with signed magnitude ``gain``. ``diagonal`` heads instead match
    every token with itself.
    """

    layer: int
    head: int
    query: tuple = ()
    key: tuple = ()
    value: tuple = ()
    writes: str = "meaning"
    gain: float = MEANING_GAIN
    diagonal: bool = False
    # (query token, key token): extra off-diagonal match for diagonal heads
    leak: Optional[tuple] = None


@dataclass(frozen=True)
class PlantedSpec:
    """Ground truth for one fixture.

    ``planted[i]`` is the causal edge set for corruption ``i``;
    ``tau_band[i]`` is an open interval of thresholds that recovers it exactly.
    """

    name: str
    config: ModelConfig
    heads: tuple
    corruptions: tuple  # (string, position, documented tau)
    layer: int
    planted: tuple
    tau_band: tuple
    write_layer: int
    suppressors: tuple = ()
    notes: str = ""

    def experiment(self) -> ExperimentSpec:
        return ExperimentSpec(
            idiom=IDIOM,
            meaning=MEANING,
            corruptions=[Corruption(s, p, t) for s, p, t in self.corruptions],
            layer=self.layer,
            name=self.name,
        )


def _config(n_layers, n_heads):
    V = len(TOKENS)
    return ModelConfig(
        n_layers=n_layers, n_heads=n_heads, d_model=V + len(FEATURES), d_head=CH_TOKEN0 + V,
        d_mlp=4, vocab_size=V, max_seq=8, norm_kind="rms", positional_kind="learned",
    )


def _idiom_head_edges(layer, head, dst=3, src=1, q=False):
    edges = {out_edge(layer, head, dst), k_edge(layer, head, src, dst), v_edge(layer, head, src, dst)}
    if q:
        edges.add(q_edge(layer, head, dst))
    return frozenset(edges)


_IDIOM_HEAD = dict(query=(" bucket",), key=(" kicked",), value=(" kicked",))


def planted_specs() -> dict:
    """All shipped fixtures by name."""
    specs = {}

    specs["minimal"] = PlantedSpec(
        name="minimal",
        config=_config(1, 1),
        heads=(HeadDesign(0, 0, **_IDIOM_HEAD),),
        corruptions=((*VERB_CORRUPTION, 0.05),),
        layer=0,
        planted=(_idiom_head_edges(0, 0),),
        tau_band=((1e-3, 0.5),),
        write_layer=0,
        notes="Head (0,0) on ' bucket' attends to ' kicked' and writes the meaning direction.",
    )

    specs["single"] = PlantedSpec(
        name="single",
        config=_config(1, 2),
        heads=(
            HeadDesign(0, 0, **_IDIOM_HEAD),
            HeadDesign(0, 1, diagonal=True, writes="echo", gain=1.0, leak=(" pail", " the")),
        ),
        corruptions=((*VERB_CORRUPTION, 0.05), (*NOUN_CORRUPTION, 0.05)),
        layer=0,
        planted=(_idiom_head_edges(0, 0), frozenset({out_edge(0, 0, 3), q_edge(0, 0, 3)})),
        tau_band=((1e-3, 0.5), (1e-3, 0.5)),
        write_layer=0,
        notes=(
            "Head (0,0) is the idiom head. Head (0,1) attends to its own token; the query of "
            "' pail' also matches the key of ' the' (score 10 vs 40 on the diagonal), so "
            "patching its Q edge under the noun corruption must leave activations unchanged."
        ),
    )

    specs["chain"] = PlantedSpec(
        name="chain",
        config=_config(2, 2),
        heads=(
            HeadDesign(0, 0, query=(" bucket",), key=(" kicked",), value=(" kicked",), writes="feature"),
            HeadDesign(1, 1, query=("feature",), key=(" kicked",), value=(" kicked",)),
        ),
        corruptions=((*VERB_CORRUPTION, 0.05),),
        layer=1,
        planted=(_idiom_head_edges(0, 0) | _idiom_head_edges(1, 1, q=True),),
        tau_band=((1e-3, 0.3),),
        write_layer=1,
        notes=(
            "Head (0,0) writes a feature into ' bucket' when it sees ' kicked'; head (1,1) only "
            "attends from ' bucket' to ' kicked' when its query carries that feature, so the "
            "verb corruption reaches it through its Q edge (augmented reception)."
        ),
    )

    specs["suppressor"] = PlantedSpec(
        name="suppressor",
        config=_config(1, 2),
        heads=(
            HeadDesign(0, 0, **_IDIOM_HEAD, gain=4.0),
            HeadDesign(0, 1, **_IDIOM_HEAD, gain=-2.0),
        ),
        corruptions=((*VERB_CORRUPTION, 0.03),),
        layer=0,
        planted=(_idiom_head_edges(0, 0) | _idiom_head_edges(0, 1),),
        tau_band=((1e-3, 0.05),),
        write_layer=0,
        suppressors=(_idiom_head_edges(0, 1),),
        notes="Head (0,1) fires with the idiom head but writes against the meaning direction.",
    )

    specs["step"] = PlantedSpec(
        name="step",
        config=_config(4, 1),
        heads=(HeadDesign(2, 0, **_IDIOM_HEAD),),
        corruptions=((*VERB_CORRUPTION, 0.05),),
        layer=2,
        planted=(_idiom_head_edges(2, 0),),
        tau_band=((1e-3, 0.5),),
        write_layer=2,
        notes="Only block 2 does anything; the idiom margin steps up there and stays flat.",
    )
    return specs


def _check_design(spec: PlantedSpec):
    c = spec.config
    if c.d_model < len(TOKENS) + len(FEATURES):
        raise FixtureError(f"{spec.name}: d_model {c.d_model} cannot hold {len(TOKENS)} tokens and {len(FEATURES)} features")
    if c.d_head < CH_TOKEN0 + len(TOKENS) and any(h.diagonal for h in spec.heads):
        raise FixtureError(f"{spec.name}: d_head {c.d_head} too small for a diagonal head over {len(TOKENS)} tokens")
    if c.d_head < CH_TOKEN0:
        raise FixtureError(f"{spec.name}: d_head must be at least {CH_TOKEN0}")
    if c.vocab_size != len(TOKENS):
        raise FixtureError(f"{spec.name}: vocab_size must be {len(TOKENS)}")
    seen = set()
    for h in spec.heads:
        if not (0 <= h.layer < c.n_layers and 0 <= h.head < c.n_heads):
            raise FixtureError(f"{spec.name}: head ({h.layer},{h.head}) outside the model")
        if (h.layer, h.head) in seen:
            raise FixtureError(f"{spec.name}: head ({h.layer},{h.head}) designed twice")
        seen.add((h.layer, h.head))
    T = len(IDIOM.split())
    graph = build_graph(c, T, spec.layer)
    for edges in spec.planted:
        bad = [e for e in edges if not graph.contains_edge(e)]
        if bad:
            raise FixtureError(f"{spec.name}: planted edges outside the edge universe: {bad}")


def _weights(config, p):
    return Weights(config=config, **p)


def build_planted_model(spec: PlantedSpec):
    """Return (config, weights, vocab, experiment) for a planted fixture."""
    _check_design(spec)
    c = spec.config
    vocab = fixture_vocab()
    n, H, d, dh, V = c.n_layers, c.n_heads, c.d_model, c.d_head, c.vocab_size
    p = {
        "W_E": np.zeros((V, d)),
        "W_pos": np.zeros((c.max_seq, d)),
        "W_Q": np.zeros((n, H, d, dh)),
        "W_K": np.zeros((n, H, d, dh)),
        "W_V": np.zeros((n, H, d, dh)),
        "W_O": np.zeros((n, H, dh, d)),
        "ln1_w": np.ones((n, d)),
        "ln2_w": np.ones((n, d)),
        "W_in": np.zeros((n, d, c.d_mlp)),
        "b_in": np.zeros((n, c.d_mlp)),
        "W_out": np.zeros((n, c.d_mlp, d)),
        "b_out": np.zeros((n, d)),
        "ln_final_w": np.ones(d),
    }
    for t, tok in enumerate(TOKENS):
        p["W_E"][t, t] = 1.0
        p["W_E"][t, _dim("const")] = 1.0
    p["W_E"][vocab.id(" died"), _dim("meaning")] = MEANING_GAIN
    p["W_pos"][0, _dim("sink")] = 1.0
    p["W_U"] = p["W_E"].T.copy()

    idiom = tokenize(IDIOM, vocab).ids
    noun_corrupt = tokenize(NOUN_CORRUPTION[0], vocab).ids
    dst, src = 3, 1
    scale = math.sqrt(dh)

    for design in sorted(spec.heads, key=lambda h: (h.layer, h.head)):
        l, h = design.layer, design.head
        if design.diagonal:
            for t, tok in enumerate(TOKENS):
                p["W_Q"][l, h, t, CH_TOKEN0 + t] = 1.0
                p["W_K"][l, h, t, CH_TOKEN0 + t] = 1.0
            p["W_V"][l, h, _dim("const"), CH_VALUE] = 1.0
            if design.leak is not None:
                # the leaked-to token carries a different value, so a query patch
                # that also moved the diagonal score would show up in the output
                p["W_V"][l, h, _dim(design.leak[1]), CH_VALUE] = 2.0
            p["W_O"][l, h, CH_VALUE, _dim(design.writes)] = 1.0
            cache = run(_weights(c, p), idiom, max_layer=l)
            raw = float(cache.q[l][h][dst] @ cache.k[l][h][dst])
            g = math.sqrt(DIAG_SCORE * scale / raw)
            p["W_Q"][l, h, :, CH_TOKEN0:] *= g
            p["W_K"][l, h, :, CH_TOKEN0:] *= g
            if design.leak is not None:
                qt, kt = vocab.id(design.leak[0]), vocab.id(design.leak[1])
                p["W_Q"][l, h, qt, CH_TOKEN0 + kt] = 1.0
                cache = run(_weights(c, p), noun_corrupt, max_layer=l)
                raw = float(cache.q[l][h][dst][CH_TOKEN0 + kt] * cache.k[l][h][2][CH_TOKEN0 + kt])
                p["W_Q"][l, h, qt, CH_TOKEN0 + kt] *= DIAG_LEAK_SCORE * scale / raw
        else:
            for name in design.query:
                p["W_Q"][l, h, _dim(name), CH_MATCH] = 1.0
            for name in design.key:
                p["W_K"][l, h, _dim(name), CH_MATCH] = 1.0
            p["W_Q"][l, h, _dim("const"), CH_SINK] = 1.0
            p["W_K"][l, h, _dim("sink"), CH_SINK] = 1.0
            cache = run(_weights(c, p), idiom, max_layer=l)
            q, k = cache.q[l][h], cache.k[l][h]
            g_match = math.sqrt(MATCH_SCORE * scale / float(q[dst][CH_MATCH] * k[src][CH_MATCH]))
            g_sink = math.sqrt(SINK_SCORE * scale / float(q[dst][CH_SINK] * k[0][CH_SINK]))
            p["W_Q"][l, h, :, CH_MATCH] *= g_match
            p["W_K"][l, h, :, CH_MATCH] *= g_match
            p["W_Q"][l, h, :, CH_SINK] *= g_sink
            p["W_K"][l, h, :, CH_SINK] *= g_sink
        if design.value:
            for name in design.value:
                p["W_V"][l, h, _dim(name), CH_VALUE] = 1.0
            cache = run(_weights(c, p), idiom, max_layer=l)
            raw = float(cache.v[l][h][src][CH_VALUE])
            p["W_O"][l, h, CH_VALUE, _dim(design.writes)] = design.gain / raw
        elif design.diagonal:
            cache = run(_weights(c, p), idiom, max_layer=l)
            raw = float(cache.v[l][h][dst][CH_VALUE])
            p["W_O"][l, h, CH_VALUE, _dim(design.writes)] = design.gain / raw

    weights = _weights(c, p)
    return c, weights, vocab, spec.experiment()


def load_planted(name: str):
    return build_planted_model(planted_specs()[name])


def write_fixture_files(out_dir, names=None) -> list:
    """Write ``<name>/model.tensors``, ``vocab.tsv`` and ``experiment.yaml`` per fixture."""
    out_dir = Path(out_dir)
    written = []
    for name, spec in planted_specs().items():
        if names and name not in names:
            continue
        _, weights, vocab, experiment = build_planted_model(spec)
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        save_model(d / "model.tensors", weights)
        write_vocab(d / "vocab.tsv", vocab)
        (d / "experiment.yaml").write_text(dump_experiment(experiment, "model.tensors", "vocab.tsv"), encoding="utf-8")
        written.append(d)
    return written


# ---------------------------------------------------------------------------
# Brute-force oracle

MAX_ORACLE_EDGES = 5000


@dataclass
class EdgeEffectReport:
    """Single-edge effects ``d(e) = cos(nothing patched) - cos(only e patched)``."""

    effects: dict
    base_cosine: float
    layer: int

    def max_abs(self) -> float:
        return max((abs(d) for d in self.effects.values()), default=0.0)

    def min_positive_abs(self, floor: float = 0.0) -> float:
        vals = [abs(d) for d in self.effects.values() if abs(d) > floor]
        return min(vals) if vals else math.inf

    def significant(self, tau: float) -> set:
        return {e for e, d in self.effects.items() if abs(d) > tau}


def _o_norm(x, w, kind):
    x = np.asarray(x, dtype=np.float64)
    if kind == "rms":
        return x / math.sqrt(float(np.dot(x, x)) / len(x) + 1e-6) * w
    mu = sum(x) / len(x)
    xc = x - mu
    return xc / math.sqrt(float(np.dot(xc, xc)) / len(x) + 1e-5) * w


def _o_rotate(vec, pos):
    d = len(vec)
    half = d // 2
    out = np.empty(d)
    for i in range(half):
        theta = pos * 10000.0 ** (-2.0 * i / d)
        c, s = math.cos(theta), math.sin(theta)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i + half] * c + vec[i] * s
    return out


def _o_gelu(x):
    return np.array([0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3))) for v in x])


class _OracleModel:
    """float64, loop-based re-implementation of the forward pass."""

    def __init__(self, weights: Weights):
        self.c = weights.config
        self.w = {k: (None if v is None else np.asarray(v, dtype=np.float64))
                  for k, v in weights.__dict__.items() if k != "config"}

    def forward(self, ids, last_layer, corrupt=None, patched=frozenset()):
        """Return (residuals per layer, head outputs per layer).

        ``patched`` holds tuples (etype, layer, head, src_token, dst_token).
        """
        c, w = self.c, self.w
        T = len(ids)
        rotary = c.positional_kind == "rotary"
        x = [w["W_E"][i] + (w["W_pos"][t] if w["W_pos"] is not None else 0.0) for t, i in enumerate(ids)]
        resids, outs = [list(x)], []
        for l in range(last_layer + 1):
            normed = [_o_norm(x[t], w["ln1_w"][l], c.norm_kind) for t in range(T)]
            cnormed = None
            if corrupt is not None:
                cnormed = [_o_norm(corrupt[0][l][t], w["ln1_w"][l], c.norm_kind) for t in range(T)]
            z = [[np.zeros(c.d_model) for _ in range(T)] for _ in range(c.n_heads)]
            for h in range(c.n_heads):
                WQ, WK, WV, WO = w["W_Q"][l][h], w["W_K"][l][h], w["W_V"][l][h], w["W_O"][l][h]
                for t in range(T):
                    if ("HeadOut", l, h, t, t) in patched:
                        z[h][t] = np.array(corrupt[1][l][h][t], dtype=np.float64)
                        continue
                    q_own = normed[t] @ WQ
                    q_other = (cnormed[t] if ("Q", l, h, t, t) in patched else normed[t]) @ WQ
                    if rotary:
                        q_own, q_other = _o_rotate(q_own, t), _o_rotate(q_other, t)
                    scores, values = [], []
                    for s in range(t + 1):
                        k_src = cnormed[s] if ("K", l, h, s, t) in patched else normed[s]
                        v_src = cnormed[s] if ("V", l, h, s, t) in patched else normed[s]
                        k = k_src @ WK
                        if rotary:
                            k = _o_rotate(k, s)
                        q = q_own if s == t else q_other
                        scores.append(float(np.dot(q, k)) / math.sqrt(c.d_head))
                        values.append(v_src @ WV)
                    top = max(scores)
                    e = [math.exp(sc - top) for sc in scores]
                    tot = sum(e)
                    mixed = sum((ei / tot) * vi for ei, vi in zip(e, values))
                    z[h][t] = mixed @ WO
            new_x = []
            for t in range(T):
                mid = x[t] + sum(z[h][t] for h in range(c.n_heads))
                hidden = _o_gelu(_o_norm(mid, w["ln2_w"][l], c.norm_kind) @ w["W_in"][l] + w["b_in"][l])
                new_x.append(mid + hidden @ w["W_out"][l] + w["b_out"][l])
            x = new_x
            resids.append(list(x))
            outs.append(z)
        return resids, outs


def _o_cos(a, b):
    return float(np.dot(a, b) / (math.sqrt(float(np.dot(a, a))) * math.sqrt(float(np.dot(b, b)))))


def _oracle_edges(n_heads, T, layer):
    """Independent enumeration of the edge universe as oracle tuples."""
    out = []
    for l in range(layer + 1):
        for h in range(n_heads):
            for t in range(T):
                out.append(("Q", l, h, t, t))
                out.append(("HeadOut", l, h, t, t))
                for s in range(t):
                    out.append(("K", l, h, s, t))
                    out.append(("V", l, h, s, t))
    return out


def _to_edge(tup) -> EdgeId:
    etype, l, h, s, t = tup
    return {"Q": lambda: q_edge(l, h, t), "K": lambda: k_edge(l, h, s, t),
            "V": lambda: v_edge(l, h, s, t), "HeadOut": lambda: out_edge(l, h, t)}[etype]()


def brute_force_edge_effects(weights: Weights, vocab: Vocab, spec: ExperimentSpec, index: int,
                             layer: Optional[int] = None, max_edges: int = MAX_ORACLE_EDGES) -> EdgeEffectReport:
    """Exhaustive single-edge effects with nothing else patched."""
    layer = spec.layer if layer is None else layer
    clean = tokenize(spec.idiom, vocab).ids
    corrupt = tokenize(spec.corruptions[index].string, vocab).ids
    meaning = tokenize(spec.meaning, vocab).ids
    if len(clean) != len(corrupt):
        raise OracleError("clean and corrupted strings differ in length")
    universe = _oracle_edges(weights.config.n_heads, len(clean), layer)
    if len(universe) > max_edges:
        raise OracleError(f"edge universe has {len(universe)} edges, oracle limit is {max_edges}")
    model = _OracleModel(weights)
    target = model.forward(meaning, layer)[0][layer + 1][-1]
    corrupt_run = model.forward(corrupt, layer)
    base = _o_cos(model.forward(clean, layer)[0][layer + 1][-1], target)
    effects = {}
    for tup in universe:
        resids, _ = model.forward(clean, layer, corrupt=corrupt_run, patched=frozenset([tup]))
        effects[_to_edge(tup)] = base - _o_cos(resids[layer + 1][-1], target)
    return EdgeEffectReport(effects, base, layer)


def oracle_patched_resid(weights: Weights, clean_ids, corrupt_ids, edges, layer: int) -> np.ndarray:
    """Oracle residual stack (layers 0..layer+1) with ``edges`` patched."""
    model = _OracleModel(weights)
    corrupt_run = model.forward(tuple(corrupt_ids), layer)
    tups = set()
    for e in edges:
        hn = e.head_node
        if e.etype in ("Q", "HeadOut"):
            tups.add((e.etype, hn.layer, hn.head, hn.token, hn.token))
        else:
            tups.add((e.etype, hn.layer, hn.head, e.src.token, hn.token))
    resids, _ = model.forward(tuple(clean_ids), layer, corrupt=corrupt_run, patched=frozenset(tups))
    return np.array(resids)
