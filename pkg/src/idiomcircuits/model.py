"""Minimal pre-norm decoder-only transformer with full activation capture.

Every block computes ``resid -> norm -> attention -> add -> norm -> MLP -> add``.
All tensors are float32. The same routine serves plain and patched forward
passes, so a run with no patches is bit-identical to a plain run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SequenceTooLongError, ShapeError, NonFiniteError, TokenizationError, ZeroNormError

F32 = np.float32
NORM_KINDS = ("rms", "layer")
POSITIONAL_KINDS = ("learned", "rotary", "none")
RMS_EPS = F32(1e-6)
LN_EPS = F32(1e-5)
ROTARY_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_seq: int
    norm_kind: str = "rms"
    positional_kind: str = "none"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.positional_kind not in POSITIONAL_KINDS:
            raise ConfigError(f"positional_kind must be one of {POSITIONAL_KINDS}, got {self.positional_kind!r}")
        if self.positional_kind == "rotary" and self.d_head % 2:
            raise ConfigError("rotary positional encoding needs an even d_head")

    def to_dict(self):
        return {
            "n_layers": int(self.n_layers),
            "n_heads": int(self.n_heads),
            "d_model": int(self.d_model),
            "d_head": int(self.d_head),
            "d_mlp": int(self.d_mlp),
            "vocab_size": int(self.vocab_size),
            "max_seq": int(self.max_seq),
            "norm_kind": self.norm_kind,
            "positional_kind": self.positional_kind,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=F32)
    a.setflags(write=False)
    return a


# (name template, shape builder); ``{l}`` is replaced by the layer index.
_GLOBAL_TENSORS = {
    "embed.W_E": lambda c: (c.vocab_size, c.d_model),
    "ln_final.w": lambda c: (c.d_model,),
    "unembed.W_U": lambda c: (c.d_model, c.vocab_size),
}
_LAYER_TENSORS = {
    "ln1.w": lambda c: (c.d_model,),
    "attn.W_Q": lambda c: (c.n_heads, c.d_model, c.d_head),
    "attn.W_K": lambda c: (c.n_heads, c.d_model, c.d_head),
    "attn.W_V": lambda c: (c.n_heads, c.d_model, c.d_head),
    "attn.W_O": lambda c: (c.n_heads, c.d_head, c.d_model),
    "ln2.w": lambda c: (c.d_model,),
    "mlp.W_in": lambda c: (c.d_model, c.d_mlp),
    "mlp.b_in": lambda c: (c.d_mlp,),
    "mlp.W_out": lambda c: (c.d_mlp, c.d_model),
    "mlp.b_out": lambda c: (c.d_model,),
}
_LAYER_ATTRS = {
    "ln1.w": "ln1_w", "attn.W_Q": "W_Q", "attn.W_K": "W_K", "attn.W_V": "W_V", "attn.W_O": "W_O",
    "ln2.w": "ln2_w", "mlp.W_in": "W_in", "mlp.b_in": "b_in", "mlp.W_out": "W_out", "mlp.b_out": "b_out",
}


def expected_tensor_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Tensor inventory of a container for ``config``, keyed by tensor name."""
    shapes = {name: fn(config) for name, fn in _GLOBAL_TENSORS.items()}
    if config.positional_kind == "learned":
        shapes["pos.W_pos"] = (config.max_seq, config.d_model)
    for layer in range(config.n_layers):
        for suffix, fn in _LAYER_TENSORS.items():
            shapes[f"blocks.{layer}.{suffix}"] = fn(config)
    return shapes


@dataclass(frozen=True, eq=False)
class Weights:
    """Dense parameters. Per-layer tensors are stacked along a leading layer axis."""

    config: ModelConfig
    W_E: np.ndarray
    W_Q: np.ndarray  # n_layers x n_heads x d_model x d_head
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray  # n_layers x n_heads x d_head x d_model
    ln1_w: np.ndarray
    ln2_w: np.ndarray
    W_in: np.ndarray
    b_in: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    ln_final_w: np.ndarray
    W_U: np.ndarray
    W_pos: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if name == "config":
                continue
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value))
        tensors = self.to_tensors()
        expected = expected_tensor_shapes(self.config)
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise ShapeError(f"missing tensors: {', '.join(missing)}")
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise ShapeError(f"unexpected tensors: {', '.join(extra)}")
        for name, shape in expected.items():
            if tensors[name].shape != tuple(shape):
                raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {tensors[name].shape}")
            if not np.all(np.isfinite(tensors[name])):
                raise NonFiniteError(f"{name} contains non-finite values")

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"embed.W_E": self.W_E, "ln_final.w": self.ln_final_w, "unembed.W_U": self.W_U}
        if self.W_pos is not None:
            out["pos.W_pos"] = self.W_pos
        for layer in range(self.W_Q.shape[0]):
            for suffix, attr in _LAYER_ATTRS.items():
                out[f"blocks.{layer}.{suffix}"] = getattr(self, attr)[layer]
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "Weights":
        expected = expected_tensor_shapes(config)
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise ShapeError(f"missing tensors: {', '.join(missing)}")
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise ShapeError(f"unexpected tensors: {', '.join(extra)}")
        for name, shape in expected.items():
            if tuple(np.shape(tensors[name])) != tuple(shape):
                raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {np.shape(tensors[name])}")
        stacked = {
            attr: np.stack([tensors[f"blocks.{l}.{suffix}"] for l in range(config.n_layers)])
            for suffix, attr in _LAYER_ATTRS.items()
        }
        return cls(
            config=config,
            W_E=tensors["embed.W_E"],
            ln_final_w=tensors["ln_final.w"],
            W_U=tensors["unembed.W_U"],
            W_pos=tensors.get("pos.W_pos"),
            **stacked,
        )


def random_weights(config: ModelConfig, seed=0, scale=0.5) -> Weights:
    """Gaussian weights for property tests; norm scales are ones."""
    rng = np.random.default_rng(seed)
    c = config

    def g(*shape, fan_in):
        return rng.standard_normal(shape) * (scale / math.sqrt(fan_in))

    n = c.n_layers
    return Weights(
        config=c,
        W_E=rng.standard_normal((c.vocab_size, c.d_model)),
        W_pos=rng.standard_normal((c.max_seq, c.d_model)) * 0.5 if c.positional_kind == "learned" else None,
        W_Q=g(n, c.n_heads, c.d_model, c.d_head, fan_in=c.d_model) * 2.0,
        W_K=g(n, c.n_heads, c.d_model, c.d_head, fan_in=c.d_model) * 2.0,
        W_V=g(n, c.n_heads, c.d_model, c.d_head, fan_in=c.d_model),
        W_O=g(n, c.n_heads, c.d_head, c.d_model, fan_in=c.d_head),
        ln1_w=1.0 + 0.1 * rng.standard_normal((n, c.d_model)),
        ln2_w=1.0 + 0.1 * rng.standard_normal((n, c.d_model)),
        W_in=g(n, c.d_model, c.d_mlp, fan_in=c.d_model),
        b_in=0.1 * rng.standard_normal((n, c.d_mlp)),
        W_out=g(n, c.d_mlp, c.d_model, fan_in=c.d_mlp),
        b_out=0.1 * rng.standard_normal((n, c.d_model)),
        ln_final_w=np.ones(c.d_model),
        W_U=g(c.d_model, c.vocab_size, fan_in=c.d_model),
    )


# ---------------------------------------------------------------------------
# Vocabulary and tokenizer


class Vocab:
    """Token strings indexed by id. Ids are the contiguous range 0..len-1."""

    def __init__(self, tokens):
        self.tokens = tuple(tokens)
        if not self.tokens:
            raise ConfigError("vocabulary is empty")
        self._ids = {}
        for i, tok in enumerate(self.tokens):
            if not tok:
                raise ConfigError(f"vocabulary entry {i} is empty")
            if tok in self._ids:
                raise ConfigError(f"duplicate vocabulary entry {tok!r}")
            self._ids[tok] = i
        self._max_len = max(len(t) for t in self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token_id):
        return self.tokens[token_id]

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def longest_match(self, text, start):
        for n in range(min(self._max_len, len(text) - start), 0, -1):
            tid = self._ids.get(text[start:start + n])
            if tid is not None:
                return tid, n
        return None, 0


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    text_spans: tuple

    def __len__(self):
        return len(self.ids)

    @property
    def text(self):
        return "".join(self.text_spans)


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    """Greedy longest-match segmentation of ``text`` over ``vocab``."""
    if not text:
        raise ValueError("cannot tokenize empty text")
    ids, spans, pos = [], [], 0
    while pos < len(text):
        tid, n = vocab.longest_match(text, pos)
        if tid is None:
            raise TokenizationError(text, pos)
        ids.append(tid)
        spans.append(text[pos:pos + n])
        pos += n
    return TokenSequence(tuple(ids), tuple(spans))


# ---------------------------------------------------------------------------
# Forward pass


@dataclass(frozen=True, eq=False)
class ActivationCache:
    """Activations of one (possibly truncated) forward pass.

    ``resid[l]`` is the residual stream after block ``l-1`` (``resid[0]`` is the
    embedding). Per-layer arrays cover the computed layers only; ``logits`` is
    None when the run stopped before the last layer.
    """

    resid: np.ndarray  # (n_computed + 1) x T x d_model
    resid_mid: np.ndarray  # n_computed x T x d_model (after attention, before MLP)
    q: np.ndarray  # n_computed x H x T x d_head (post positional encoding)
    k: np.ndarray
    v: np.ndarray
    pattern: np.ndarray  # n_computed x H x T x T
    z: np.ndarray  # n_computed x H x T x d_model (per-head output after W_O)
    mlp_out: np.ndarray  # n_computed x T x d_model
    logits: Optional[np.ndarray]

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            a = getattr(self, name)
            if a is not None:
                a.setflags(write=False)

    @property
    def n_layers_computed(self):
        return self.z.shape[0]

    @property
    def seq_len(self):
        return self.resid.shape[1]

    def final_resid(self, layer: int) -> np.ndarray:
        return self.resid[layer][-1]


@dataclass
class LayerPatch:
    """Boolean patch masks for one layer. ``k[h, dst, src]`` etc."""

    q: np.ndarray  # H x T
    k: np.ndarray  # H x T x T
    v: np.ndarray  # H x T x T
    out: np.ndarray  # H x T

    @classmethod
    def empty(cls, n_heads, T):
        return cls(
            q=np.zeros((n_heads, T), bool),
            k=np.zeros((n_heads, T, T), bool),
            v=np.zeros((n_heads, T, T), bool),
            out=np.zeros((n_heads, T), bool),
        )


def _norm(x, w, kind):
    if kind == "rms":
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return (x / np.sqrt(ms + RMS_EPS)) * w
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return (xc / np.sqrt(var + LN_EPS)) * w


def _gelu(x):
    c = F32(math.sqrt(2.0 / math.pi))
    return F32(0.5) * x * (F32(1.0) + np.tanh(c * (x + F32(0.044715) * x * x * x)))


def _rotary(x, positions):
    """Rotate half-split pairs of the last axis by position-dependent angles."""
    d = x.shape[-1]
    half = d // 2
    inv_freq = ROTARY_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    angles = np.outer(positions, inv_freq)
    cos = np.cos(angles).astype(F32)
    sin = np.sin(angles).astype(F32)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _qkv(weights, layer, xn):
    c = weights.config
    q = np.matmul(xn[None], weights.W_Q[layer])
    k = np.matmul(xn[None], weights.W_K[layer])
    v = np.matmul(xn[None], weights.W_V[layer])
    if c.positional_kind == "rotary":
        pos = np.arange(xn.shape[0])
        q = _rotary(q, pos)
        k = _rotary(k, pos)
    return q, k, v


def embed(weights: Weights, ids) -> np.ndarray:
    x = weights.W_E[np.asarray(ids, dtype=np.int64)]
    if weights.W_pos is not None:
        x = x + weights.W_pos[: len(ids)]
    return np.ascontiguousarray(x, dtype=F32)


def run(weights: Weights, ids, corrupt: Optional[ActivationCache] = None,
        patches: Optional[dict] = None, max_layer: Optional[int] = None) -> ActivationCache:
    """Forward pass with optional per-edge substitution from ``corrupt``.

    ``patches`` maps layer index to a LayerPatch. A patched Q mask replaces the
    query only in scores against strictly earlier tokens; K/V masks replace the
    key/value of one source token for one destination; an out mask replaces the
    head's output with the corrupted run's. Corrupted Q/K/V are recomputed from
    the corrupted run's residual with this run's norm.
    """
    c = weights.config
    ids = tuple(int(i) for i in ids)
    T = len(ids)
    if T < 1:
        raise ValueError("empty token sequence")
    if T > c.max_seq:
        raise SequenceTooLongError(f"sequence length {T} exceeds max_seq {c.max_seq}")
    if any(i < 0 or i >= c.vocab_size for i in ids):
        raise ValueError("token id out of range for vocabulary")
    last = c.n_layers - 1 if max_layer is None else int(max_layer)
    if not 0 <= last < c.n_layers:
        raise ValueError(f"max_layer {max_layer} outside [0, {c.n_layers - 1}]")
    patches = patches or {}
    if patches and corrupt is None:
        raise ValueError("patches given without a corrupted cache")

    H = c.n_heads
    scale = F32(1.0 / math.sqrt(c.d_head))
    causal = np.tril(np.ones((T, T), bool))
    strictly_lower = np.tril(np.ones((T, T), bool), -1)

    x = embed(weights, ids)
    resid = [x]
    resid_mid, qs, ks, vs, patterns, zs, mlps = [], [], [], [], [], [], []
    for layer in range(last + 1):
        xn = _norm(x, weights.ln1_w[layer], c.norm_kind)
        q, k, v = _qkv(weights, layer, xn)
        lp = patches.get(layer)
        if lp is not None:
            cn = _norm(corrupt.resid[layer], weights.ln1_w[layer], c.norm_kind)
            qc, kc, vc = _qkv(weights, layer, cn)
            qsel = lp.q[:, :, None] & strictly_lower[None]
            q_mix = np.where(qsel[..., None], qc[:, :, None, :], q[:, :, None, :])
            k_mix = np.where(lp.k[..., None], kc[:, None, :, :], k[:, None, :, :])
            v_mix = np.where(lp.v[..., None], vc[:, None, :, :], v[:, None, :, :])
        else:
            q_mix = q[:, :, None, :]
            k_mix = k[:, None, :, :]
            v_mix = v[:, None, :, :]
        scores = (q_mix * k_mix).sum(-1) * scale  # H x T(dst) x T(src)
        scores = np.where(causal[None], scores, F32(-np.inf))
        scores = scores - scores.max(-1, keepdims=True)
        e = np.exp(scores)
        pattern = e / e.sum(-1, keepdims=True)
        zhead = (pattern[..., None] * v_mix).sum(axis=2)
        z = np.matmul(zhead, weights.W_O[layer])
        if lp is not None and lp.out.any():
            z = np.where(lp.out[..., None], corrupt.z[layer], z)
        mid = x + z.sum(0)
        hidden = _gelu(np.matmul(_norm(mid, weights.ln2_w[layer], c.norm_kind), weights.W_in[layer]) + weights.b_in[layer])
        mlp = np.matmul(hidden, weights.W_out[layer]) + weights.b_out[layer]
        x = mid + mlp
        resid.append(x)
        resid_mid.append(mid)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        patterns.append(pattern)
        zs.append(z)
        mlps.append(mlp)

    logits = None
    if last == c.n_layers - 1:
        logits = np.matmul(_norm(x, weights.ln_final_w, c.norm_kind), weights.W_U)
    return ActivationCache(
        resid=np.stack(resid).astype(F32, copy=False),
        resid_mid=np.stack(resid_mid),
        q=np.stack(qs),
        k=np.stack(ks),
        v=np.stack(vs),
        pattern=np.stack(patterns),
        z=np.stack(zs),
        mlp_out=np.stack(mlps),
        logits=logits,
    )


def forward(weights: Weights, tokens) -> ActivationCache:
    """Plain forward pass over a TokenSequence (or a list of ids)."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    return run(weights, ids)


# ---------------------------------------------------------------------------
# Cosines


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def embedding_cosine(token_a: int, token_b: int, weights: Weights) -> float:
    V = weights.config.vocab_size
    for t in (token_a, token_b):
        if not 0 <= t < V:
            raise ValueError(f"token id {t} out of range")
    try:
        return cosine(weights.W_E[token_a], weights.W_E[token_b])
    except ZeroNormError:
        raise ZeroNormError(f"zero-norm embedding row among tokens {token_a}, {token_b}") from None


def layer_cosine(cache_a: ActivationCache, cache_b: ActivationCache, layer: int) -> float:
    """Cosine between final-token residuals ``resid[layer]`` of two runs."""
    n = min(cache_a.resid.shape[0], cache_b.resid.shape[0])
    if not 0 <= layer < n:
        raise ValueError(f"layer {layer} outside [0, {n - 1}]")
    if cache_a.resid.shape[2] != cache_b.resid.shape[2]:
        raise ValueError("caches come from models with different d_model")
    try:
        return cosine(cache_a.final_resid(layer), cache_b.final_resid(layer))
    except ZeroNormError:
        raise ZeroNormError(f"zero-norm final-token residual at layer {layer}") from None
