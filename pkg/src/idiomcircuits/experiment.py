"""Experiment inputs: idiom/corrupted/meaning strings, corruption candidates,
layerwise similarity curves and the choice of the resolution layer L."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import ConfigError, ZeroNormError
from .model import ModelConfig, Vocab, Weights, embedding_cosine, forward, layer_cosine, tokenize

DEFAULT_EPSILON = 0.02
DEFAULT_COSINE_FLOOR = 0.25


@dataclass(frozen=True)
class Corruption:
    string: str
    position: int
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"corruption threshold must be positive, got {self.tau}")


@dataclass(frozen=True)
class ExperimentSpec:
    """One idiom with its meaning string and single-token corruptions.

    ``layer`` is the block whose post-MLP residual is compared to the meaning
    string (None until chosen with :func:`select_L`).
    """

    idiom: str
    meaning: str
    corruptions: tuple = ()
    layer: Optional[int] = None
    epsilon: float = DEFAULT_EPSILON
    name: Optional[str] = None
    model: Optional[str] = None
    vocab: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "corruptions", tuple(self.corruptions))
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    @property
    def label(self):
        return self.name or self.idiom

    def with_layer(self, layer: int) -> "ExperimentSpec":
        return replace(self, layer=int(layer))

    def check(self, vocab: Vocab, config: ModelConfig) -> None:
        """Raise ConfigError unless every corruption is a single-token swap at its declared position."""
        if self.layer is not None and not 0 <= self.layer <= config.n_layers - 1:
            raise ConfigError(f"layer {self.layer} outside [0, {config.n_layers - 1}]")
        clean = tokenize(self.idiom, vocab)
        tokenize(self.meaning, vocab)
        for i, c in enumerate(self.corruptions):
            toks = tokenize(c.string, vocab)
            if len(toks) != len(clean):
                raise ConfigError(f"corruption {i} ({c.string!r}) has {len(toks)} tokens, idiom has {len(clean)}")
            diff = [j for j, (a, b) in enumerate(zip(clean.ids, toks.ids)) if a != b]
            if diff != [c.position]:
                raise ConfigError(f"corruption {i} ({c.string!r}) differs at positions {diff}, declared {c.position}")


def load_experiment(path) -> ExperimentSpec:
    """Read an experiment YAML file. ``model``/``vocab`` paths resolve against its directory."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    try:
        corruptions = [Corruption(str(c["string"]), int(c["position"]), float(c["tau"])) for c in raw.get("corruptions", [])]
        spec = ExperimentSpec(
            idiom=str(raw["idiom"]),
            meaning=str(raw["meaning"]),
            corruptions=corruptions,
            layer=None if raw.get("layer") is None else int(raw["layer"]),
            epsilon=float(raw.get("epsilon", DEFAULT_EPSILON)),
            name=raw.get("name"),
            model=str(path.parent / raw["model"]) if raw.get("model") else None,
            vocab=str(path.parent / raw["vocab"]) if raw.get("vocab") else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed experiment config ({exc!r})") from None
    return spec


def dump_experiment(spec: ExperimentSpec, model: Optional[str] = None, vocab: Optional[str] = None) -> str:
    data = {
        "name": spec.name,
        "model": model if model is not None else spec.model,
        "vocab": vocab if vocab is not None else spec.vocab,
        "idiom": spec.idiom,
        "meaning": spec.meaning,
        "layer": spec.layer,
        "epsilon": spec.epsilon,
        "corruptions": [asdict(c) for c in spec.corruptions],
    }
    data = {k: v for k, v in data.items() if v is not None}
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)


# ---------------------------------------------------------------------------


def candidate_corruptions(token: int, k: int, weights: Weights) -> list:
    """Top-``k`` tokens by embedding cosine to ``token`` (ties: lower id first)."""
    V = weights.config.vocab_size
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > V - 1:
        raise ValueError(f"k={k} exceeds vocab_size - 1 = {V - 1}")
    E = weights.W_E.astype(np.float64)
    norms = np.linalg.norm(E, axis=1)
    if norms[token] == 0:
        raise ZeroNormError(f"token {token} has a zero embedding")
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (E @ E[token]) / (norms * norms[token])
    cos = np.clip(cos, -1.0, 1.0)
    ranked = sorted((i for i in range(V) if i != token and norms[i] > 0), key=lambda i: (-cos[i], i))
    return [(i, float(cos[i])) for i in ranked[:k]]


@dataclass(frozen=True, eq=False)
class SimilarityCurves:
    """Final-token cosine to the meaning string at every residual index 0..n_layers.

    Index 0 is the embedding; index ``l + 1`` is the output of block ``l``.
    """

    idiom: np.ndarray
    corruptions: tuple
    labels: tuple = ()

    @property
    def n_points(self):
        return len(self.idiom)

    @property
    def margin(self) -> np.ndarray:
        """Idiom similarity minus the best corruption similarity."""
        if not self.corruptions:
            return np.asarray(self.idiom, dtype=float)
        return np.asarray(self.idiom) - np.max(np.vstack(self.corruptions), axis=0)

    def at_block(self, layer: int) -> float:
        return float(self.idiom[layer + 1])


def layerwise_similarity(spec: ExperimentSpec, weights: Weights, vocab: Vocab) -> SimilarityCurves:
    n = weights.config.n_layers
    meaning = forward(weights, tokenize(spec.meaning, vocab))

    def curve(text):
        cache = forward(weights, tokenize(text, vocab))
        return np.array([layer_cosine(cache, meaning, l) for l in range(n + 1)])

    return SimilarityCurves(
        idiom=curve(spec.idiom),
        corruptions=tuple(curve(c.string) for c in spec.corruptions),
        labels=tuple(c.string for c in spec.corruptions),
    )


def select_L(curves: SimilarityCurves, epsilon: float = DEFAULT_EPSILON) -> int:
    """First block after which the idiom's margin grows by less than ``epsilon``.

    Works on the block outputs (residual indices 1..n_layers); returns the last
    block when no earlier one qualifies.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m = np.asarray(curves.margin, dtype=float)[1:]
    if m.size == 0:
        raise ValueError("curves must cover at least one block")
    for b in range(len(m) - 1):
        if np.max(m[b + 1:] - m[b]) < epsilon:
            return b
    return len(m) - 1


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)  # (name, passed, detail)
    manual_review: str = (
        "manual review required: confirm the corruption keeps the syntax and literal meaning "
        "but not the figurative meaning"
    )

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.checks)

    def failures(self):
        return [name for name, ok, _ in self.checks if not ok]

    def __str__(self):
        lines = [f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}" for name, ok, detail in self.checks]
        lines.append(self.manual_review)
        return "\n".join(lines)


def validate_corruption(spec: ExperimentSpec, index: int, vocab: Vocab, weights: Optional[Weights] = None,
                        cosine_floor: float = DEFAULT_COSINE_FLOOR) -> ValidationReport:
    """Mechanical checks for one corruption entry; never raises on a bad entry."""
    report = ValidationReport()
    entry = spec.corruptions[index]
    try:
        clean = tokenize(spec.idiom, vocab)
        corr = tokenize(entry.string, vocab)
    except Exception as exc:  # report-based: tokenization problems become failed checks
        report.checks.append(("tokenization", False, str(exc)))
        return report
    same_len = len(clean) == len(corr)
    report.checks.append(("equal token counts", same_len, f"{len(clean)} vs {len(corr)}"))
    if not same_len:
        return report
    diff = [j for j, (a, b) in enumerate(zip(clean.ids, corr.ids)) if a != b]
    if not diff:
        report.checks.append(("corruption identical to original", False, "no token differs"))
        return report
    report.checks.append(("single-token corruption", len(diff) == 1, f"differing positions {diff}"))
    if len(diff) != 1:
        return report
    pos = diff[0]
    report.checks.append(("declared position", pos == entry.position, f"declared {entry.position}, found {pos}"))
    if weights is not None:
        a, b = clean.ids[pos], corr.ids[pos]
        try:
            cos = embedding_cosine(a, b, weights)
            report.checks.append((
                "embedding cosine floor", cos >= cosine_floor,
                f"cos({vocab[a]!r}, {vocab[b]!r}) = {cos:.4f}, floor {cosine_floor}",
            ))
        except ZeroNormError as exc:
            report.checks.append(("embedding cosine floor", False, str(exc)))
    return report
