"""Edge-level circuit discovery for idiom processing in small decoder transformers."""

from .analysis import (
    HeadEffectTable,
    QKMatrix,
    antagonistic_components,
    detect_augmented_reception,
    head_effect_table,
    qk_dot_products,
)
from .container import load_model, read_vocab, save_model, write_vocab
from .discovery import (
    Circuit,
    SweepResult,
    ThresholdSuggestion,
    circuit_cosine,
    discover_circuit,
    merge_circuits,
    prune_circuit,
    suggest_threshold,
    threshold_sweep,
)
from .errors import *  # noqa: F401,F403
from .experiment import (
    Corruption,
    ExperimentSpec,
    SimilarityCurves,
    candidate_corruptions,
    layerwise_similarity,
    load_experiment,
    select_L,
    validate_corruption,
)
from .export import RenderStyle, export_sweep_chart, load_circuit, render_graph, save_circuit
from .fixtures import PlantedSpec, brute_force_edge_effects, build_planted_model, load_planted, planted_specs
from .graph import CircuitGraph, EdgeId, NodeId, build_graph, forward_with_patches
from .model import ActivationCache, ModelConfig, Vocab, Weights, forward, tokenize

__version__ = "0.1.0"
