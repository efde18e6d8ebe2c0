"""Command-line front end.

Every subcommand writes its outputs under ``--out`` (default: current
directory) and prints a short JSON summary on stdout. Failures print one JSON
error record on stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, discovery, experiment, export, fixtures
from .container import load_model, read_vocab
from .errors import CircuitError, ConfigError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_tau_grid(text: str) -> list:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step))
            return [round(start + i * step, 12) for i in range(n + 1)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --tau-grid {text!r}; use start:stop:step or a comma list") from None


# ---------------------------------------------------------------------------


def _load_inputs(args):
    if not args.experiment:
        raise ConfigError("--experiment is required")
    spec = experiment.load_experiment(args.experiment)
    model_path = args.model or spec.model
    vocab_path = args.vocab or spec.vocab
    if not model_path or not vocab_path:
        raise ConfigError("model and vocab must be given by flag or in the experiment file")
    config, weights = load_model(model_path)
    vocab = read_vocab(vocab_path)
    if len(vocab) != config.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} entries, model expects {config.vocab_size}")
    if args.epsilon is not None:
        spec = experiment.ExperimentSpec(**{**spec.__dict__, "epsilon": args.epsilon})
    if args.layer is not None:
        spec = spec.with_layer(args.layer)
    spec.check(vocab, config)
    return spec, weights, vocab


def _resolve_layer(spec, weights, vocab):
    if spec.layer is not None:
        return spec
    curves = experiment.layerwise_similarity(spec, weights, vocab)
    return spec.with_layer(experiment.select_L(curves, spec.epsilon))


def _indices(args, spec):
    if args.corruption is None:
        return list(range(len(spec.corruptions)))
    if not 0 <= args.corruption < len(spec.corruptions):
        raise ConfigError(f"corruption index {args.corruption} outside [0, {len(spec.corruptions) - 1}]")
    return [args.corruption]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> str:
    path.write_text(text, encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_similarity(args):
    spec, weights, vocab = _load_inputs(args)
    curves = experiment.layerwise_similarity(spec, weights, vocab)
    layer = experiment.select_L(curves, spec.epsilon)
    out = _out(args)
    header = ["index", "idiom"] + [f"corruption_{i}" for i in range(len(curves.corruptions))] + ["margin"]
    lines = [",".join(header)]
    for i in range(curves.n_points):
        row = [str(i), repr(float(curves.idiom[i]))]
        row += [repr(float(c[i])) for c in curves.corruptions]
        row.append(repr(float(curves.margin[i])))
        lines.append(",".join(row))
    written = [_write(out / "similarity.csv", "\n".join(lines) + "\n")]
    return {"layer": layer, "epsilon": spec.epsilon, "files": written}


def cmd_discover(args):
    spec, weights, vocab = _load_inputs(args)
    spec = _resolve_layer(spec, weights, vocab)
    out = _out(args)
    written, sizes = [], []
    for i in _indices(args, spec):
        c = discovery.discover_circuit(weights, vocab, spec, i, tau=args.tau)
        written.append(_write(out / f"circuit_{i}.json", export.circuit_to_json(c)))
        sizes.append(len(c))
    return {"layer": spec.layer, "edges": sizes, "files": written}


def cmd_sweep(args):
    spec, weights, vocab = _load_inputs(args)
    spec = _resolve_layer(spec, weights, vocab)
    if not args.tau_grid:
        raise ConfigError("--tau-grid is required")
    grid = parse_tau_grid(args.tau_grid)
    out = _out(args)
    written = []
    for i in _indices(args, spec):
        sw = discovery.threshold_sweep(weights, vocab, spec, i, grid, workers=args.workers)
        if args.format == "svg":
            written.append(_write(out / f"sweep_{i}.svg", export.export_sweep_chart(sw)))
        else:
            written.append(_write(out / f"sweep_{i}.csv", export.sweep_to_csv(sw)))
    return {"layer": spec.layer, "points": len(grid), "files": written}


def cmd_suggest_tau(args):
    results = []
    if args.sweep:
        sweeps = [export.sweep_from_csv(Path(p).read_text(encoding="utf-8"), label=p) for p in args.sweep]
    else:
        spec, weights, vocab = _load_inputs(args)
        spec = _resolve_layer(spec, weights, vocab)
        if not args.tau_grid:
            raise ConfigError("--tau-grid or --sweep is required")
        grid = parse_tau_grid(args.tau_grid)
        sweeps = [discovery.threshold_sweep(weights, vocab, spec, i, grid, workers=args.workers)
                  for i in _indices(args, spec)]
    for sw in sweeps:
        s = discovery.suggest_threshold(sw)
        results.append({"label": sw.label, "tau": s.tau, "flags": s.flags})
    return {"suggestions": results}


def cmd_merge(args):
    if not args.circuit:
        raise ConfigError("merge needs at least one --circuit")
    merged = discovery.merge_circuits(export.load_circuit(p) for p in args.circuit)
    path = _write(_out(args) / "merged.json", export.circuit_to_json(merged))
    return {"edges": len(merged), "files": [path]}


def cmd_prune(args):
    if not args.circuit or len(args.circuit) != 1:
        raise ConfigError("prune needs exactly one --circuit")
    pruned = discovery.prune_circuit(export.load_circuit(args.circuit[0]))
    path = _write(_out(args) / "pruned.json", export.circuit_to_json(pruned))
    return {"edges": len(pruned), "files": [path]}


def _circuit_report(c):
    rep = {
        "antagonistic": [{**e.to_dict(), "weight": d} for e, d in analysis.antagonistic_components(c)],
    }
    if not c.is_merged and c.corruptions:
        pos = int(c.corruptions[0]["position"])
        rep["augmented_reception"] = [n.to_dict() for n in analysis.detect_augmented_reception(c, pos)]
    return rep


def cmd_analyze(args):
    out = _out(args)
    written = []
    summary = {}
    if args.reference:
        tables = analysis.reference_circuits(analysis.load_reference_cells(args.reference_file))
    else:
        tables = {}
        for p in args.circuit or []:
            c = export.load_circuit(p)
            name = c.metadata.get("idiom", Path(p).stem)
            tables.setdefault(name, []).append(c)
            summary[p] = _circuit_report(c)
    if tables:
        t = analysis.head_effect_table(tables, display_floor=args.display_floor)
        if args.format == "csv":
            written.append(_write(out / "head_effects.csv", t.to_csv()))
        else:
            written.append(_write(out / "head_effects.txt", t.format()))
    if args.qk_head:
        spec, weights, vocab = _load_inputs(args)
        layer, head = (int(x) for x in args.qk_head.split(","))
        pairs = [tuple(p.split("|")) for p in args.qk_pair]
        m = analysis.qk_dot_products(weights, vocab, pairs, (layer, head), template=args.qk_template)
        written.append(_write(out / ("qk.csv" if args.format == "csv" else "qk.txt"),
                              m.to_csv() if args.format == "csv" else m.format("{:.2f}")))
    if summary:
        written.append(_write(out / "report.json", json.dumps(summary, indent=1, sort_keys=True) + "\n"))
    if not written:
        raise ConfigError("analyze needs --circuit, --reference or --qk-head")
    return {"files": written}


def cmd_render(args):
    out = _out(args)
    written = []
    for p in args.circuit or []:
        c = export.load_circuit(p)
        written.append(_write(out / (Path(p).stem + ".dot"), export.render_graph(c)))
    for p in args.sweep or []:
        sw = export.sweep_from_csv(Path(p).read_text(encoding="utf-8"), label=Path(p).stem)
        written.append(_write(out / (Path(p).stem + ".svg"), export.export_sweep_chart(sw)))
    if not written:
        raise ConfigError("render needs --circuit or --sweep")
    return {"files": written}


def cmd_oracle(args):
    spec, weights, vocab = _load_inputs(args)
    spec = _resolve_layer(spec, weights, vocab)
    out = _out(args)
    written = []
    for i in _indices(args, spec):
        rep = fixtures.brute_force_edge_effects(weights, vocab, spec, i)
        rows = [{**e.to_dict(), "d": d} for e, d in sorted(rep.effects.items(), key=lambda r: str(r[0]))]
        doc = {"layer": rep.layer, "base_cosine": rep.base_cosine, "effects": rows}
        written.append(_write(out / f"oracle_{i}.json", json.dumps(doc, indent=1, sort_keys=True) + "\n"))
    return {"files": written}


COMMANDS = {
    "similarity": cmd_similarity,
    "discover": cmd_discover,
    "sweep": cmd_sweep,
    "suggest-tau": cmd_suggest_tau,
    "merge": cmd_merge,
    "prune": cmd_prune,
    "analyze": cmd_analyze,
    "render": cmd_render,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="tensor container (default: from the experiment file)")
    common.add_argument("--vocab", help="vocabulary file (default: from the experiment file)")
    common.add_argument("--experiment", help="experiment YAML file")
    common.add_argument("--tau", type=float, default=None, help="threshold override (default: per corruption)")
    common.add_argument("--tau-grid", help="sweep grid, start:stop:step or comma list")
    common.add_argument("--layer", type=int, default=None, help="metric layer L (default: from file, else selected)")
    common.add_argument("--epsilon", type=float, default=None, help="layer-selection tolerance (default: 0.02)")
    common.add_argument("--corruption", type=int, default=None, help="corruption index (default: all)")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--format", choices=["dot", "svg", "csv", "json"], default=None,
                        help="output format where a command supports several")
    common.add_argument("--circuit", action="append", help="circuit JSON file (repeatable)")
    common.add_argument("--sweep", action="append", help="sweep CSV file (repeatable)")
    common.add_argument("--workers", type=int, default=1, help="processes for sweeps (default: 1)")
    parser = _Parser(prog="idiomcircuits", description="Idiom circuit discovery on small decoder models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "analyze":
            p.add_argument("--reference", action="store_true", help="tabulate the shipped reference head effects")
            p.add_argument("--reference-file", default=None, help="alternative reference transcription")
            p.add_argument("--display-floor", type=float, default=analysis.DISPLAY_FLOOR)
            p.add_argument("--qk-head", help="layer,head for QK dot products")
            p.add_argument("--qk-pair", action="append", default=[], help="first|second slot fillers")
            p.add_argument("--qk-template", default="He {} the {}")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        _error("UsageError", str(exc))
        return 2
    except (CircuitError, OSError, ValueError, KeyError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1
    print(json.dumps({"command": args.command, "ok": True, **result}, sort_keys=True, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _error(kind: str, message: str) -> None:
    print(json.dumps({"ok": False, "error": kind, "message": message}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
