"""Check the patching engine against an independent loop-based model.

The oracle recomputes every single-edge effect from scratch; discovery with a
negative threshold never removes anything, so its evaluations are the same
single-edge effects computed by the vectorized engine.
"""

from idiomcircuits import brute_force_edge_effects, discover_circuit, load_planted

for name in ("minimal", "single", "chain", "suppressor"):
    _, weights, vocab, spec = load_planted(name)
    report = brute_force_edge_effects(weights, vocab, spec, 0)
    trace = []
    discover_circuit(weights, vocab, spec, 0, tau=-1.0, trace=trace)
    worst = max(abs(t.d - report.effects[t.edge]) for t in trace)
    top = max(report.effects, key=lambda e: abs(report.effects[e]))
    print(f"{name:<10} {len(report.effects):3d} edges, largest effect {top} "
          f"({report.effects[top]:+.4f}), max engine/oracle gap {worst:.1e}")
