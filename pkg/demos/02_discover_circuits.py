"""Discover edge-level circuits on fixtures with known ground truth.

Each fixture plants a causal edge set. Discovery walks the graph in reverse
topological order and removes every edge whose patched effect on the metric
is at most the threshold; the survivors should equal the planted set.
"""

from idiomcircuits import discover_circuit, load_planted, planted_specs

for name, truth in planted_specs().items():
    _, weights, vocab, spec = load_planted(name)
    for i, corruption in enumerate(spec.corruptions):
        trace = []
        circuit = discover_circuit(weights, vocab, spec, i, trace=trace)
        record = circuit.corruptions[0]
        found = set(circuit.edges)
        print(f"\n{name}: corrupt {corruption.string!r} at token {corruption.position}, tau={corruption.tau}")
        print(f"  {len(trace)} edges evaluated, {sum(t.skipped for t in trace)} skipped, {len(found)} kept")
        print(f"  planted set recovered: {found == truth.planted[i]}")
        print(f"  cosine clean {record['cos_full']:.4f}  corrupt {record['cos_corrupt']:.4f}"
              f"  circuit {record['cos_circuit']:.4f}")
        for edge in circuit.sorted_edges():
            print(f"    {str(edge):<28} d={circuit.edges[edge]:+.4f}")
