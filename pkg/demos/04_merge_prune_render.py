"""Merge per-corruption circuits, prune dangling heads and draw the result.

Writes circuit.dot next to this script; render it with
``dot -Tsvg circuit.dot -o circuit.svg``.
"""

from pathlib import Path

from idiomcircuits import discover_circuit, load_planted, merge_circuits, prune_circuit, render_graph

_, weights, vocab, spec = load_planted("single")
circuits = [discover_circuit(weights, vocab, spec, i) for i in range(len(spec.corruptions))]
for c in circuits:
    print(f"{c.corruptions[0]['string']!r}: {len(c)} edges")

merged = merge_circuits(circuits)
pruned = prune_circuit(merged)
print(f"merged: {len(merged)} edges over {len(merged.head_nodes)} heads")
print(f"pruned: {len(pruned)} edges over {len(pruned.head_nodes)} heads")

out = Path(__file__).parent / "circuit.dot"
out.write_text(render_graph(pruned), encoding="utf-8")
print(f"wrote {out}")
