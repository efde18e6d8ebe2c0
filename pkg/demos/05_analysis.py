"""Head-effect table, query/key products and augmented reception.

The reference table is rebuilt from shipped cell values; the QK products and
the reception check run on the fixtures.
"""

from idiomcircuits import (
    antagonistic_components,
    detect_augmented_reception,
    discover_circuit,
    head_effect_table,
    load_planted,
    qk_dot_products,
)
from idiomcircuits.analysis import load_reference_cells, reference_circuits

print(head_effect_table(reference_circuits(load_reference_cells())).format())

_, weights, vocab, spec = load_planted("minimal")
qk = qk_dot_products(weights, vocab, [("kicked", "bucket"), ("booted", "pail")], head=(0, 0),
                     corruptions=[(("booted",), ("pail",)), ((), ())])
print("\nquery/key products of head 0.0 (diagonal: clean, then corrupted query and key)")
print(qk.format())

_, weights, vocab, spec = load_planted("chain")
circuit = discover_circuit(weights, vocab, spec, 0)
position = spec.corruptions[0].position
print(f"\nchain: heads receiving extra queries after token {position}:",
      detect_augmented_reception(circuit, position))

_, weights, vocab, spec = load_planted("suppressor")
circuit = discover_circuit(weights, vocab, spec, 0)
print("suppressor: edges working against the meaning")
for edge, d in antagonistic_components(circuit):
    print(f"  {edge}  d={d:+.4f}")
