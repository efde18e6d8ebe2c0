"""Sweep the threshold and let the heuristic suggest one.

The planted fixtures have one clean plateau, so the heuristic flags its
answer there; it is built for the long exponential tail of real models.

Writes sweep.svg next to this script. The second half applies the same
heuristic to a reconstructed large-model sweep shipped with the tests.
"""

from pathlib import Path

import numpy as np

from idiomcircuits import export_sweep_chart, load_planted, suggest_threshold, threshold_sweep
from idiomcircuits.export import sweep_from_csv

here = Path(__file__).parent
_, weights, vocab, spec = load_planted("chain")
grid = np.round(np.geomspace(0.001, 0.8, 15), 6)
sweep = threshold_sweep(weights, vocab, spec, 0, grid)
print("tau     edges  cosine")
for t, n, c in zip(sweep.taus, sweep.edge_counts, sweep.cosines):
    print(f"{t:6.3f}  {n:5d}  {c:.4f}")
(here / "sweep.svg").write_text(export_sweep_chart(sweep, title="chain fixture"), encoding="utf-8")

suggestion = suggest_threshold(sweep)
print(f"\nfixture: suggested tau {suggestion.tau:.4f}; flags {suggestion.flags}")

table = (here.parent / "tests" / "data" / "sweep_reconstruction.csv").read_text(encoding="utf-8")
big = suggest_threshold(sweep_from_csv(table))
print(f"reconstructed sweep: suggested tau {big.tau:.4f}, tail ends at {big.tail_end}, jumps {big.jumps}")
