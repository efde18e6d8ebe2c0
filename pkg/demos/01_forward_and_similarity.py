"""Run the model on an idiom and its corruptions, then pick the analysis layer.

The "step" fixture writes the figurative meaning into the final token at
block 2. Layerwise cosine to the meaning string shows the jump; select_L
finds the block after which the idiom's margin stops growing.
"""

from idiomcircuits import forward, layerwise_similarity, load_planted, select_L, tokenize

config, weights, vocab, spec = load_planted("step")
print(f"model: {config.n_layers} layers x {config.n_heads} heads, d_model={config.d_model}")

tokens = tokenize(spec.idiom, vocab)
cache = forward(weights, tokens)
print(f"{spec.idiom!r} -> ids {list(tokens.ids)}, residual stream {cache.resid.shape}")

curves = layerwise_similarity(spec, weights, vocab)
print("\ncosine to meaning at each residual index (0 = embedding)")
print("  idiom      ", " ".join(f"{c:6.3f}" for c in curves.idiom))
for label, curve in zip(curves.labels, curves.corruptions):
    print(f"  {label[:11]:<11}", " ".join(f"{c:6.3f}" for c in curve))

for eps in (0.2, 0.02, 0.002):
    print(f"select_L(eps={eps}) -> block {select_L(curves, eps)}")
