"""Training a single approximate attention layer.

One attention layer runs its matmuls through an approximate-multiplier LUT
while regressing the outputs of a frozen real-arithmetic reference. Gradients
flow through a straight-through estimator. Even aggressive truncation still
lets SGD pull the output distribution onto the target.
"""

from axvit import builtin_catalog
from axvit.training import toy_attention_experiment

catalog = builtin_catalog()

for name in catalog.names():
    res = toy_attention_experiment(catalog.get(name), iterations=500, seed=0)
    first = res.losses[:50].mean()
    last = res.losses[-50:].mean()
    print(f"{name:<12} initial MSE {res.losses[0]:.4f}  "
          f"final rolling MSE {last:.4f}  "
          f"output mean/std ({res.outputs.mean():+.3f}, {res.outputs.std():.3f})  "
          f"target ({res.targets.mean():+.3f}, {res.targets.std():.3f})")
    assert last < first, "loss should decrease for every catalog multiplier"
