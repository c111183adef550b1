"""Hardware-driven MCTS over per-layer multiplier assignments.

Profiles how sensitive each transformer block is to each approximate
multiplier, then searches the assignment space with UCB selection and a
sensitivity-minus-power softmax rollout. Running at two values of the power
weight lambda shows the Pareto front sliding toward cheaper configurations.
"""

from axvit import (
    ModelConfig,
    SearchParams,
    TrainHyperparams,
    builtin_catalog,
    calibrate,
    init_model,
    profile_sensitivity,
    search_model,
)
from axvit.data import images_to_patches, synthetic_dataset
from axvit.training import train_float

catalog = builtin_catalog()
images, labels = synthetic_dataset(1600, seed=7)
patches = images_to_patches(images)

model = init_model(ModelConfig(num_layers=3, embed_dim=16, num_heads=2,
                               ffn_dim=32), seed=0)
train_float(model, patches, labels,
            TrainHyperparams(learning_rate=3e-3, iterations=400,
                             batch_size=64, data_fraction=1.0, seed=0))
calibrate(model, patches[:256])

table = profile_sensitivity(model, catalog, patches[:128], labels[:128])
print("per-layer sensitivity (rows: multiplier, cols: block):")
for name, row in zip(table.acu_names, table.s):
    print(f"  {name:<12}", " ".join(f"{v:.3f}" for v in row))

for lam in (0.5, 1.5):
    result = search_model(model, catalog, patches, labels,
                          SearchParams(lam=lam, num_simulations=500,
                                       policy="hw", seed=0))
    print(f"\nlambda={lam}: {len(result.pareto)} Pareto points, "
          f"most visited root action {result.best_root_action()}")
    for pt in result.pareto:
        print(f"  acc {pt.predicted_accuracy:.3f}  "
              f"power {pt.normalized_power:.3f}  "
              f"config {'|'.join(n.split('_')[-1] for n in pt.config)}")
