"""Walk the classifier from stem to softmax: spatial trace, per-stage
parameter budget, recurrent refinement, and the residual inception unit.

Run from the repository root:  python3 demos/02_architecture_walkthrough.py
"""

from collections import OrderedDict

import numpy as np

from irrcnn.model import IRRU, IRRUSpec, ModelConfig, build_model, model_forward
from irrcnn.rng import fork_rng
from irrcnn.tensor import Tensor


def group_counts(model):
    """Parameter totals keyed by the first path component of each name."""
    groups = OrderedDict()
    for name, tensor in model.parameters().items():
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + tensor.data.size
    return groups


def main():
    cfg = ModelConfig(num_classes=8)   # the full-size configuration
    model = build_model(cfg, seed=0)

    print("spatial trace (input side per stage):")
    print("  " + " -> ".join(str(s) for s in model.spatial_trace))
    print(f"trainable parameters: {model.trainable_count:,}")
    print()
    print("budget by stage:")
    for key, count in group_counts(model).items():
        print(f"  {key:10s} {count:>12,}")
    print()

    # ------------------------------------------------------------------
    # one unit under a microscope: the residual path is a true skip
    # ------------------------------------------------------------------
    rng = np.random.default_rng(1)
    unit = IRRU(IRRUSpec(width=16, time_steps=2), seed=5)
    x = Tensor(rng.normal(size=(2, 16, 9, 9)).astype(np.float32))
    full = unit.forward(x, mode="train")
    delta = np.abs(full.data - x.data).mean()
    print("inception-recurrent-residual unit on a 2x16x9x9 batch:")
    print(f"  output shape preserved -> {full.data.shape == x.data.shape}")
    print(f"  mean |output - input| on the full path: {delta:.4f}")

    # zero every branch weight and the unit degenerates to its skip
    # connection (normalization in pass-through mode, affine at identity)
    for p in unit.parameters().values():
        p.data[...] = 0.0
    unit.bn.gamma.data[...] = 1.0
    skipped = unit.forward(x, mode="identity")
    print(f"  zeroed branches reduce it to the skip connection exactly -> "
          f"{np.array_equal(skipped.data, x.data)}")
    print()

    # ------------------------------------------------------------------
    # a forward pass in train mode; rows are probabilities
    # ------------------------------------------------------------------
    batch = fork_rng(0, "demo/forward").normal(size=(2, 3, 128, 128)).astype(np.float32)
    probs = model_forward(model, Tensor(batch), mode="train",
                          rng=fork_rng(0, "demo/dropout")).data
    print("full model forward (train mode, batch of 2):")
    for row in probs:
        print("  [" + " ".join(f"{p:.4f}" for p in row) + f"]  sum={row.sum():.6f}")

    # a pocket-sized variant used throughout the test suite
    toy = build_model(ModelConfig(num_classes=2, input_shape=(3, 32, 32),
                                  stem_widths=(4, 8), block_widths=(16, 32),
                                  time_steps=1, dropout_p=0.0), seed=0)
    print()
    print(f"toy variant: trace {toy.spatial_trace}, "
          f"{toy.trainable_count:,} parameters")


if __name__ == "__main__":
    main()
