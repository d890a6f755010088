"""A tour of the tensor engine: record a computation, pull gradients back
through it, and cross-check them against finite differences.

Run from the repository root:  python3 demos/01_tensors_and_gradients.py
"""

import numpy as np

from irrcnn import ops
from irrcnn.gradcheck import numerical_gradient
from irrcnn.tensor import Tensor, no_grad


def main():
    # ------------------------------------------------------------------
    # scalars first: y = (3x + 2)^2 has dy/dx = 6(3x + 2)
    # ------------------------------------------------------------------
    x = Tensor(np.array(1.0), requires_grad=True)
    y = (x * 3.0 + 2.0) ** 2
    y.backward()
    print(f"d/dx (3x+2)^2 at x=1      -> {x.grad.item():g}   (expected 30)")

    # ------------------------------------------------------------------
    # the same machinery drives real layers; conv weights included
    # ------------------------------------------------------------------
    rng = np.random.default_rng(0)
    img = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)

    def network(leaves):
        xt, wt, bt = leaves
        h = ops.conv2d(xt, ops.ConvParams(wt, bt, stride=2, padding="same"))
        h = ops.relu(h)
        return ops.global_avg_pool(h)

    out = network([img, w, b])
    loss = (out * out).sum()
    loss.backward()
    print(f"conv weight grad shape    -> {w.grad.shape}, "
          f"|grad| max {np.abs(w.grad).max():.4f}")

    # central finite differences agree with the recorded graph
    def loss_at_w(w_arr):
        with no_grad():
            val = network([Tensor(img.data), Tensor(w_arr), Tensor(b.data)])
            return float((val.data ** 2).sum())

    numeric = numerical_gradient(loss_at_w, w.data)
    rel = np.abs(numeric - w.grad).max() / max(np.abs(numeric).max(), 1e-12)
    print(f"finite-difference check   -> max relative error {rel:.2e}")

    # ------------------------------------------------------------------
    # no_grad() turns recording off -- inference costs no graph
    # ------------------------------------------------------------------
    with no_grad():
        silent = (img * 2.0).sum()
    print(f"inside no_grad            -> requires_grad={silent.requires_grad}")

    # gradients accumulate until cleared, which is what training wants
    x2 = Tensor(np.array(2.0), requires_grad=True)
    (x2 * x2).backward()
    (x2 * x2).backward()
    print(f"two backward passes       -> accumulated grad {x2.grad.item():g} "
          f"(4 + 4)")


if __name__ == "__main__":
    main()
