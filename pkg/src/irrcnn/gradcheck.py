"""Finite-difference verification of analytic gradients.

Every differentiable op gets checked by perturbing each input coordinate by
a central difference and comparing against the backward pass. Comparisons
run in double precision; the acceptance threshold is a relative error of
1e-4 with a step of 1e-3 unless a caller overrides them.

To turn any tensor-valued function into a scalar one (so the finite
difference is one number), outputs are contracted against a fixed random
matrix R: loss = sum(f(x) * R). The same R serves the analytic and numeric
sides.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import ops
from .rng import fork_rng
from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4


class GradientMismatch(AssertionError):
    """Analytic and numeric gradients disagree beyond tolerance."""

    def __init__(self, where: str, error: float, tolerance: float):
        self.where = where
        self.error = error
        self.tolerance = tolerance
        super().__init__(
            f"gradient mismatch on {where}: relative error {error:.3e} > {tolerance:.0e}"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8), the scale-free gap."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numerical_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP
) -> np.ndarray:
    """Central finite difference of a scalar-valued f at x, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradient(
    build: Callable[[List[Tensor]], Tensor],
    arrays: List[np.ndarray],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> float:
    """Compare analytic and numeric gradients of sum(build(inputs) * R).

    `build` maps a list of leaf tensors to one output tensor; every leaf is
    checked. Returns the worst relative error over all inputs and raises
    GradientMismatch when it exceeds the tolerance.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    r = rng.normal(size=out.data.shape)

    loss = (out * Tensor(r)).sum()
    loss.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    for k in range(len(arrays)):
        def scalar(xk: np.ndarray, k=k) -> float:
            probe = [Tensor(a) for a in arrays]
            probe[k] = Tensor(xk)
            return float((build(probe).data * r).sum())

        numeric = numerical_gradient(scalar, arrays[k].copy(), step=step)
        err = relative_error(analytic[k], numeric)
        worst = max(worst, err)
        if err > tolerance:
            raise GradientMismatch(f"input {k}", err, tolerance)
    return worst


# ---------------------------------------------------------------------------
# the op-level suite
# ---------------------------------------------------------------------------


def _well_separated(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Values with pairwise gaps of 0.5 in random order, so max-pool argmaxes
    cannot flip under the finite-difference step."""
    n = int(np.prod(shape))
    vals = np.arange(n, dtype=np.float64) * 0.5
    return rng.permutation(vals).reshape(shape)


def _suite_cases(seed: int, tolerance: float = DEFAULT_TOLERANCE) -> Dict[str, Callable[[], float]]:
    """Name -> runnable check. Each call returns the worst relative error."""

    def conv_case() -> float:
        rng = fork_rng(seed, "gradcheck/conv2d")
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3)) * 0.5
        b = rng.normal(size=(4,))

        def build(leaves):
            xt, wt, bt = leaves
            return ops.conv2d(xt, ops.ConvParams(wt, bt, stride=2, padding="same"))

        return check_gradient(build, [x, w, b], rng, tolerance=tolerance)

    def conv_valid_case() -> float:
        rng = fork_rng(seed, "gradcheck/conv2d-valid")
        x = rng.normal(size=(2, 2, 6, 7))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5

        def build(leaves):
            xt, wt = leaves
            return ops.conv2d(xt, ops.ConvParams(wt, None, stride=1, padding="valid"))

        return check_gradient(build, [x, w], rng, tolerance=tolerance)

    def maxpool_case() -> float:
        rng = fork_rng(seed, "gradcheck/maxpool")
        x = _well_separated(rng, (2, 2, 6, 6))
        return check_gradient(
            lambda leaves: ops.pool2d(leaves[0], "max", window=3, stride=2, padding="valid"),
            [x],
            rng,
            tolerance=tolerance,
        )

    def avgpool_case() -> float:
        rng = fork_rng(seed, "gradcheck/avgpool")
        x = rng.normal(size=(2, 3, 6, 6))
        return check_gradient(
            lambda leaves: ops.pool2d(leaves[0], "avg", window=3, stride=1, padding="same"),
            [x],
            rng,
            tolerance=tolerance,
        )

    def relu_case() -> float:
        rng = fork_rng(seed, "gradcheck/relu")
        # keep every coordinate at least 0.1 away from the kink at zero
        x = rng.normal(size=(3, 4, 5, 5))
        x = np.where(np.abs(x) < 0.1, x + np.where(x >= 0, 0.2, -0.2), x)
        return check_gradient(lambda leaves: ops.relu(leaves[0]), [x], rng, tolerance=tolerance)

    def elu_case() -> float:
        rng = fork_rng(seed, "gradcheck/elu")
        # elu is C1 but not C2: within the probe step of zero the central
        # difference picks up the curvature jump (O(step) error), so keep
        # coordinates away from the origin just like the relu case
        x = rng.normal(size=(3, 4, 5, 5))
        x = np.where(np.abs(x) < 0.1, x + np.where(x >= 0, 0.2, -0.2), x)
        return check_gradient(lambda leaves: ops.elu(leaves[0]), [x], rng, tolerance=tolerance)

    def batchnorm_case() -> float:
        rng = fork_rng(seed, "gradcheck/batchnorm")
        x = rng.normal(size=(4, 3, 5, 5))
        gamma = rng.normal(size=(3,)) * 0.5 + 1.0
        beta = rng.normal(size=(3,)) * 0.5

        def build(leaves):
            xt, gt, bt = leaves
            params = ops.BatchNormParams(3, dtype=np.float64)
            params.gamma, params.beta = gt, bt
            return ops.batch_norm(xt, params)

        return check_gradient(build, [x, gamma, beta], rng, tolerance=tolerance)

    def dropout_case() -> float:
        rng = fork_rng(seed, "gradcheck/dropout")
        x = rng.normal(size=(2, 3, 6, 6))

        def build(leaves):
            # a fresh generator on the same stream per evaluation keeps the
            # mask fixed across finite-difference probes
            return ops.dropout(leaves[0], 0.4, "train", fork_rng(seed, "gradcheck/dropout-mask"))

        return check_gradient(build, [x], rng, tolerance=tolerance)

    def dense_case() -> float:
        rng = fork_rng(seed, "gradcheck/dense")
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 3)) * 0.5
        b = rng.normal(size=(3,))
        return check_gradient(lambda leaves: ops.dense(*leaves), [x, w, b], rng, tolerance=tolerance)

    def softmax_case() -> float:
        rng = fork_rng(seed, "gradcheck/softmax")
        z = rng.normal(size=(5, 8)) * 2.0
        return check_gradient(lambda leaves: ops.softmax(leaves[0]), [z], rng, tolerance=tolerance)

    def concat_residual_case() -> float:
        rng = fork_rng(seed, "gradcheck/concat")
        a = rng.normal(size=(2, 2, 4, 4))
        b = rng.normal(size=(2, 3, 4, 4))

        def build(leaves):
            at, bt = leaves
            cat = ops.concat_channels([at, bt])
            return ops.residual_add(cat, cat * 0.5)

        return check_gradient(build, [a, b], rng, tolerance=tolerance)

    def gap_case() -> float:
        rng = fork_rng(seed, "gradcheck/gap")
        x = rng.normal(size=(3, 4, 5, 6))
        return check_gradient(lambda leaves: ops.global_avg_pool(leaves[0]), [x], rng, tolerance=tolerance)

    return {
        "conv2d": conv_case,
        "conv2d_valid": conv_valid_case,
        "maxpool": maxpool_case,
        "avgpool": avgpool_case,
        "relu": relu_case,
        "elu": elu_case,
        "batch_norm": batchnorm_case,
        "dropout": dropout_case,
        "dense": dense_case,
        "softmax": softmax_case,
        "concat_residual": concat_residual_case,
        "global_avg_pool": gap_case,
    }


def op_names() -> Tuple[str, ...]:
    return tuple(_suite_cases(0).keys())


def run_op_suite(
    seeds: Iterable[int], only: Optional[Iterable[str]] = None,
    tolerance: float = DEFAULT_TOLERANCE,
) -> List[Tuple[str, int, float, bool]]:
    """Run every op check under each seed.

    Returns (op_name, seed, worst_relative_error, passed) rows; a failing
    check contributes a row with passed=False instead of raising, so a
    planted fault shows up localized to one op.
    """
    wanted = set(only) if only is not None else None
    rows: List[Tuple[str, int, float, bool]] = []
    for seed in seeds:
        for name, case in _suite_cases(int(seed), tolerance=tolerance).items():
            if wanted is not None and name not in wanted:
                continue
            try:
                rows.append((name, int(seed), case(), True))
            except GradientMismatch as exc:
                rows.append((name, int(seed), exc.error, False))
    return rows


# ---------------------------------------------------------------------------
# composite check through a full recurrent-residual unit
# ---------------------------------------------------------------------------


COMPOSITE_STEP = 1e-5


def check_composite_unit(
    seed: int,
    steps: int = 2,
    channels: int = 8,
    step: float = COMPOSITE_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> float:
    """End-to-end gradient check through one recurrent-residual unit.

    Perturbs the input and every parameter in place; batch-norm runs on
    batch statistics, so its running-average updates do not touch the
    forward value. The step is much finer than the op-level default: the
    exponential activation is C1 but not C2 at zero, and a coarse step
    occasionally probes across such a point, picking up the
    second-derivative jump. At 1e-5 those crossings are rare and small
    while roundoff in the difference quotient stays two orders below the
    tolerance (the piecewise-linear activation is covered in the op suite,
    away from its kink).
    """
    from .model import IRRU, IRRUSpec

    rng = fork_rng(seed, "gradcheck/irru")
    spec = IRRUSpec(width=channels, time_steps=steps, activation="elu")
    unit = IRRU(spec, seed, name="unit", dtype=np.float64)
    x = Tensor(rng.normal(size=(2, channels, 6, 6)), requires_grad=True)

    out = unit.forward(x, mode="train")
    r = rng.normal(size=out.data.shape)
    ((out * Tensor(r)).sum()).backward()

    params = unit.parameters()
    targets = {"input": x, **params}
    analytic = {name: t.grad.copy() for name, t in targets.items()}

    def value() -> float:
        with no_grad():
            return float((unit.forward(x.detach(), mode="train").data * r).sum())

    worst = 0.0
    for name, t in targets.items():
        flat = t.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = value()
            flat[i] = orig - step
            lo = value()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        err = relative_error(analytic[name], numeric.reshape(t.data.shape))
        worst = max(worst, err)
        if err > tolerance:
            raise GradientMismatch(name, err, tolerance)
    return worst
