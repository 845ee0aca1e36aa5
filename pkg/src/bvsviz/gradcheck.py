"""Finite-difference checks for every differentiable op and the classifier loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .classifier import class_weights, weighted_cross_entropy
from .model import build_model


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    redrawn: int = 0  # instances discarded for sitting on a non-differentiable point

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + np.sign(x) * margin


def kink_distance(loss: T.Tensor) -> float:
    """Smallest distance of any ReLU input from 0, or of any max-pool winner from its runner-up.

    Central differences straddling such a point measure a one-sided slope
    blend, not the derivative. Windows whose maximum is 0 are ignored: they
    hold dead ReLU outputs that stay 0 unless a ReLU input is itself near 0.
    """
    best = np.inf
    for node in T._topological_order(loss):
        if node._op == "relu":
            best = min(best, float(np.abs(node._parents[0].data).min()))
        elif node._op == "max_pool2d":
            x = node._parents[0].data
            n, c, h, w = x.shape
            win = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                          .reshape(n, c, h // 2, w // 2, 4), axis=-1)
            live = win[..., 3] > 0
            if live.any():
                best = min(best, float((win[..., 3] - win[..., 2])[live].min()))
    return best


def _check(build: Callable[[np.random.Generator], tuple[Callable[[], T.Tensor], list[T.Tensor]]],
           rng: np.random.Generator, h: float, coords: int | None = None,
           margin: float = 0.0) -> tuple[float, int]:
    """Worst relative error over the leaves returned by ``build`` for one random instance.

    Instances with a kink closer than ``margin`` are redrawn; the number of
    redraws is returned alongside the error.
    """
    redrawn = 0
    while True:
        forward, leaves = build(rng)
        loss = forward()
        if margin <= 0 or kink_distance(loss) >= margin:
            break
        redrawn += 1
        if redrawn > 1000:
            raise RuntimeError("could not draw an instance away from non-differentiable points")
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        f = lambda: float(forward().data)
        if coords is None or leaf.size <= coords:
            numeric = T.numerical_gradient(f, leaf.data, h)
            worst = max(worst, T.relative_error(analytic, numeric))
        else:
            idx = rng.choice(leaf.size, size=coords, replace=False)
            flat = leaf.data.reshape(-1)
            numeric = np.empty(coords)
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * h)
            worst = max(worst, T.relative_error(analytic.reshape(-1)[idx], numeric))
    return worst, redrawn


def _leaf(arr):
    return T.Tensor(arr, requires_grad=True)


def _projection(rng, shape):
    """Random fixed weights turning an op output into a scalar with a nontrivial upstream gradient."""
    return T.Tensor(rng.normal(size=shape))


def _case_conv(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = _leaf(rng.normal(size=(1, 2, 5, 5)))
    w = _leaf(rng.normal(size=(3, 2, 3, 3)))
    b = _leaf(rng.normal(size=(3,)))
    out_shape = T.conv2d(x, w, b, stride, padding).shape
    proj = _projection(rng, out_shape)
    return (lambda: T.tensor_sum(T.mul(T.conv2d(x, w, b, stride, padding), proj))), [x, w, b]


def _case_relu(rng):
    x = _leaf(_away_from_zero(rng, (4, 6)))
    proj = _projection(rng, (4, 6))
    return (lambda: T.tensor_sum(T.mul(T.relu(x), proj))), [x]


def _case_maxpool(rng):
    # distinct values so no window has a tie within h
    x = _leaf(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01 + rng.normal(size=(2, 3, 6, 6)) * 1e-3)
    proj = _projection(rng, (2, 3, 3, 3))
    return (lambda: T.tensor_sum(T.mul(T.max_pool2d(x), proj))), [x]


def _case_gap(rng):
    x = _leaf(rng.normal(size=(2, 3, 4, 4)))
    proj = _projection(rng, (2, 3))
    return (lambda: T.tensor_sum(T.mul(T.global_avg_pool(x), proj))), [x]


def _case_dense(rng):
    x = _leaf(rng.normal(size=(4, 5)))
    w = _leaf(rng.normal(size=(3, 5)))
    b = _leaf(rng.normal(size=(3,)))
    proj = _projection(rng, (4, 3))
    return (lambda: T.tensor_sum(T.mul(T.dense(x, w, b), proj))), [x, w, b]


def _case_add_mul(rng):
    a = _leaf(rng.normal(size=(3, 4)))
    b = _leaf(rng.normal(size=(3, 4)))
    return (lambda: T.tensor_sum(T.mul(T.add(a, b), a) * 0.5)), [a, b]


def _case_bias_reshape_select(rng):
    x = _leaf(rng.normal(size=(2, 3, 2, 2)))
    b4 = _leaf(rng.normal(size=(3,)))
    b2 = _leaf(rng.normal(size=(4,)))
    rows = rng.integers(0, 6, size=5)  # repeated rows exercise the scatter-add
    cols = rng.integers(0, 4, size=5)
    proj = _projection(rng, (5,))

    def forward():
        h = T.reshape(T.add(x, b4), (6, 4))
        return T.tensor_sum(T.mul(T.select(T.add(h, b2), rows, cols), proj))

    return forward, [x, b4, b2]


def _case_cross_entropy(rng):
    logits = _leaf(rng.normal(size=(5, 3)) * 2)
    labels = rng.integers(0, 3, size=5)
    weights = class_weights(rng.integers(1, 50, size=3))
    return (lambda: weighted_cross_entropy(logits, labels, weights)), [logits]


def _case_conv_relu_dense(rng):
    x = _leaf(rng.normal(size=(2, 1, 6, 6)))
    w1 = _leaf(rng.normal(size=(3, 1, 3, 3)))
    b1 = _leaf(rng.normal(size=(3,)) * 0.1)
    w2 = _leaf(rng.normal(size=(3, 3 * 6 * 6)) * 0.1)
    b2 = _leaf(rng.normal(size=(3,)))
    labels = rng.integers(0, 3, size=2)

    def forward():
        h = T.relu(T.conv2d(x, w1, b1, 1, 1))
        return weighted_cross_entropy(T.dense(T.flatten(h), w2, b2), labels, [1 / 3] * 3)

    return forward, [x, w1, b1, w2, b2]


def _case_classifier(rng):
    model = build_model(16, 4, seed=int(rng.integers(2 ** 31)))
    # zero biases put dead units exactly on the ReLU kink, where finite differences are meaningless
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    x = _leaf(rng.uniform(size=(2, 1, 16, 16)))
    labels = rng.integers(0, 3, size=2)
    weights = class_weights(rng.integers(1, 50, size=3))
    return (lambda: weighted_cross_entropy(model(x), labels, weights)), [x] + model.parameters()


CASES = {
    "conv2d": (_case_conv, None),
    "relu": (_case_relu, None),
    "max_pool2d": (_case_maxpool, None),
    "global_avg_pool": (_case_gap, None),
    "dense": (_case_dense, None),
    "add_mul_sum": (_case_add_mul, None),
    "bias_reshape_select": (_case_bias_reshape_select, None),
    "weighted_cross_entropy": (_case_cross_entropy, None),
    "conv_relu_dense": (_case_conv_relu_dense, None),
    "classifier_loss": (_case_classifier, 12),
}


def run_gradcheck(instances: int = 20, seed: int = 0, h: float = 1e-5,
                  kink_margin: float | None = None) -> list[CheckResult]:
    """Run every case ``instances`` times in float64 and report the worst relative error per case.

    Instances whose ReLU inputs or max-pool gaps lie within ``kink_margin``
    (default 10 h) of a kink are redrawn, since finite differences are not
    defined there.
    """
    margin = 10 * h if kink_margin is None else kink_margin
    results = []
    with T.precision("float64"):
        for i, (name, (build, coords)) in enumerate(CASES.items()):
            rng = np.random.default_rng([seed, i])
            runs = [_check(build, rng, h, coords, margin) for _ in range(instances)]
            results.append(CheckResult(name, instances, max(w for w, _ in runs), sum(r for _, r in runs)))
    return results
