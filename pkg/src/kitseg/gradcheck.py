"""Finite-difference verification of the tape's analytic gradients."""
import time

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(fn, arrays, index, h=FD_STEP):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(*arrays)
        x[i] = orig - h
        fm = fn(*arrays)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(op, arrays, seed=0):
    """Compare tape gradients of ``op`` against central differences.

    ``op`` maps Tensors to a Tensor. Non-scalar outputs are reduced with a
    fixed random projection. Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = {}

    def scalar(*arrs):
        out = op(*[T.Tensor(a) for a in arrs]).data
        if "w" not in probe:
            probe["w"] = np.random.default_rng(seed).standard_normal(out.shape)
        return float(np.sum(out * probe["w"]))

    scalar(*arrays)
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    out.backward(probe["w"].astype(np.float64).reshape(out.shape))
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_gradient(scalar, arrays, i)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def _shapes(rng, count):
    for _ in range(count):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        yield n, c, h, w


def _case_conv2d(rng, n, c, h, w):
    f = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((f, c, k, k)),
              rng.standard_normal(f)]
    return (lambda x, kk, b: T.conv2d(x, kk, b, stride=stride, padding="same")), arrays


def _case_conv2d_transpose(rng, n, c, h, w):
    f = int(rng.integers(1, 4))
    k = int(rng.choice([2, 3]))
    size = (2 * h - int(rng.integers(0, 2)), 2 * w - int(rng.integers(0, 2)))
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((c, f, k, k)),
              rng.standard_normal(f)]
    return (lambda x, kk, b: T.conv2d_transpose(x, kk, b, output_size=size)), arrays


def _case_batch_norm(rng, n, c, h, w):
    arrays = [rng.standard_normal((n, c, h, w)) * 2 + 1, rng.standard_normal(c) + 1.5,
              rng.standard_normal(c)]
    stats = T.RunningStats(c)
    return (lambda x, g, b: T.batch_norm(x, g, b, stats, training=True)), arrays


def _case_batch_norm_eval(rng, n, c, h, w):
    stats = T.RunningStats(c)
    stats.mean = rng.standard_normal(c)
    stats.var = rng.random(c) + 0.5
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal(c), rng.standard_normal(c)]
    return (lambda x, g, b: T.batch_norm(x, g, b, stats, training=False)), arrays


def _case_relu(rng, n, c, h, w):
    x = rng.standard_normal((n, c, h, w))
    x[np.abs(x) < 1e-3] = 0.5
    return T.relu, [x]


def _case_dropout(rng, n, c, h, w):
    key = (int(rng.integers(1000)), 3, 7)
    return (lambda x: T.dropout(x, 0.5, True, key)), [rng.standard_normal((n, c, h, w))]


def _case_softmax(rng, n, c, h, w):
    return T.softmax_channels, [rng.standard_normal((n, c + 1, h, w))]


def _case_wce(rng, n, c, h, w):
    target = rng.integers(0, 3, size=(n, h, w))
    weights = [0.3, 1.0, 3.0]
    op = lambda x: T.weighted_cross_entropy(T.softmax_channels(x), target, weights)  # noqa: E731
    return op, [rng.standard_normal((n, 3, h, w))]


def _case_l2(rng, n, c, h, w):
    arrays = [rng.standard_normal((c, n, 3, 3)), rng.standard_normal((2, c, 1, 1))]
    return (lambda a, b: T.l2_penalty([a, b], 0.1)), arrays


def _case_add(rng, n, c, h, w):
    return T.add, [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, h, w))]


def _case_concat(rng, n, c, h, w):
    c2 = int(rng.integers(1, 4))
    return T.concat_channels, [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c2, h, w))]


CASES = {
    "conv2d": _case_conv2d,
    "conv2d_transpose": _case_conv2d_transpose,
    "batch_norm": _case_batch_norm,
    "batch_norm_eval": _case_batch_norm_eval,
    "relu": _case_relu,
    "dropout": _case_dropout,
    "softmax_channels": _case_softmax,
    "weighted_cross_entropy": _case_wce,
    "l2_penalty": _case_l2,
    "add": _case_add,
    "concat_channels": _case_concat,
}


def run_suite(ops=None, shapes_per_op=5, seed=0):
    """Check each op on ``shapes_per_op`` random shapes.

    Returns a list of ``(op, max_relative_error, seconds)`` rows.
    """
    rows = []
    for name in ops or CASES:
        if name not in CASES:
            raise KeyError(f"unknown op {name!r}; choose from {sorted(CASES)}")
        rng = np.random.default_rng([seed, len(name)])
        start = time.perf_counter()
        worst = 0.0
        for shape in _shapes(rng, shapes_per_op):
            op, arrays = CASES[name](rng, *shape)
            worst = max(worst, check_gradients(op, arrays, seed=int(rng.integers(1 << 30))))
        rows.append((name, worst, time.perf_counter() - start))
    return rows
