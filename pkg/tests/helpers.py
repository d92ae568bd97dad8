"""Finite-difference oracle and small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from layerkd import tensor as T

FD_STEP = 1e-4
REL_TOL = 1e-4
# denominators below this are treated as this value, so gradients that are
# numerically zero are compared on an absolute scale of ~1e-10
REL_FLOOR = 1e-6


def analytic_grads(fn, tensors):
    for t in tensors:
        t.grad = None
    tape = T.Tape()
    with tape:
        out = fn()
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def numeric_grad(fn, t, flat_index, step=FD_STEP):
    """Central difference of ``fn()`` w.r.t. one element of ``t`` (no tape involved)."""
    view = t.data.reshape(-1)
    orig = view[flat_index]
    view[flat_index] = orig + step
    plus = fn().item()
    view[flat_index] = orig - step
    minus = fn().item()
    view[flat_index] = orig
    return (plus - minus) / (2 * step)


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def gradcheck(fn, tensors, slots=50, seed=0):
    """Compare tape gradients with central differences on ``slots`` random elements.

    Slots are spread across ``tensors`` (every tensor gets at least one when
    ``slots`` allows).  Returns ``(max_relative_error, n_slots_checked)``.
    """
    rng = np.random.default_rng(seed)
    grads = analytic_grads(fn, tensors)
    picks = []
    for i, t in enumerate(tensors):
        picks.append((i, int(rng.integers(t.size))))
    sizes = np.array([t.size for t in tensors], dtype=float)
    while len(picks) < slots:
        i = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        picks.append((i, int(rng.integers(tensors[i].size))))
    worst = 0.0
    for i, j in picks:
        a = grads[i].reshape(-1)[j]
        n = numeric_grad(fn, tensors[i], j)
        worst = max(worst, relative_error(a, n))
    return worst, len(picks)


def rand(rng, *shape, requires_grad=True, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# one differentiable scalar function per tape op


def _weights(rng, shape):
    return rng.normal(size=shape)


def op_cases():
    """(name, builder) pairs; builder(rng) -> (fn, tensors) with fn returning a scalar."""
    def elementwise(op):
        def build(rng):
            a, b = rand(rng, 4, 5), rand(rng, 4, 5)
            w = _weights(rng, (4, 5))
            return (lambda: T.sum_all(T.mul_const(op(a, b), w))), [a, b]
        return build

    def unary(op, shift=0.0):
        def build(rng):
            x = rand(rng, 6, 7)
            if shift:
                x.data += np.sign(x.data) * shift
            w = _weights(rng, (6, 7))
            return (lambda: T.sum_all(T.mul_const(op(x), w))), [x]
        return build

    def matmul(rng):
        a, b = rand(rng, 6, 5), rand(rng, 5, 4)
        w = _weights(rng, (6, 4))
        return (lambda: T.sum_all(T.mul_const(T.matmul(a, b), w))), [a, b]

    def bmm(rng):
        a, b = rand(rng, 2, 3, 4, 5), rand(rng, 2, 3, 5, 2)
        w = _weights(rng, (2, 3, 4, 2))
        return (lambda: T.sum_all(T.mul_const(T.bmm(a, b), w))), [a, b]

    def add_bias(rng):
        x, b = rand(rng, 3, 4, 5), rand(rng, 5)
        w = _weights(rng, (3, 4, 5))
        return (lambda: T.sum_all(T.mul_const(T.add_bias(x, b), w))), [x, b]

    def reshape(rng):
        x = rand(rng, 4, 6)
        w = _weights(rng, (3, 8))
        return (lambda: T.sum_all(T.mul_const(T.reshape(x, (3, 8)), w))), [x]

    def transpose(rng):
        x = rand(rng, 2, 3, 4, 5)
        w = _weights(rng, (4, 2, 5, 3))
        return (lambda: T.sum_all(T.mul_const(T.transpose(x, (2, 0, 3, 1)), w))), [x]

    def embedding(rng):
        table = rand(rng, 10, 6)
        ids = rng.integers(0, 10, size=(3, 7))
        w = _weights(rng, (3, 7, 6))
        return (lambda: T.sum_all(T.mul_const(T.embedding(table, ids), w))), [table]

    def mean_all(rng):
        x = rand(rng, 7, 8)
        return (lambda: T.mean(T.mul(x, x))), [x]

    def mean_axis(rng):
        x = rand(rng, 4, 5, 6)
        w = _weights(rng, (4, 6))
        return (lambda: T.sum_all(T.mul_const(T.mean(x, axis=1), w))), [x]

    def masked_mean(rng):
        x = rand(rng, 3, 5, 4)
        mask = np.ones((3, 5))
        mask[0, 3:] = 0
        w = _weights(rng, (3, 4))
        return (lambda: T.sum_all(T.mul_const(T.masked_mean(x, mask), w))), [x]

    def softmax(rng):
        x = rand(rng, 5, 6)
        w = _weights(rng, (5, 6))
        return (lambda: T.sum_all(T.mul_const(T.softmax(x, axis=-1), w))), [x]

    def log_softmax(rng):
        x = rand(rng, 5, 6)
        w = _weights(rng, (5, 6))
        return (lambda: T.sum_all(T.mul_const(T.log_softmax(x, axis=0), w))), [x]

    def layer_norm(rng):
        x, g, b = rand(rng, 3, 4, 6), rand(rng, 6), rand(rng, 6)
        w = _weights(rng, (3, 4, 6))
        return (lambda: T.sum_all(T.mul_const(T.layer_norm(x, g, b), w))), [x, g, b]

    def cross_entropy(rng):
        x = rand(rng, 8, 5)
        y = rng.integers(0, 5, size=8)
        wts = rng.uniform(0.5, 1.5, size=8)
        return (lambda: T.cross_entropy(x, y, wts)), [x]

    def mse(rng):
        a, b = rand(rng, 4, 3, 5), rand(rng, 4, 3, 5)
        return (lambda: T.mse(a, b)), [a, b]

    def add_const(rng):
        x = rand(rng, 2, 1, 4, 4)
        c = rng.normal(size=(1, 1, 4, 4))
        w = _weights(rng, (2, 1, 4, 4))
        return (lambda: T.sum_all(T.mul_const(T.mul(T.add_const(x, c), x), w))), [x]

    def sum_all(rng):
        x = rand(rng, 9, 7)
        return (lambda: T.sum_all(T.mul(x, T.gelu(x)))), [x]

    return [
        ("add", elementwise(T.add)),
        ("sub", elementwise(T.sub)),
        ("mul", elementwise(T.mul)),
        ("scale", unary(lambda x: T.scale(x, -1.7))),
        ("relu", unary(T.relu, shift=0.05)),
        ("gelu", unary(T.gelu)),
        ("matmul", matmul),
        ("bmm", bmm),
        ("add_bias", add_bias),
        ("add_const", add_const),
        ("mul_const", unary(lambda x: T.mul_const(x, np.linspace(-1, 1, 7)))),
        ("reshape", reshape),
        ("transpose", transpose),
        ("embedding", embedding),
        ("sum_all", sum_all),
        ("mean_all", mean_all),
        ("mean_axis", mean_axis),
        ("masked_mean", masked_mean),
        ("softmax", softmax),
        ("log_softmax", log_softmax),
        ("layer_norm", layer_norm),
        ("cross_entropy", cross_entropy),
        ("mse", mse),
    ]


OP_CASES = op_cases()


# acceptance verdicts, printed in the terminal summary by conftest.py
VERDICTS: dict[int, str] = {}


def verdict(number: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    VERDICTS[number] = line
    print(line)
    return ok
