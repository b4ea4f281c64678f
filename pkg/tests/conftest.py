from __future__ import annotations

import numpy as np
import pytest

from dhal.nn import tensor as T


def numeric_grad(fn, arrays, eps=1e-4):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = fn(*arrays)
            a[i] = old - eps
            lo = fn(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def autodiff_grad(build, arrays):
    """Reverse-mode gradients of ``build(*tensors)`` w.r.t. each input array."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*ts)
    T.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grad(build, arrays, eps=1e-4, dtype=np.float64):
    """Max relative error between autodiff (run at ``dtype``) and float64 finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.precision(dtype):
        ad = autodiff_grad(build, [a.astype(dtype) for a in arrays])
    with T.precision(np.float64):

        def fn(*xs):
            return float(build(*[T.Tensor(x) for x in xs]).data)

        fd = numeric_grad(fn, arrays, eps)
    return max(rel_err(x, y) for x, y in zip(ad, fd))


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


# -- acceptance reporting ----------------------------------------------------------
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
