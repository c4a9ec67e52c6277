"""Shared test helpers: finite-difference gradient oracle and small fixtures."""
from __future__ import annotations

import numpy as np
import pytest

from pdl.tensor import Tensor, backward

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def numeric_grad(f, arrays: list[np.ndarray], k: int, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[k]``."""
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays: list[np.ndarray], h: float = FD_STEP) -> float:
    """Worst relative error between autodiff and central differences.

    ``build(*tensors)`` returns a Tensor; it is reduced with a fixed random
    projection so non-scalar outputs are covered too.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_rng = np.random.default_rng(1234)
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    probe = probe_rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float(np.sum(build(*[Tensor(a) for a in arrs]).data * probe))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    backward((out * probe).sum())
    worst = 0.0
    for k, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, k, h)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_err(ana, num))
    return worst


def worst_elementwise(build, arrays: list[np.ndarray], h: float = FD_STEP) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over all inputs of ``build``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = np.random.default_rng(99).standard_normal(build(*[Tensor(a) for a in arrays]).shape)

    def scalar(*arrs):
        return float(np.sum(build(*[Tensor(a) for a in arrs]).data * probe))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward((build(*ts) * probe).sum())
    worst = 0.0
    for k, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, k, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(num)), initial=0.0)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.rstrip("abc")), k)):
        ok, detail = results[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
