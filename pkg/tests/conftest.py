import numpy as np
import pytest

from axialseg.tensor import Graph


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += eps
        lo[idx] -= eps
        out[idx] = (f(hi) - f(lo)) / (2 * eps)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / den).max())


def analytic_grads(build, *arrays):
    """Gradients of ``sum(build(*leaves))`` w.r.t. each array, via backward."""
    from axialseg import tensor as T

    with Graph() as g:
        leaves = [g.leaf(a) for a in arrays]
        grads = g.backward(T.sum(build(*leaves)))
    return [grads[leaf] for leaf in leaves]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
