"""Shared test utilities."""
import numpy as np

from quantunet.tensor import Tensor


def numeric_grad(f, arrays, i, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(*arrays)
        x[idx] = orig - h
        fm = f(*arrays)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(op, arrays, seed=0, h=1e-6):
    """Max relative error between autograd and central differences for every input.

    The op's output is reduced with a fixed random projection so every output
    element contributes to the checked gradient.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*ts)
    proj = np.random.default_rng(seed + 1000).standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * proj))

    errs = []
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, h)
        errs.append(rel_err(t.grad, num))
    return max(errs)
