"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from milpool import tensor as T

H = 1e-5
TOL = 1e-4


def numeric_grad(f, arrays, h=H):
    """d f / d arrays[k] by central differences; ``f`` maps numpy arrays to a float."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            up = f(*arrays)
            a[idx] = orig - h
            down = f(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients from the autodiff engine; ``build`` maps leaf tensors to a scalar tensor."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*leaves))
    return [l.grad if l.grad is not None else np.zeros_like(l.values) for l in leaves]


def rel_error(analytic, numeric):
    """max |a - n| / max(1, |n|) over all entries."""
    return max(float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))) if a.size else 0.0
               for a, n in zip(analytic, numeric))


def grad_check(build, arrays, h=H):
    arrays = [np.array(a, dtype=float) for a in arrays]

    def value(*xs):
        with T.no_grad():
            return build(*[T.Tensor(x) for x in xs]).item()

    num = numeric_grad(value, [a.copy() for a in arrays], h)
    ana = analytic_grad(build, arrays)
    return rel_error(ana, num)
