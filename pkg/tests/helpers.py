"""Shared test utilities: finite-difference oracle and error metrics."""

import numpy as np


def finite_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one float64 array."""
    assert x.dtype == np.float64, "finite differences need 64-bit inputs"
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative difference, the usual gradient-check metric."""
    na = np.linalg.norm(a.reshape(-1))
    nb = np.linalg.norm(b.reshape(-1))
    if na == 0 and nb == 0:
        return 0.0
    return float(np.linalg.norm((a - b).reshape(-1)) / max(na + nb, 1e-12))


def check_grad(build, x0: np.ndarray, tol: float = 1e-4) -> float:
    """`build` maps a float64 array to a scalar loss Tensor; compares backward
    against central differences and returns the relative error."""
    from qtrans.tensor import Tensor

    t = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    loss = build(t)
    loss.backward()
    analytic = t.grad.copy()

    def f(arr):
        return float(build(Tensor(arr.copy(), dtype=np.float64)).data)

    numeric = finite_diff(f, x0.copy())
    err = rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err
