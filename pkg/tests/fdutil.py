"""Finite-difference oracle used by the gradient tests.

Central differences in float64 with h = 1e-5, compared against reverse-mode
gradients at relative error <= 1e-4. The comparison denominator floors at
1e-6 so near-zero components do not produce spurious blowups.
"""

import numpy as np

H = 1e-5
REL_TOL = 1e-4


def fd_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build_loss, leaves: dict, rng, jitter_relu: bool = False) -> float:
    """Compare reverse-mode grads against FD for every leaf.

    `build_loss(tensors: dict[str, Tensor]) -> Tensor` constructs a scalar
    loss from parameter tensors. `leaves` maps names to float64 arrays.
    Returns the worst relative error seen.
    """
    from munmt import tensor as T

    tensors = {k: T.parameter(v.copy(), k) for k, v in leaves.items()}
    loss = build_loss(tensors)
    grads = T.backward(loss, tensors)
    worst = 0.0
    for name, base in leaves.items():
        def f(x, _name=name):
            probe = {k: T.parameter(v.copy(), k) for k, v in leaves.items()}
            probe[_name] = T.parameter(x, _name)
            return float(build_loss(probe).data)

        fd = fd_grad(f, base)
        worst = max(worst, rel_err(grads[name], fd))
    return worst
