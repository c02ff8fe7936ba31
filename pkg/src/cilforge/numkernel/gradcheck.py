"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def _coords(p: Tensor, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    n = p.data.size
    if max_entries is None or n <= max_entries:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_entries, replace=False))


def numeric_grad(fn, params: list[Tensor], step: float = 1e-5, coords=None) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()``; ``coords[i]`` limits which
    flat entries of ``params[i]`` are perturbed (others stay 0)."""
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in (range(flat.size) if coords is None else coords[k]):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def gradcheck(fn, params: list[Tensor], step: float = 1e-5, max_entries: int | None = None,
              seed: int = 0) -> float:
    """Relative error between autodiff and finite differences.

    The error is ``||analytic - numeric|| / max(||numeric||, 1e-8)`` over all
    checked entries at once.  ``max_entries`` samples that many entries per
    parameter instead of all of them.
    """
    rng = np.random.default_rng(seed)
    coords = [_coords(p, max_entries, rng) for p in params]
    for p in params:
        p.grad = None
    backward(fn())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_grad(fn, params, step, coords)
    a = np.concatenate([g.reshape(-1)[c] for g, c in zip(analytic, coords)])
    n = np.concatenate([g.reshape(-1)[c] for g, c in zip(numeric, coords)])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-8))
