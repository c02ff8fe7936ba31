"""Entropic optimal transport for classifier transfer between class sets."""

from __future__ import annotations

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def _plan(f, g, C, eps):
    return np.exp((f[:, None] + g[None, :] - C) / eps)


def _residual(plan, r, c) -> float:
    return float(max(np.abs(plan.sum(1) - r).max(), np.abs(plan.sum(0) - c).max()))


def _newton_polish(C, r, c, f, g, eps, tol, steps: int = 30):
    """Damped Newton on the dual potentials, over the support of ``r`` and ``c``.

    Sinkhorn's contraction rate degrades when ``cost / eps`` has a wide
    range; near the solution Newton converges quadratically instead.  The last
    column potential is pinned to remove the shift invariance.
    """
    I, J = np.flatnonzero(r > 0), np.flatnonzero(c > 0)
    Cs, rs, cs = C[np.ix_(I, J)], r[I], c[J]
    fs, gs = f[I].copy(), g[J].copy()
    m = len(I)

    def res(fv, gv):
        P = _plan(fv, gv, Cs, eps)
        return P, np.concatenate([P.sum(1) - rs, (P.sum(0) - cs)[:-1]])

    P, e = res(fs, gs)
    for _ in range(steps):
        if np.abs(e).max() <= tol:
            break
        top = np.hstack([np.diag(P.sum(1)), P[:, :-1]])
        bottom = np.hstack([P[:, :-1].T, np.diag(P.sum(0)[:-1])])
        step = np.linalg.lstsq(np.vstack([top, bottom]) / eps, -e, rcond=None)[0]
        t = 1.0
        while t > 1e-4:
            f2 = fs + t * step[:m]
            g2 = gs.copy()
            g2[:-1] += t * step[m:]
            P2, e2 = res(f2, g2)
            if np.abs(e2).max() < np.abs(e).max():
                fs, gs, P, e = f2, g2, P2, e2
                break
            t /= 2
        else:
            break
    f, g = f.copy(), g.copy()
    f[I], g[J] = fs, gs
    return f, g


def sinkhorn(cost, r, c, eps: float = 0.1, max_iter: int = 10_000, tol: float = 1e-9,
             polish_every: int = 200) -> np.ndarray:
    """Entropic-regularized transport plan between marginals ``r`` and ``c``.

    Log-domain Sinkhorn iterations, so small ``eps`` does not underflow, with
    a Newton polish every ``polish_every`` sweeps.  Stops once both marginal
    residuals are at most ``tol``.
    """
    C = np.asarray(cost, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if C.shape != (r.size, c.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals {r.size}x{c.size}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost must be finite")
    if (r < 0).any() or (c < 0).any() or abs(r.sum() - 1) > 1e-9 or abs(c.sum() - 1) > 1e-9:
        raise ValueError("marginals must be nonnegative and sum to 1")
    with np.errstate(divide="ignore"):
        log_r, log_c = np.log(r), np.log(c)
    f = np.zeros(r.size)
    g = np.zeros(c.size)
    residual = np.inf
    for it in range(1, max_iter + 1):
        f = eps * (log_r - _logsumexp((g[None, :] - C) / eps, axis=1))
        f = np.where(r > 0, f, -np.inf)
        g = eps * (log_c - _logsumexp((f[:, None] - C) / eps, axis=0))
        g = np.where(c > 0, g, -np.inf)
        residual = _residual(_plan(f, g, C, eps), r, c)
        if residual <= tol:
            return _plan(f, g, C, eps)
        if polish_every and it % polish_every == 0:
            f, g = _newton_polish(C, r, c, f, g, eps, tol)
            plan = _plan(f, g, C, eps)
            residual = _residual(plan, r, c)
            if residual <= tol:
                return plan
    raise ConvergenceError(f"sinkhorn did not converge in {max_iter} iterations "
                           f"(marginal residual {residual:.3e})", residual)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def transport_cost(protos_a: np.ndarray, protos_b: np.ndarray) -> np.ndarray:
    """``1 - cosine`` between every prototype pair."""
    return 1.0 - _unit_rows(np.asarray(protos_a)) @ _unit_rows(np.asarray(protos_b)).T


def coil_transfer(old_weights, protos_old, protos_new, eps: float = 0.1):
    """Initialize new-class weights by transporting old-class weights.

    Returns ``(new_weights [Kn x d], plan [Ko x Kn])``; every new weight has
    unit norm.
    """
    old_weights = np.asarray(old_weights, dtype=np.float64)
    Ko, Kn = len(protos_old), len(protos_new)
    if Ko < 1:
        raise ValueError("need at least one old class")
    plan = sinkhorn(transport_cost(protos_old, protos_new), np.full(Ko, 1 / Ko), np.full(Kn, 1 / Kn), eps)
    new = (plan * Ko).T @ old_weights
    return _unit_rows(new), plan
