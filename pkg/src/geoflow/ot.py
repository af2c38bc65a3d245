"""Minibatch entropic OT between noise sources and paired data targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, DataError

DEFAULT_EPSILON = 0.05
MAX_ITER = 1000
RESIDUAL_TOL = 1e-6
# Scalings beyond exp(ABSORB) are folded back into the dual potentials.
ABSORB = 50.0
# Sinkhorn iterations of the final stage before handing over to Newton polishing.
NEWTON_AFTER = 300
NEWTON_STEPS = 50


@dataclass
class TransportAssignment:
    target_index: np.ndarray
    plan_entropy: float


def product_geodesic_cost(sources, targets) -> np.ndarray:
    """Sum of per-block arc lengths between every source and every target (B x B)."""
    src = np.asarray(sources, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1] or src.shape[1] % 2:
        raise DataError(f"incompatible product batches {src.shape} and {tgt.shape}")
    d = src.shape[1] // 2
    img = np.clip(src[:, :d] @ tgt[:, :d].T, -1.0, 1.0)
    txt = np.clip(src[:, d:] @ tgt[:, d:].T, -1.0, 1.0)
    return np.arccos(img) + np.arccos(txt)


def _log_step(cost, f, g, log_a, log_b, eps):
    f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
    g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
    return f, g


def sinkhorn_plan(cost, epsilon: float = DEFAULT_EPSILON, max_iter: int = MAX_ITER,
                  tol: float = RESIDUAL_TOL, warm_start: bool = True) -> np.ndarray:
    """Entropic OT plan with uniform marginals.

    The iteration runs on scaling vectors against a kernel that already
    absorbs the current dual potentials, so each step is two mat-vecs; when a
    scaling leaves [exp(-ABSORB), exp(ABSORB)] or underflows, it is folded
    into the potentials with an exact log-sum-exp update. This keeps the
    iterates finite for small epsilon while staying cheap for batch sizes in
    the hundreds.

    With ``warm_start`` the dual potentials are first solved loosely at
    16, 8, 4 and 2 times ``epsilon``; ``max_iter`` bounds each stage.
    Sinkhorn converges only linearly, and very slowly when cost/epsilon is
    large with near-tied assignments, so if the final stage has not met
    ``tol`` after NEWTON_AFTER iterations the dual is finished with damped
    Newton steps.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or not np.all(np.isfinite(cost)):
        raise DataError("cost must be a finite 2-D matrix")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n, m = cost.shape
    f, g = np.zeros(n), np.zeros(m)
    if warm_start and n > 1:
        for scale in (16.0, 8.0, 4.0, 2.0):
            f, g, _, _ = _solve(cost, scale * epsilon, f, g, max_iter, 1e-4 / n)
    f, g, plan, residual = _solve(cost, epsilon, f, g, min(max_iter, NEWTON_AFTER), tol)
    if residual >= tol:
        f, g, plan, residual = _newton(cost, epsilon, f, g, tol)
    if residual >= tol and max_iter > NEWTON_AFTER:
        f, g, plan, residual = _solve(cost, epsilon, f, g, max_iter - NEWTON_AFTER, tol)
    if residual < tol:
        return plan
    raise ConvergenceError(f"Sinkhorn did not converge in {max_iter} iterations "
                           f"(marginal residual {residual:.3e})", residual)


def _solve(cost, epsilon, f, g, max_iter, tol, check_every=10):
    n, m = cost.shape
    log_a, log_b = -np.log(n), -np.log(m)
    a, b = 1.0 / n, 1.0 / m
    f, g = _log_step(cost, f, g, log_a, log_b, epsilon)
    K = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
    u, v = np.ones(n), np.ones(m)
    lo, hi = np.exp(-ABSORB), np.exp(ABSORB)
    residual = np.inf
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        while it < max_iter:
            u_prev, v_prev = u, v
            for _ in range(min(check_every, max_iter - it)):
                u = a / (K @ v)
                v = b / (K.T @ u)
                it += 1
            ok = np.isfinite(u).all() and np.isfinite(v).all()
            if not ok or min(u.min(), v.min()) < lo or max(u.max(), v.max()) > hi:
                # fold the last good scalings into the potentials and redo exactly
                if not ok:
                    u, v = u_prev, v_prev
                f, g = f + epsilon * np.log(u), g + epsilon * np.log(v)
                f, g = _log_step(cost, f, g, log_a, log_b, epsilon)
                K = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
                u, v = np.ones(n), np.ones(m)
            row = u * (K @ v)
            residual = np.abs(row - a).max()
            if residual < tol:
                break
    plan = u[:, None] * K * v[None, :]
    residual = max(np.abs(plan.sum(1) - a).max(), np.abs(plan.sum(0) - b).max())
    return f + epsilon * np.log(u), g + epsilon * np.log(v), plan, residual


def _dual(cost, f, g, a, b, eps):
    with np.errstate(over="ignore"):
        P = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return a * f.sum() + b * g.sum() - eps * P.sum(), P


def _newton(cost, epsilon, f, g, tol, max_steps=NEWTON_STEPS):
    """Damped Newton ascent on the entropic dual, with g[-1] pinned to remove the gauge freedom."""
    n, m = cost.shape
    a, b = 1.0 / n, 1.0 / m
    obj, P = _dual(cost, f, g, a, b, epsilon)
    residual = np.inf
    for _ in range(max_steps):
        if not np.isfinite(obj):
            break
        rs, cs = P.sum(1), P.sum(0)
        grad = np.concatenate([a - rs, b - cs])
        residual = np.abs(grad).max()
        if residual < tol:
            break
        H = np.block([[np.diag(rs), P], [P.T, np.diag(cs)]]) / epsilon
        H, rhs = H[:-1, :-1], grad[:-1]
        H[np.diag_indices_from(H)] += 1e-14 / epsilon
        try:
            step = np.linalg.solve(H, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, rhs, rcond=None)[0]
        df, dg = step[:n], np.concatenate([step[n:], [0.0]])
        slope = rhs @ step
        t = 1.0
        while t > 1e-8:
            new_obj, new_P = _dual(cost, f + t * df, g + t * dg, a, b, epsilon)
            if np.isfinite(new_obj) and new_obj >= obj + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        f, g, obj, P = f + t * df, g + t * dg, new_obj, new_P
    residual = max(np.abs(P.sum(1) - a).max(), np.abs(P.sum(0) - b).max())
    return f, g, P, residual


def harden_assignment(plan) -> TransportAssignment:
    """Row-wise argmax; numpy's argmax already returns the lowest index on ties."""
    plan = np.asarray(plan, dtype=np.float64)
    idx = np.argmax(plan, axis=1)
    p = plan[plan > 0]
    return TransportAssignment(target_index=idx, plan_entropy=float(-(p * np.log(p)).sum()))


def couple(sources, targets, epsilon: float = DEFAULT_EPSILON, max_iter: int = MAX_ITER) -> TransportAssignment:
    plan = sinkhorn_plan(product_geodesic_cost(sources, targets), epsilon, max_iter=max_iter)
    return harden_assignment(plan)
