"""Entropic optimal transport and barycentric mapping for domain adaptation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError


class SinkhornConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class TransportResult:
    plan: np.ndarray
    cost: np.ndarray
    reg: float
    iterations: int
    marginal_error: float

    @property
    def transport_cost(self) -> float:
        return float((self.plan * self.cost).sum())


def sq_euclidean(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(a, b, cost, reg, tol=1e-6, max_iter=10000, scaling=0.5) -> TransportResult:
    """Log-domain Sinkhorn; stops when the row-marginal L1 error is below ``tol``.

    The potentials are warm-started along a decreasing regularization
    schedule (``scaling`` < 1 per stage, down to ``reg``), which cuts the
    iteration count at small ``reg`` by orders of magnitude.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    schedule = [reg]
    if scaling and scaling < 1.0:
        top = float(cost.max()) if cost.size else reg
        while schedule[-1] < top:
            schedule.append(schedule[-1] / scaling)
        schedule.reverse()
    it = 0
    for eps in schedule:
        final = eps == reg
        for _ in range(max_iter if final else 50):
            it += 1
            f = eps * (log_a - _lse((g[None, :] - cost) / eps, axis=1))
            g = eps * (log_b - _lse((f[:, None] - cost) / eps, axis=0))
            if final and it % 10 == 0:
                plan = np.exp((f[:, None] + g[None, :] - cost) / reg)
                if np.abs(plan.sum(1) - a).sum() < tol:
                    break
            if it >= max_iter:
                break
        if it >= max_iter:
            break
    plan = np.exp((f[:, None] + g[None, :] - cost) / reg)
    err = float(np.abs(plan.sum(1) - a).sum() + np.abs(plan.sum(0) - b).sum())
    if err >= tol:
        warnings.warn(f"Sinkhorn did not converge after {it} iterations; marginal error {err:.3e}",
                      SinkhornConvergenceWarning, stacklevel=2)
    return TransportResult(plan, cost, reg, it, err)


def ot_plan(source, target, reg_scale=0.01, tol=1e-6, max_iter=10000) -> TransportResult:
    """Plan from target points (rows) to source points (columns), uniform weights."""
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if len(source) < 1 or len(target) < 1:
        raise InvalidInputError("source and target need at least one point each")
    if source.shape[1] != target.shape[1]:
        raise InvalidInputError("source and target dimensions differ")
    cost = sq_euclidean(target, source)
    med = float(np.median(cost))
    if med == 0:
        med = float(cost.max()) if cost.max() > 0 else 1.0
    reg = reg_scale * med
    m, n = cost.shape
    return sinkhorn(np.full(m, 1.0 / m), np.full(n, 1.0 / n), cost, reg, tol, max_iter)


def ot_domain_adapt(source, target, reg_scale=0.01, tol=1e-6, max_iter=10000,
                    return_plan=False):
    """Map target samples onto the source distribution (labels unused).

    Each target point is replaced by the plan-weighted mean of the source
    points it is transported to.
    """
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if len(source) == 1:
        mapped = np.repeat(source, len(target), axis=0)
        if return_plan:
            plan = np.full((len(target), 1), 1.0 / len(target))
            return mapped, TransportResult(plan, sq_euclidean(target, source), 0.0, 0, 0.0)
        return mapped
    res = ot_plan(source, target, reg_scale, tol, max_iter)
    mapped = (res.plan @ source) / res.plan.sum(1, keepdims=True)
    return (mapped, res) if return_plan else mapped
