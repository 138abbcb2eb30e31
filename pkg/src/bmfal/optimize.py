"""Multi-start box-constrained quasi-Newton maximization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .gaussian import ContractError, NumericalError


class OptimizerFailure(NumericalError):
    pass


@dataclass
class DomainBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.lower.shape != self.upper.shape or not np.all(self.lower < self.upper):
            raise ContractError("domain box needs lower < upper componentwise")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.uniform(size=(n, self.dim))


@dataclass
class OptimizerConfig:
    restarts: int = 10
    max_iters: int = 50
    grad_step: float = 1e-5
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if min(self.restarts, self.max_iters) < 1 or not (self.grad_step > 0 and self.tol > 0):
            raise ContractError("optimizer settings must be positive")


def start_points(domain: DomainBox, config: OptimizerConfig) -> np.ndarray:
    """Box center first, then uniform draws; a prefix of a longer run's starts."""
    rng = np.random.default_rng(config.seed)
    rest = domain.sample(rng, config.restarts - 1)
    return np.vstack([domain.center[None, :], rest])


def maximize(objective, domain: DomainBox, config: OptimizerConfig | None = None,
             vectorized: bool = False):
    """Maximize ``objective`` over ``domain``; returns ``(x_best, value_best)``.

    ``objective`` maps an r-vector to a float, or (``vectorized=True``) an
    (n, r) array to n values. Gradients are central differences with the
    stencil kept inside the box (one-sided at active bounds).
    """
    config = config or OptimizerConfig()
    lo, hi = domain.lower, domain.upper
    probes = [0, 0]  # total, non-finite

    def batch(xs):
        xs = np.atleast_2d(xs)
        vals = (np.asarray(objective(xs), dtype=float).reshape(-1) if vectorized
                else np.array([float(objective(x)) for x in xs]))
        probes[0] += len(vals)
        bad = ~np.isfinite(vals)
        probes[1] += int(bad.sum())
        return np.where(bad, -np.inf, vals)

    def value_and_grad(x):
        h = config.grad_step * np.maximum(1.0, np.abs(x))
        up = np.minimum(x + h, hi)
        dn = np.maximum(x - h, lo)
        pts = [x]
        for i in range(len(x)):
            a = x.copy()
            a[i] = up[i]
            b = x.copy()
            b[i] = dn[i]
            pts += [a, b]
        vals = batch(np.array(pts))
        f0 = vals[0]
        if not np.isfinite(f0):
            return 1e300, np.zeros_like(x)
        g = np.zeros_like(x)
        for i in range(len(x)):
            fa, fb = vals[1 + 2 * i], vals[2 + 2 * i]
            denom = up[i] - dn[i]
            if denom > 0 and np.isfinite(fa) and np.isfinite(fb):
                g[i] = (fa - fb) / denom
        return -f0, -g

    starts = start_points(domain, config)
    start_vals = batch(starts)
    best_i = int(np.argmax(start_vals))
    best_x, best_v = starts[best_i].copy(), start_vals[best_i]
    for x0, v0 in zip(starts, start_vals):
        if not np.isfinite(v0):
            continue
        res = minimize(value_and_grad, x0, jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)),
                       options={"maxiter": config.max_iters, "ftol": config.tol * 1e-3,
                                "gtol": config.tol})
        x = domain.clip(res.x)
        v = batch(x[None, :])[0]
        if v > best_v:
            best_x, best_v = x, v
    if probes[1] * 2 > probes[0] or not np.isfinite(best_v):
        raise OptimizerFailure(
            f"objective non-finite at {probes[1]} of {probes[0]} probes")
    return best_x, float(best_v)
