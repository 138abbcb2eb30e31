"""Mutual-information acquisition functions.

Two evaluation routes exist. The direct route (``output_mi`` from
:mod:`bmfal.delta`) builds the joint latent belief of a batch plus target and
takes three projected log-determinants. The incremental route used by the
planner keeps the whitened weight-space posterior covariance
``Lam_S = (I + F_S^T F_S)^{-1}`` of the selected set, where ``F_q = R_q J_q L``;
then ``I(Y_S; y_t) = 0.5 [logdet(I + F_t F_t^T) - logdet(I + F_t Lam_S F_t^T)]``
and adding a query is a rank-k downdate of ``Lam_S``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .delta import block_chol, output_mi, whitened_factors
from .gaussian import ContractError, clamp_mi, whitening_factor
from .model import MfModel
from .optimize import DomainBox


class BudgetViolation(ValueError):
    pass


@dataclass
class McInputSet:
    inputs: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if len(self.inputs) < 1:
            raise ContractError("at least one Monte-Carlo input is required")

    @classmethod
    def draw(cls, domain: DomainBox, n: int, seed: int) -> "McInputSet":
        return cls(domain.sample(np.random.default_rng(seed), n), seed)

    def __len__(self):
        return len(self.inputs)


@dataclass
class CostModel:
    lambdas: list
    budget: Fraction

    def __post_init__(self):
        self.lambdas = [Fraction(l) for l in self.lambdas]
        self.budget = Fraction(self.budget)
        if any(b < a for a, b in zip(self.lambdas, self.lambdas[1:])) or self.lambdas[0] <= 0:
            raise ContractError("costs must be positive and nondecreasing")
        if self.budget <= 0:
            raise ContractError("budget must be positive")

    @property
    def num_fidelities(self) -> int:
        return len(self.lambdas)

    def cost(self, fidelity: int) -> Fraction:
        return self.lambdas[fidelity - 1]

    def affordable(self, spent) -> list[int]:
        left = self.budget - Fraction(spent)
        return [m for m, l in enumerate(self.lambdas, start=1) if l <= left]


# ---------------------------------------------------------------- direct route


def acq_dmfal(model: MfModel, fidelity: int, x, cost_model: CostModel) -> float:
    """``I(y_m(x), y_M(x)) / lambda_m``."""
    mi = output_mi(model, [(x, fidelity)], (x, model.M))
    return mi / float(cost_model.cost(fidelity))


def acq_single_new(model: MfModel, fidelity: int, x, mc_inputs: McInputSet) -> float:
    """Mean over the MC inputs of ``I(y_m(x), y_M(x'_l))`` (unweighted)."""
    return float(np.mean([output_mi(model, [(x, fidelity)], (xp, model.M))
                          for xp in mc_inputs.inputs]))


def acq_batch(model: MfModel, batch: Sequence, mc_inputs: McInputSet) -> float:
    """Mean over the MC inputs of ``I({y_{m_j}(x_j)}, y_M(x'_l))``."""
    if len(batch) == 0:
        raise ContractError("batch must be nonempty")
    return float(np.mean([output_mi(model, list(batch), (xp, model.M))
                          for xp in mc_inputs.inputs]))


# ---------------------------------------------------------------- incremental route


def _logdet_spd(mats: np.ndarray) -> np.ndarray:
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    sign, ld = np.linalg.slogdet(mats)
    return ld


class BatchObjective:
    """Per-round cache for the Monte-Carlo batch objective.

    Holds the fixed MC targets of one planning round and evaluates marginal
    gains of candidate queries for many inputs at once.
    """

    def __init__(self, model: MfModel, mc_inputs: McInputSet, target_fidelity: int | None = None):
        self.model = model
        self.mc_inputs = mc_inputs
        self.target_fidelity = model.M if target_fidelity is None else target_fidelity
        self.chols = block_chol(model)
        self.rfacs = {m: whitening_factor(model.projection(m), model.noise_var(m))
                      for m in range(1, model.M + 1)}
        self.P = sum(c.shape[0] for c in self.chols)
        self.targets = self.factors(mc_inputs.inputs, self.target_fidelity)  # A x kt x P
        tt = self.targets @ np.swapaxes(self.targets, 1, 2)
        self.prior_ld = _logdet_spd(np.eye(tt.shape[-1]) + tt)

    def factors(self, xs, fidelity: int) -> np.ndarray:
        return whitened_factors(self.model, xs, fidelity, self.chols, self.rfacs[fidelity])

    def empty_cache(self) -> "_PosteriorCache":
        return _PosteriorCache(self, np.eye(self.P))

    def cache_for(self, queries: Sequence) -> "_PosteriorCache":
        cache = self.empty_cache()
        for x, m in queries:
            cache = cache.extend(self.factors(np.asarray(x)[None, :], m)[0])
        return cache

    def gains(self, cache: "_PosteriorCache", xs, fidelity: int) -> np.ndarray:
        """Unweighted mean MI increase for each row of ``xs`` at ``fidelity``."""
        fq = self.factors(xs, fidelity)  # N x k x P
        return cache.gains(fq)


class _PosteriorCache:
    def __init__(self, objective: BatchObjective, lam: np.ndarray):
        self.objective = objective
        self.lam = 0.5 * (lam + lam.T)
        ft = objective.targets
        a, kt, P = ft.shape
        self.b_flat = self.lam @ ft.reshape(a * kt, P).T  # Lam F_t^T as P x (A kt)
        self.b = self.b_flat.reshape(P, a, kt).transpose(1, 0, 2)
        s = np.eye(kt) + ft @ self.b
        self.s = 0.5 * (s + np.swapaxes(s, -1, -2))
        self.s_inv = np.linalg.inv(self.s)
        self.post_ld = _logdet_spd(self.s)

    def value(self) -> float:
        """Mean over targets of ``I(Y_S; y_t)``."""
        return clamp_mi(float(np.mean(0.5 * (self.objective.prior_ld - self.post_ld))))

    def per_target(self) -> np.ndarray:
        return 0.5 * (self.objective.prior_ld - self.post_ld)

    def gains(self, fq: np.ndarray) -> np.ndarray:
        n, k, P = fq.shape
        u = fq @ self.lam  # N x k x P
        c0 = np.eye(k) + u @ np.swapaxes(fq, 1, 2)  # N x k x k
        a, kt = self.s.shape[0], self.s.shape[1]
        v = (fq.reshape(n * k, P) @ self.b_flat).reshape(n, k, a, kt).transpose(0, 2, 1, 3)
        c1 = c0[:, None] - v @ self.s_inv[None] @ np.swapaxes(v, -1, -2)
        g = 0.5 * (_logdet_spd(c0)[:, None] - _logdet_spd(c1))
        return g.mean(axis=1)

    def extend(self, fq: np.ndarray) -> "_PosteriorCache":
        u = fq @ self.lam  # k x P
        c = np.eye(fq.shape[0]) + u @ fq.T
        lam = self.lam - u.T @ np.linalg.solve(c, u)
        return _PosteriorCache(self.objective, lam)


def acq_batch_incremental(model: MfModel, batch: Sequence, mc_inputs: McInputSet) -> float:
    """Same quantity as :func:`acq_batch`, via the weight-space posterior."""
    return BatchObjective(model, mc_inputs).cache_for(batch).value()


def acq_incremental_weighted(model: MfModel, state, candidate, mc_inputs: McInputSet,
                             cost_model: CostModel, objective: BatchObjective | None = None) -> float:
    """Weighted marginal gain of ``candidate = (x, m)`` given the plan ``state``.

    ``state`` needs ``selected`` [(x, m), ...] and ``accumulated_cost``.
    """
    x, m = candidate
    lam = cost_model.cost(m)
    if lam > cost_model.budget - Fraction(state.accumulated_cost):
        raise BudgetViolation(f"fidelity {m} (cost {lam}) does not fit the remaining budget")
    objective = objective or BatchObjective(model, mc_inputs)
    cache = getattr(state, "cache", None)
    if cache is None or cache.objective is not objective:
        cache = objective.cache_for(state.selected)
    gain = cache.gains(objective.factors(np.asarray(x, dtype=float)[None, :], m))[0]
    return float(gain) / float(lam)


def dmfal_mi(model: MfModel, xs, fidelity: int, objective: BatchObjective | None = None) -> np.ndarray:
    """Vectorized ``I(y_m(x), y_M(x))`` for each row of ``xs`` (unweighted)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if objective is not None:
        fm = objective.factors(xs, fidelity)
        ft = objective.factors(xs, model.M)
    else:
        fm = whitened_factors(model, xs, fidelity)
        ft = whitened_factors(model, xs, model.M)
    both = np.concatenate([fm, ft], axis=1)

    def ld(f):
        return _logdet_spd(np.eye(f.shape[1]) + f @ np.swapaxes(f, 1, 2))

    return np.maximum(0.5 * (ld(fm) + ld(ft) - ld(both)), 0.0)
