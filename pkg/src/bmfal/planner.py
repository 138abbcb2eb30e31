"""Cost-weighted greedy batch planning under a budget.

Each step adds the (input, fidelity) pair with the largest marginal gain per
unit cost among fidelities that still fit the budget. In ``exceed_once``
mode the best pair over *all* fidelities is taken; if it overshoots the
budget it is still added and planning stops.

Costs are kept as :class:`fractions.Fraction` so feasibility never depends on
float rounding.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .acquisition import BatchObjective, CostModel, McInputSet
from .gaussian import ContractError
from .model import MfModel
from .optimize import DomainBox, OptimizerConfig, OptimizerFailure, maximize

log = logging.getLogger(__name__)

MODES = ("standard", "exceed_once")


@dataclass
class PlanState:
    selected: list = field(default_factory=list)
    accumulated_cost: Fraction = Fraction(0)
    cache: object = None

    @property
    def fidelities(self) -> list[int]:
        return [m for _, m in self.selected]


@dataclass
class PlanStep:
    fidelity: int
    score: float
    value: float  # objective after this step
    spent: Fraction
    all_affordable: bool  # every fidelity fit the budget when this pick was made
    restarts: int = 0
    index: int | None = None  # grid index for discrete plans


@dataclass
class Plan:
    queries: list
    total_cost: Fraction
    steps: list = field(default_factory=list)
    infeasible: bool = False
    mode: str = "standard"

    @property
    def value(self) -> float:
        return self.steps[-1].value if self.steps else 0.0

    def counts(self, num_fidelities: int) -> list[int]:
        return [sum(1 for _, m in self.queries if m == f) for f in range(1, num_fidelities + 1)]

    def to_dict(self) -> dict:
        rows, prev = [], Fraction(0)
        for (x, m), st in zip(self.queries, self.steps):
            x = int(x) if np.isscalar(x) else np.asarray(x, dtype=float).reshape(-1).tolist()
            rows.append({"x": x, "fidelity": int(m), "cost": str(st.spent - prev),
                         "score": float(st.score)})
            prev = st.spent
        return {"mode": self.mode, "infeasible": self.infeasible,
                "total_cost": str(self.total_cost), "queries": rows}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "Plan":
        queries, steps, spent = [], [], Fraction(0)
        for row in d["queries"]:
            spent += Fraction(row["cost"])
            queries.append((np.asarray(row["x"], dtype=float), int(row["fidelity"])))
            steps.append(PlanStep(int(row["fidelity"]), float(row["score"]), float("nan"), spent, False))
        return cls(queries, Fraction(d["total_cost"]), steps, bool(d["infeasible"]), d["mode"])


def _check_mode(mode):
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")


def max_iterations(cost_model: CostModel) -> int:
    return int(cost_model.budget // cost_model.lambdas[0]) + 1


# ---------------------------------------------------------------- continuous planner


def plan_batch(model: MfModel, cost_model: CostModel, optimizer_config: OptimizerConfig,
               mc_inputs: McInputSet, domain: DomainBox, mode: str = "standard",
               objective: BatchObjective | None = None) -> Plan:
    """Greedy batch of (x, fidelity) queries maximizing the MC batch objective."""
    _check_mode(mode)
    if cost_model.num_fidelities != model.M:
        raise ContractError("cost model and surrogate disagree on the number of fidelities")
    objective = objective or BatchObjective(model, mc_inputs)
    state = PlanState(cache=objective.empty_cache())
    steps = []
    B = cost_model.budget
    all_fids = list(range(1, model.M + 1))
    for step in range(max_iterations(cost_model)):
        if state.accumulated_cost > B:
            break
        affordable = cost_model.affordable(state.accumulated_cost)
        fids = all_fids if mode == "exceed_once" else affordable
        if not fids:
            break
        best = None
        for m in fids:
            lam = float(cost_model.cost(m))
            cache = state.cache

            def score(xs, m=m, lam=lam, cache=cache):
                return objective.gains(cache, xs, m) / lam

            cfg = replace(optimizer_config, seed=optimizer_config.seed + 7919 * step + 104729 * m)
            try:
                x, val = maximize(score, domain, cfg, vectorized=True)
            except OptimizerFailure as exc:
                log.warning("input optimization failed at fidelity %d: %s", m, exc)
                continue
            if best is None or val > best[2]:
                best = (x, m, val, cfg.restarts)
        if best is None:
            break
        x, m, val, restarts = best
        fq = objective.factors(x[None, :], m)[0]
        state = PlanState(state.selected + [(x, m)], state.accumulated_cost + cost_model.cost(m),
                          state.cache.extend(fq))
        steps.append(PlanStep(m, val, state.cache.value(), state.accumulated_cost,
                              len(affordable) == len(all_fids), restarts))
        if state.accumulated_cost > B:
            break
    return Plan(state.selected, state.accumulated_cost, steps, infeasible=not steps, mode=mode)


# ---------------------------------------------------------------- discrete planner and oracle


def plan_batch_discrete(gain_oracle: Callable[[frozenset], float], candidates: Sequence,
                        cost_model: CostModel, mode: str = "standard") -> Plan:
    """Weighted greedy over a finite ground set of candidates.

    ``candidates[i] = (grid_index, fidelity)``; ``gain_oracle`` maps a frozenset
    of candidate positions to the objective value. Each candidate is used at
    most once. Ties in the score go to the lower fidelity, then the lower
    grid index.
    """
    _check_mode(mode)
    B = cost_model.budget
    chosen: list[int] = []
    spent = Fraction(0)
    current = gain_oracle(frozenset())
    steps = []
    n_fid = cost_model.num_fidelities
    for _ in range(max_iterations(cost_model)):
        if spent > B:
            break
        affordable = set(cost_model.affordable(spent))
        pool = [i for i in range(len(candidates)) if i not in chosen
                and (mode == "exceed_once" or candidates[i][1] in affordable)]
        if not pool:
            break
        best = None
        for i in pool:
            g, m = candidates[i]
            lam = cost_model.cost(m)
            ratio = (gain_oracle(frozenset(chosen + [i])) - current) / float(lam)
            key = (ratio, -m, -g)
            if best is None or key > best[0]:
                best = (key, i)
        i = best[1]
        g, m = candidates[i]
        chosen.append(i)
        spent += cost_model.cost(m)
        current = gain_oracle(frozenset(chosen))
        steps.append(PlanStep(m, best[0][0], current, spent, len(affordable) == n_fid, index=i))
        if spent > B:
            break
    return Plan([candidates[i] for i in chosen], spent, steps, infeasible=not steps, mode=mode)


def brute_force_opt(gain_oracle: Callable[[frozenset], float], candidates: Sequence,
                    cost_model: CostModel, budget=None, max_sets: int = 10**6):
    """Exact best subset of candidates with total cost within ``budget``."""
    budget = cost_model.budget if budget is None else Fraction(budget)
    costs = [cost_model.cost(m) for _, m in candidates]
    n = len(candidates)
    best_set, best_val = frozenset(), gain_oracle(frozenset())
    count = 0
    stack = [(0, (), Fraction(0))]
    while stack:
        start, members, spent = stack.pop()
        for i in range(start, n):
            c = spent + costs[i]
            if c > budget:
                continue
            count += 1
            if count > max_sets:
                raise ContractError(f"more than {max_sets} feasible sets; shrink the grid")
            s = members + (i,)
            v = gain_oracle(frozenset(s))
            if v > best_val:
                best_set, best_val = frozenset(s), v
            stack.append((i + 1, s, c))
    return best_set, best_val


# ---------------------------------------------------------------- synthetic submodular instances


def weighted_coverage_oracle(cover_sets: Sequence, weights) -> Callable[[frozenset], float]:
    """Total weight of universe items covered by the chosen candidates."""
    weights = np.asarray(weights, dtype=float)
    masks = [np.isin(np.arange(len(weights)), list(c)) for c in cover_sets]

    def f(s: frozenset) -> float:
        if not s:
            return 0.0
        covered = np.zeros(len(weights), dtype=bool)
        for i in s:
            covered |= masks[i]
        return float(weights[covered].sum())
    return f


def gaussian_mi_oracle(kernel: np.ndarray, candidates: Sequence,
                       noise_by_fidelity: Sequence) -> Callable[[frozenset], float]:
    """Information gain ``I(y_S; f)`` for noisy reads ``y = f_g + noise_m`` of a GP on a grid."""
    kernel = np.asarray(kernel, dtype=float)
    grid = np.array([g for g, _ in candidates])
    sd = np.sqrt(np.array([noise_by_fidelity[m - 1] for _, m in candidates]))
    memo = {}

    def f(s: frozenset) -> float:
        if not s:
            return 0.0
        if s in memo:
            return memo[s]
        idx = sorted(s)
        k = kernel[np.ix_(grid[idx], grid[idx])] / np.outer(sd[idx], sd[idx])
        val = 0.5 * float(np.linalg.slogdet(np.eye(len(idx)) + k)[1])
        memo[s] = val
        return val
    return f
