import json
import math
from fractions import Fraction

import numpy as np
import pytest
from _toys import trained_toy

from bmfal.acquisition import BatchObjective, CostModel, McInputSet
from bmfal.gaussian import ContractError
from bmfal.optimize import DomainBox, OptimizerConfig
from bmfal.planner import (Plan, brute_force_opt, gaussian_mi_oracle, max_iterations,
                           plan_batch, plan_batch_discrete, weighted_coverage_oracle)

BOX = DomainBox([0.0, 0.0], [1.0, 1.0])
E = 1 - 1 / math.e


def modular(gains):
    return lambda s: float(sum(gains[i] for i in s))


@pytest.fixture(scope="module")
def toy():
    model, _ = trained_toy()
    return model, McInputSet.draw(BOX, 5, seed=2)


def random_instance(rng):
    """Random submodular set function over a small (grid point, fidelity) ground set."""
    n_fid = int(rng.integers(1, 4))
    lambdas = sorted(int(v) for v in rng.integers(1, 5, n_fid))
    grid = int(rng.integers(2, 5))
    cands = [(g, m) for g in range(grid) for m in range(1, n_fid + 1)][:12]
    budget = int(rng.integers(max(lambdas), 13))
    if rng.uniform() < 0.5:
        universe = int(rng.integers(5, 15))
        covers = [set(rng.choice(universe, int(rng.integers(1, 5)), replace=False).tolist())
                  for _ in cands]
        oracle = weighted_coverage_oracle(covers, rng.uniform(0.1, 1.0, universe))
    else:
        pts = rng.uniform(0, 1, grid)
        kernel = np.exp(-(pts[:, None] - pts[None, :]) ** 2 / 0.1)
        noise = sorted(rng.uniform(0.05, 1.0, n_fid), reverse=True)
        oracle = gaussian_mi_oracle(kernel, cands, noise)
    return oracle, cands, CostModel(lambdas, budget)


def test_modular_example_opt_and_greedy():
    # a (gain 10, cost 10), b (6, 5), c (5, 5) sit on fidelities with matching costs
    cm = CostModel([5, 5, 10], 10)
    cands = [(0, 3), (1, 1), (2, 2)]  # a (cost 10), b (cost 5), c (cost 5)
    f = modular({0: 10.0, 1: 6.0, 2: 5.0})
    best, val = brute_force_opt(f, cands, cm)
    assert val == 11.0 and best == frozenset({1, 2})
    plan = plan_batch_discrete(f, cands, cm)
    assert [cands.index(q) for q in plan.queries] == [1, 2]
    assert plan.value == 11.0
    assert plan.steps[0].score == pytest.approx(1.2) and plan.steps[1].score == pytest.approx(1.0)


def test_empty_grid_and_single_candidate():
    cm = CostModel([1], 3)
    assert brute_force_opt(modular({}), [], cm) == (frozenset(), 0.0)
    plan = plan_batch_discrete(modular({0: 2.0}), [(0, 1)], cm)
    assert plan.queries == [(0, 1)] and not plan.infeasible


def test_ties_go_to_lower_fidelity_then_lower_index():
    cm = CostModel([1, 1], 1)
    cands = [(1, 2), (2, 1), (0, 1)]
    plan = plan_batch_discrete(modular({0: 1.0, 1: 1.0, 2: 1.0}), cands, cm)
    assert plan.queries == [(0, 1)]


def test_discrete_infeasible_budget():
    plan = plan_batch_discrete(modular({0: 1.0}), [(0, 1)], CostModel([2], 1))
    assert plan.infeasible and plan.queries == []


def test_brute_force_guard():
    cands = [(i, 1) for i in range(30)]
    with pytest.raises(ContractError):
        brute_force_opt(modular({i: 1.0 for i in range(30)}), cands, CostModel([1], 30), max_sets=1000)


def test_guarantees_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(30):
        f, cands, cm = random_instance(rng)
        B = cm.budget
        plan = plan_batch_discrete(f, cands, cm, "standard")
        assert plan.total_cost <= B
        for st in plan.steps:
            if not st.all_affordable:
                break
            assert st.value >= E * brute_force_opt(f, cands, cm, st.spent)[1] - 1e-9
        opt = brute_force_opt(f, cands, cm)[1]
        lam_max = float(cm.lambdas[-1])
        assert plan.value >= (1 - lam_max / float(B)) * E * opt - 1e-9
        over = plan_batch_discrete(f, cands, cm, "exceed_once")
        assert over.value >= E * opt - 1e-9
        spent = [st.spent for st in over.steps]
        assert all(s <= B for s in spent[:-1])


def test_budget_safety_rational_costs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        lambdas = sorted(Fraction(int(rng.integers(1, 20)), int(rng.integers(1, 7))) for _ in range(3))
        cm = CostModel(lambdas, Fraction(int(rng.integers(1, 40)), int(rng.integers(1, 5))))
        cands = [(g, m) for g in range(4) for m in (1, 2, 3)]
        f = weighted_coverage_oracle([{i % 7, (3 * i) % 7} for i in range(12)], np.ones(7))
        plan = plan_batch_discrete(f, cands, cm)
        assert plan.total_cost <= cm.budget
        assert plan.total_cost == sum(cm.cost(m) for _, m in plan.queries)
        assert len(plan.steps) <= max_iterations(cm)


def test_continuous_plan_budget_and_fidelity_limits(toy):
    model, mc = toy
    cfg = OptimizerConfig(restarts=2, max_iters=10)
    plan = plan_batch(model, CostModel([1, 3], 2), cfg, mc, BOX)
    assert [m for _, m in plan.queries] == [1, 1]
    empty = plan_batch(model, CostModel([2, 3], 1), cfg, mc, BOX)
    assert empty.infeasible and empty.queries == []
    plan = plan_batch(model, CostModel([1, 3], 7), cfg, mc, BOX)
    assert plan.total_cost <= 7
    assert all(BOX.contains(x) for x, _ in plan.queries)
    assert np.all(np.diff([s.value for s in plan.steps]) >= -1e-9)
    assert len(plan.steps) <= max_iterations(CostModel([1, 3], 7))


def test_continuous_exceed_once(toy):
    model, mc = toy
    cm = CostModel([1, 3], Fraction(7, 2))
    plan = plan_batch(model, cm, OptimizerConfig(restarts=2, max_iters=10), mc, BOX, "exceed_once")
    spent = [s.spent for s in plan.steps]
    assert all(s <= cm.budget for s in spent[:-1])
    assert spent[-1] <= cm.budget + cm.lambdas[-1]


def test_continuous_plan_step_value_matches_objective(toy):
    model, mc = toy
    plan = plan_batch(model, CostModel([1, 3], 4), OptimizerConfig(restarts=2, max_iters=10), mc, BOX)
    obj = BatchObjective(model, mc)
    assert plan.value == pytest.approx(obj.cache_for(plan.queries).value(), rel=1e-9)


def test_plan_json_roundtrip(tmp_path, toy):
    model, mc = toy
    plan = plan_batch(model, CostModel([1, 3], 5), OptimizerConfig(restarts=2, max_iters=5), mc, BOX)
    path = tmp_path / "plan.json"
    plan.to_json(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"mode", "infeasible", "total_cost", "queries"}
    assert set(doc["queries"][0]) == {"x", "fidelity", "cost", "score"}
    back = Plan.from_dict(doc)
    assert back.total_cost == plan.total_cost
    assert [m for _, m in back.queries] == [m for _, m in plan.queries]
    assert sum(Fraction(q["cost"]) for q in doc["queries"]) == Fraction(doc["total_cost"])


def test_bad_mode_rejected(toy):
    model, mc = toy
    with pytest.raises(ContractError):
        plan_batch(model, CostModel([1, 3], 5), OptimizerConfig(), mc, BOX, mode="greedy")
