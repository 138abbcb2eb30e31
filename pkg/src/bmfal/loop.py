"""Active-learning harness: initial data, per-batch acquisition, retraining, nRMSE."""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .acquisition import BatchObjective, CostModel, McInputSet, dmfal_mi
from .gaussian import ContractError
from .model import Dataset, ModelConfig, MfModel, TrainConfig, init_model, predict_mean, train
from .optimize import OptimizerConfig, OptimizerFailure, maximize
from .planner import Plan, PlanStep, plan_batch
from .simulators import SimulatorOracle, make_oracle

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    BMFAL_BC = "BMFAL_BC"
    DMFAL_BC = "DMFAL_BC"
    MFAL_BC = "MFAL_BC"
    DMFAL_BC_RF = "DMFAL_BC_RF"
    MFAL_BC_RF = "MFAL_BC_RF"
    BATCH_FR_BC = "BATCH_FR_BC"

    @property
    def sequential(self) -> bool:
        return self not in (Strategy.BMFAL_BC, Strategy.BATCH_FR_BC)


@dataclass
class ExperimentConfig:
    problem: str = "synthetic"
    num_fidelities: int = 2
    lambdas: list = field(default_factory=lambda: [1, 3])
    budget: str = "20"
    num_batches: int = 10
    initial_counts: list = field(default_factory=lambda: [10, 2])
    mc_samples: int = 20
    strategy: str = "BMFAL_BC"
    seed: int = 0
    # surrogate
    latent_dim: int = 5
    hidden_width: int = 32
    hidden_layers: int = 2
    covariance: str = "full"
    learning_rate: float = 3e-3
    initial_epochs: int = 1500
    batch_epochs: int = 300
    inner_epochs: int = 100
    elbo_mc_samples: int = 1
    prior_var: float = 1.0
    # input optimization
    restarts: int = 5
    max_iters: int = 30
    # evaluation
    test_size: int = 128
    test_seed: int = 12345
    record_timing: bool = False
    workers: int = 1

    def __post_init__(self):
        Strategy(self.strategy)
        if self.num_batches < 0:
            raise ContractError("num_batches must be nonnegative")
        if len(self.lambdas) != self.num_fidelities or len(self.initial_counts) != self.num_fidelities:
            raise ContractError("lambdas and initial_counts need one entry per fidelity")

    @property
    def cost_model(self) -> CostModel:
        return CostModel(self.lambdas, Fraction(str(self.budget)))

    @property
    def feasible(self) -> bool:
        return Fraction(str(self.budget)) >= Fraction(self.lambdas[0])

    def train_config(self, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, epochs, self.elbo_mc_samples, self.prior_var, seed)

    def optimizer_config(self, seed: int) -> OptimizerConfig:
        return OptimizerConfig(restarts=self.restarts, max_iters=self.max_iters, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "budget" in d:
            d["budget"] = str(d["budget"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunRecord:
    batch_index: int
    accumulated_cost: Fraction
    nrmse: float
    counts: list
    wall_seconds: float
    strategy: str
    seed: int


@dataclass
class LoopState:
    model: MfModel
    dataset: Dataset
    accumulated_cost: Fraction = Fraction(0)
    batch_index: int = 0


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def init_dataset(oracle: SimulatorOracle, counts, seed: int) -> Dataset:
    """Uniform random inputs per fidelity, queried from the oracle."""
    if len(counts) != oracle.num_fidelities or min(counts, default=0) < 0:
        raise ContractError("one nonnegative count per fidelity is required")
    rng = _rng(seed, 1)
    ds = Dataset()
    for m, c in enumerate(counts, start=1):
        for x in oracle.domain.sample(rng, int(c)):
            y, cost = oracle.query(x, m)
            ds.add(x, m, y, cost)
    return ds


def nrmse(predictions, truths) -> float:
    """RMSE over all outputs divided by the RMS of the truths."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = np.sqrt(np.mean(t * t))
    if denom == 0:
        raise ContractError("truths are all zero; nRMSE is undefined")
    return float(np.sqrt(np.mean((p - t) ** 2)) / denom)


class Evaluator:
    def __init__(self, oracle: SimulatorOracle, size: int, seed: int):
        self.oracle = oracle
        self.inputs = oracle.domain.sample(np.random.default_rng(seed), size)
        self.truths = np.stack([oracle.ground_truth(x) for x in self.inputs])

    def __call__(self, model: MfModel) -> float:
        M = self.oracle.num_fidelities
        preds = predict_mean(model, self.inputs, M)
        preds = np.stack([self.oracle.to_eval_mesh(p, M) for p in preds])
        return nrmse(preds, self.truths)


def model_config_for(oracle: SimulatorOracle, cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(oracle.num_fidelities, oracle.input_dim,
                       [cfg.latent_dim] * oracle.num_fidelities, oracle.ladder.output_dims,
                       cfg.hidden_width, cfg.hidden_layers, "tanh", cfg.covariance)


def _query_all(oracle: SimulatorOracle, queries, workers: int) -> list:
    # the plan is fixed before dispatch, so fan-out order cannot change results
    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda q: oracle.query(q[0], q[1]), queries))
    return [oracle.query(x, m) for x, m in queries]


def _best_over_fidelities(score_fn, fids, oracle, cfg, seed):
    best = None
    for m in fids:
        try:
            x, v = maximize(lambda xs, m=m: score_fn(xs, m), oracle.domain,
                            cfg.optimizer_config(seed + 104729 * m), vectorized=True)
        except OptimizerFailure as exc:
            log.warning("input optimization failed at fidelity %d: %s", m, exc)
            continue
        if best is None or v > best[2]:
            best = (x, m, v)
    return best


def _sequential_batch(state: LoopState, strategy: Strategy, oracle, cfg, rng_seed):
    """One-at-a-time acquisition with retraining after every query."""
    cm = cfg.cost_model
    rng = _rng(rng_seed, 2)
    mc = McInputSet.draw(oracle.domain, cfg.mc_samples, int(rng.integers(2**31)))
    spent = Fraction(0)
    queries = []
    model, ds = state.model, state.dataset
    for step in range(int(cm.budget // cm.lambdas[0]) + 1):
        fids = cm.affordable(spent)
        if not fids:
            break
        if strategy in (Strategy.DMFAL_BC_RF, Strategy.MFAL_BC_RF):
            fids = [fids[int(rng.integers(len(fids)))]]
        weighted = strategy in (Strategy.DMFAL_BC, Strategy.MFAL_BC)
        if strategy in (Strategy.DMFAL_BC, Strategy.DMFAL_BC_RF):
            def score(xs, m):
                s = dmfal_mi(model, xs, m)
                return s / float(cm.cost(m)) if weighted else s
        else:
            objective = BatchObjective(model, mc)
            cache = objective.empty_cache()

            def score(xs, m):
                s = objective.gains(cache, xs, m)
                return s / float(cm.cost(m)) if weighted else s
        best = _best_over_fidelities(score, fids, oracle, cfg, rng_seed * 1000 + step)
        if best is None:
            break
        x, m, _ = best
        y, cost = oracle.query(x, m)
        ds.add(x, m, y, cost)
        spent += cost
        queries.append((x, m))
        model = train(model, ds, cfg.train_config(cfg.inner_epochs, rng_seed * 1000 + step))
    return model, queries, spent


def _random_batch(oracle, cm: CostModel, rng):
    spent = Fraction(0)
    queries = []
    while True:
        fids = cm.affordable(spent)
        if not fids:
            return queries
        m = fids[int(rng.integers(len(fids)))]
        queries.append((oracle.domain.sample(rng, 1)[0], m))
        spent += cm.cost(m)


def run_step(state: LoopState, strategy, cfg: ExperimentConfig, oracle: SimulatorOracle,
             evaluator: Evaluator | None = None):
    """Acquire one batch with ``strategy``, retrain, and report a RunRecord."""
    strategy = Strategy(strategy)
    t0 = time.perf_counter()
    cm = cfg.cost_model
    step_seed = int(_rng(cfg.seed, 3, state.batch_index).integers(2**31))
    new = LoopState(state.model, state.dataset.copy(), state.accumulated_cost, state.batch_index + 1)
    queries = []
    if cfg.feasible:
        if strategy.sequential:
            new.model, queries, _ = _sequential_batch(new, strategy, oracle, cfg, step_seed)
        else:
            if strategy is Strategy.BMFAL_BC:
                mc = McInputSet.draw(oracle.domain, cfg.mc_samples, step_seed)
                plan = plan_batch(new.model, cm, cfg.optimizer_config(step_seed), mc,
                                  oracle.domain, "standard")
                queries = plan.queries
            else:
                queries = _random_batch(oracle, cm, _rng(step_seed, 4))
            for (x, m), (y, cost) in zip(queries, _query_all(oracle, queries, cfg.workers)):
                new.dataset.add(x, m, y, cost)
            if queries:
                new.model = train(new.model, new.dataset,
                                  cfg.train_config(cfg.batch_epochs, step_seed))
    batch_cost = sum((cm.cost(m) for _, m in queries), Fraction(0))
    if batch_cost > cm.budget:
        raise AssertionError(f"batch cost {batch_cost} exceeds budget {cm.budget}")
    new.accumulated_cost = state.accumulated_cost + batch_cost
    err = evaluator(new.model) if evaluator is not None else float("nan")
    counts = [sum(1 for _, m in queries if m == f) for f in range(1, oracle.num_fidelities + 1)]
    record = RunRecord(new.batch_index, new.accumulated_cost, err, counts,
                       time.perf_counter() - t0, strategy.value, cfg.seed)
    return new, record


def initial_state(cfg: ExperimentConfig, oracle: SimulatorOracle) -> LoopState:
    ds = init_dataset(oracle, cfg.initial_counts, cfg.seed)
    model = init_model(model_config_for(oracle, cfg), seed=cfg.seed, dataset=ds)
    model = train(model, ds, cfg.train_config(cfg.initial_epochs, cfg.seed))
    return LoopState(model, ds)


CSV_BASE = ["strategy", "seed", "batch_index", "accumulated_cost", "nrmse", "wall_seconds"]


def records_to_csv(records, num_fidelities: int, record_timing: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_BASE + [f"n_fid_{m}" for m in range(1, num_fidelities + 1)])
    for r in records:
        w.writerow([r.strategy, r.seed, r.batch_index, str(r.accumulated_cost), repr(r.nrmse),
                    f"{r.wall_seconds:.3f}" if record_timing else ""] + list(r.counts))
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, oracle: SimulatorOracle | None = None):
    """Run ``num_batches`` rounds; returns the records (index 0 is pre-acquisition).

    With ``out_dir`` set, writes ``results.csv``, ``records.jsonl``,
    ``dataset.jsonl`` and ``config.json`` there.
    """
    oracle = oracle or make_oracle(cfg.problem, cfg.num_fidelities)
    if [Fraction(l) for l in cfg.lambdas] != oracle.ladder.lambdas:
        oracle.ladder.lambdas = [Fraction(l) for l in cfg.lambdas]
    evaluator = Evaluator(oracle, cfg.test_size, cfg.test_seed)
    t0 = time.perf_counter()
    state = initial_state(cfg, oracle)
    records = [RunRecord(0, Fraction(0), evaluator(state.model), [0] * oracle.num_fidelities,
                         time.perf_counter() - t0, cfg.strategy, cfg.seed)]
    for _ in range(cfg.num_batches):
        state, rec = run_step(state, cfg.strategy, cfg, oracle, evaluator)
        records.append(rec)
        log.info("%s seed=%d batch=%d cost=%s nrmse=%.4f", rec.strategy, rec.seed,
                 rec.batch_index, rec.accumulated_cost, rec.nrmse)
    if out_dir is not None:
        write_outputs(Path(out_dir), cfg, records, state, oracle.num_fidelities)
    return records


def write_outputs(out: Path, cfg, records, state: LoopState, num_fidelities: int):
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(records_to_csv(records, num_fidelities, cfg.record_timing))
        with open(out / "records.jsonl", "w") as fh:
            for r in records:
                row = asdict(r)
                row["accumulated_cost"] = str(r.accumulated_cost)
                fh.write(json.dumps(row) + "\n")
        state.dataset.to_jsonl(out / "dataset.jsonl")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing results under {out}: {exc}") from exc
