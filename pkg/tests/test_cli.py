import json
from fractions import Fraction

import numpy as np
import pytest

from bmfal.cli import main
from bmfal.simulators import make_oracle


@pytest.fixture
def small_cfg(tmp_path):
    cfg = dict(initial_epochs=30, batch_epochs=5, inner_epochs=2, restarts=1, max_iters=3,
               mc_samples=3, test_size=6, budget="5", num_batches=1, hidden_width=8, latent_dim=3)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_solve_writes_field_with_mesh(tmp_path, capsys):
    main(["solve", "--problem", "poisson", "--fidelity", "2", "--input", "0.3,0.6"])
    doc = json.loads(capsys.readouterr().out)
    assert doc["mesh"]["n"] == 33 and len(doc["field"]) == 33 * 33
    want, _ = make_oracle("poisson").query(np.array([0.3, 0.6]), 2)
    np.testing.assert_array_equal(doc["field"], want)
    out = tmp_path / "f.json"
    main(["solve", "--problem", "heat", "--fidelity", "1", "--input", "0.5,0.5", "--out", str(out)])
    assert json.loads(out.read_text())["cost"] == "1"


def test_gen_plan_eval_run(tmp_path, small_cfg, capsys):
    ds = tmp_path / "d.jsonl"
    main(["gen-initial", "--config", str(small_cfg), "--counts", "6,2", "--out", str(ds)])
    assert len(ds.read_text().splitlines()) == 8
    plan = tmp_path / "plan.json"
    ckpt = tmp_path / "m.npz"
    main(["plan", "--config", str(small_cfg), "--dataset", str(ds), "--out", str(plan),
          "--save-model", str(ckpt)])
    doc = json.loads(plan.read_text())
    assert 0 < Fraction(doc["total_cost"]) <= 5
    capsys.readouterr()
    main(["eval", "--config", str(small_cfg), "--model", str(ckpt)])
    assert json.loads(capsys.readouterr().out)["nrmse"] > 0
    out = tmp_path / "run"
    main(["run", "--config", str(small_cfg), "--strategy", "BATCH_FR_BC", "--batches", "1",
          "--seed", "3", "--out", str(out)])
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("BATCH_FR_BC,3,0,")


def test_run_flags_override_config(tmp_path, small_cfg, capsys):
    main(["run", "--config", str(small_cfg), "--strategy", "BATCH_FR_BC", "--budget", "3",
          "--batches", "0", "--problem", "synthetic"])
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and out[1].startswith("BATCH_FR_BC,0,0,0,")
