"""Small models and datasets shared by the unit and acceptance tests."""
import numpy as np

from bmfal.model import Dataset, ModelConfig, TrainConfig, init_model, train


def tiny_config(covariance="full", activation="tanh"):
    return ModelConfig(num_fidelities=2, input_dim=2, latent_dims=[2, 2], output_dims=[3, 3],
                       hidden_width=4, hidden_layers=1, activation=activation,
                       covariance=covariance)


def toy_dataset(config, n_per_fid=(6, 4), seed=0):
    """Smooth nonlinear targets at each fidelity."""
    rng = np.random.default_rng(seed)
    ds = Dataset()
    for m, n in enumerate(n_per_fid, start=1):
        d = config.output_dims[m - 1]
        for _ in range(n):
            x = rng.uniform(0, 1, config.input_dim)
            y = np.sin(np.arange(1, d + 1) * (x.sum() + 0.3 * m)) + 0.1 * m * x[0]
            ds.add(x, m, y, m)
    return ds


def tiny_model(seed=0, covariance="full", spread=0.3):
    """Untrained tiny model with a genuinely full posterior Cholesky factor."""
    cfg = tiny_config(covariance)
    ds = toy_dataset(cfg, seed=seed)
    model = init_model(cfg, seed=seed, dataset=ds)
    rng = np.random.default_rng(seed + 1)
    for p in model.params:
        p["chol_diag_raw"] = rng.normal(np.log(np.expm1(spread)), 0.2, p["chol_diag_raw"].shape)
        if "chol_off" in p:
            p["chol_off"] = 0.1 * rng.standard_normal(p["chol_off"].shape)
    return model, ds


def trained_toy(seed=0, epochs=400):
    cfg = ModelConfig(num_fidelities=2, input_dim=2, latent_dims=[3, 3], output_dims=[12, 20],
                      hidden_width=8, hidden_layers=2)
    rng = np.random.default_rng(seed)
    ds = Dataset()
    grid1, grid2 = np.linspace(0, 1, 12), np.linspace(0, 1, 20)
    for m, n, grid in [(1, 12, grid1), (2, 4, grid2)]:
        for _ in range(n):
            x = rng.uniform(0, 1, 2)
            y = np.exp(-(grid - x[0]) ** 2 / 0.1) * (1 + 0.5 * x[1]) + 0.05 * (2 - m) * grid
            ds.add(x, m, y, m)
    model = init_model(cfg, seed=seed, dataset=ds)
    model = train(model, ds, TrainConfig(learning_rate=5e-3, epochs=epochs, seed=seed))
    return model, ds


# verdict lines of the acceptance criteria, printed by conftest.py
ACCEPTANCE = {}
