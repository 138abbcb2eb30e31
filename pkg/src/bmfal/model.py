"""Deep multi-fidelity surrogate with a Gaussian posterior on last-layer weights.

Fidelity ``m`` (1-based in every public signature) feeds ``[x; h_{m-1}(x)]``
through a small tanh network ``phi_m``, multiplies by a random weight matrix
``W_m`` (k_m x width) to get the latent ``h_m``, and projects with ``A_m`` to
the d_m-dimensional output. Only ``W_m`` is random; its posterior is
``N(mu_m, L_m L_m^T)`` over the row-major flattening of ``W_m``. Everything
else is point-estimated by maximizing the ELBO.
"""
from __future__ import annotations

import copy
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gaussian import ContractError, NumericalError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ModelConfig:
    num_fidelities: int
    input_dim: int
    latent_dims: list
    output_dims: list
    hidden_width: int = 32
    hidden_layers: int = 2
    activation: str = "tanh"
    covariance: str = "full"

    def __post_init__(self):
        self.latent_dims = [int(k) for k in self.latent_dims]
        self.output_dims = [int(d) for d in self.output_dims]
        if len(self.latent_dims) != self.num_fidelities or len(self.output_dims) != self.num_fidelities:
            raise ContractError("latent_dims and output_dims need one entry per fidelity")
        if min(self.latent_dims + self.output_dims + [self.input_dim, self.hidden_width,
                                                       self.hidden_layers]) < 1:
            raise ContractError("all model dimensions must be positive")
        if self.activation not in ("tanh", "identity"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.covariance not in ("full", "diag"):
            raise ContractError(f"unknown covariance parameterization {self.covariance!r}")

    def network_input_dim(self, m: int) -> int:
        return self.input_dim + (self.latent_dims[m - 2] if m > 1 else 0)

    def weight_size(self, m: int) -> int:
        return self.latent_dims[m - 1] * self.hidden_width


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 500
    elbo_mc_samples: int = 1
    prior_var: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.epochs >= 0 and self.elbo_mc_samples > 0
                and self.prior_var > 0):
            raise ContractError("training configuration values must be positive")


@dataclass
class Dataset:
    """Training examples ``(x, fidelity, y, cost)``; fidelity is 1-based."""

    xs: list = field(default_factory=list)
    fidelities: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    costs: list = field(default_factory=list)

    def __len__(self):
        return len(self.xs)

    def add(self, x, fidelity, y, cost):
        self.xs.append(np.asarray(x, dtype=float).reshape(-1))
        self.fidelities.append(int(fidelity))
        self.ys.append(np.asarray(y, dtype=float).reshape(-1))
        self.costs.append(cost)

    def extend(self, other: "Dataset"):
        for row in other:
            self.add(*row)

    def __iter__(self):
        return iter(zip(self.xs, self.fidelities, self.ys, self.costs))

    def copy(self) -> "Dataset":
        return Dataset(list(self.xs), list(self.fidelities), list(self.ys), list(self.costs))

    def group(self, m: int):
        idx = [i for i, f in enumerate(self.fidelities) if f == m]
        if not idx:
            return None, None
        return np.stack([self.xs[i] for i in idx]), np.stack([self.ys[i] for i in idx])

    def counts(self, num_fidelities: int) -> list[int]:
        return [sum(1 for f in self.fidelities if f == m) for m in range(1, num_fidelities + 1)]

    def validate(self, config: ModelConfig):
        for x, m, y, _ in self:
            if not 1 <= m <= config.num_fidelities:
                raise ContractError(f"fidelity {m} out of range")
            if y.shape[0] != config.output_dims[m - 1] or x.shape[0] != config.input_dim:
                raise ContractError(f"example shapes do not match fidelity {m}")

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for x, m, y, c in self:
                fh.write(json.dumps({"x": x.tolist(), "fidelity": m, "y": y.tolist(),
                                     "cost": _cost_to_json(c)}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        ds = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    ds.add(row["x"], row["fidelity"], row["y"], row["cost"])
        return ds


def _cost_to_json(c):
    # Fractions serialize exactly as "p/q"; plain numbers stay numbers.
    if hasattr(c, "denominator") and not isinstance(c, int):
        return int(c) if c.denominator == 1 else str(c)
    return c


class MfModel:
    """Parameters and normalizers for an M-fidelity surrogate.

    ``params[m-1]`` holds numpy arrays: feature layers ``W0, b0, W1, b1, ...``,
    variational mean ``mu``, Cholesky pieces ``chol_off`` (strictly lower part,
    full mode only) and ``chol_diag_raw`` (softplus-transformed diagonal),
    projection ``A`` and ``log_tau``.
    """

    def __init__(self, config: ModelConfig, params: list, x_shift=None, x_scale=None,
                 y_shift=None, y_scale=None):
        self.config = config
        self.params = params
        r = config.input_dim
        self.x_shift = np.zeros(r) if x_shift is None else np.asarray(x_shift, dtype=float)
        self.x_scale = np.ones(r) if x_scale is None else np.asarray(x_scale, dtype=float)
        self.y_shift = ([np.zeros(d) for d in config.output_dims] if y_shift is None
                        else [np.asarray(s, dtype=float) for s in y_shift])
        self.y_scale = (np.ones(config.num_fidelities) if y_scale is None
                        else np.asarray(y_scale, dtype=float))

    @property
    def M(self) -> int:
        return self.config.num_fidelities

    def copy(self) -> "MfModel":
        return copy.deepcopy(self)

    def chol(self, m: int) -> np.ndarray:
        p = self.params[m - 1]
        diag = np.logaddexp(0.0, p["chol_diag_raw"])
        if "chol_off" in p:
            return np.tril(p["chol_off"], -1) + np.diag(diag)
        return np.diag(diag)

    def weight_cov(self, m: int) -> np.ndarray:
        c = self.chol(m)
        return c @ c.T

    def mean_weights(self) -> list[np.ndarray]:
        return [self.params[m - 1]["mu"].reshape(self.config.latent_dims[m - 1], -1)
                for m in range(1, self.M + 1)]

    def noise_var(self, m: int) -> float:
        return float(np.exp(self.params[m - 1]["log_tau"]))

    def projection(self, m: int) -> np.ndarray:
        return self.params[m - 1]["A"]

    def normalize_x(self, x):
        return (np.asarray(x, dtype=float) - self.x_shift) / self.x_scale

    def fit_normalizers(self, dataset: Dataset):
        """Set input/output standardization from data (kept fixed afterwards)."""
        if len(dataset) == 0:
            return
        xs = np.stack(dataset.xs)
        self.x_shift = xs.mean(axis=0)
        sd = xs.std(axis=0)
        self.x_scale = np.where(sd > 1e-12, sd, 1.0)
        for m in range(1, self.M + 1):
            _, ys = dataset.group(m)
            if ys is None:
                continue
            self.y_shift[m - 1] = ys.mean(axis=0)
            sd = float(np.sqrt(((ys - self.y_shift[m - 1]) ** 2).mean()))
            self.y_scale[m - 1] = sd if sd > 1e-12 else 1.0

    def num_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())


def init_model(config: ModelConfig, seed: int = 0, dataset: Dataset | None = None,
               init_std: float = 1e-2) -> MfModel:
    """Glorot-style feature layers, small posterior spread, PCA projection when data allow."""
    rng = np.random.default_rng(seed)
    params = []
    w = config.hidden_width
    for m in range(1, config.num_fidelities + 1):
        k, d = config.latent_dims[m - 1], config.output_dims[m - 1]
        p = {}
        fan_in = config.network_input_dim(m)
        for layer in range(config.hidden_layers):
            p[f"W{layer}"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, w))
            p[f"b{layer}"] = np.zeros(w)
            fan_in = w
        size = k * w
        p["mu"] = rng.normal(0.0, np.sqrt(1.0 / w), size=size)
        if config.covariance == "full":
            p["chol_off"] = np.zeros((size, size))
        p["chol_diag_raw"] = np.full(size, np.log(np.expm1(init_std)))
        p["A"] = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
        p["log_tau"] = np.array(np.log(0.1))
        params.append(p)
    model = MfModel(config, params)
    if dataset is not None and len(dataset):
        model.fit_normalizers(dataset)
        for m in range(1, config.num_fidelities + 1):
            _, ys = dataset.group(m)
            if ys is None:
                continue
            ys = (ys - model.y_shift[m - 1]) / model.y_scale[m - 1]
            _, s, vt = np.linalg.svd(ys, full_matrices=False)
            n = min(len(s), config.latent_dims[m - 1])
            scale = np.sqrt(max(len(ys), 1))
            params[m - 1]["A"][:, :n] = vt[:n].T * (s[:n] / scale)[None, :]
    return model


# ---------------------------------------------------------------- forward


def _act(z, activation):
    return np.tanh(z) if activation == "tanh" else z


def features(model: MfModel, m: int, xin: np.ndarray) -> np.ndarray:
    """Feature map ``phi_m`` on a batch of network inputs (N x in_dim)."""
    p = model.params[m - 1]
    a = xin
    for layer in range(model.config.hidden_layers):
        a = _act(a @ p[f"W{layer}"] + p[f"b{layer}"], model.config.activation)
    return a


def forward_latents(model: MfModel, weights, x) -> list[np.ndarray]:
    """Latents ``h_1..h_M`` for given last-layer weights.

    ``x`` may be a single input (r,) or a batch (N, r); outputs follow suit.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != model.config.input_dim:
        raise ContractError(f"input has dim {xb.shape[1]}, model expects {model.config.input_dim}")
    xn = model.normalize_x(xb)
    hs = []
    prev = None
    for m in range(1, model.M + 1):
        wm = np.asarray(weights[m - 1])
        k = model.config.latent_dims[m - 1]
        if wm.shape != (k, model.config.hidden_width):
            raise ContractError(f"weight sample for fidelity {m} has shape {wm.shape}")
        xin = xn if prev is None else np.concatenate([xn, prev], axis=1)
        h = features(model, m, xin) @ wm.T
        hs.append(h[0] if single else h)
        prev = h
    return hs


def sample_weights(model: MfModel, rng: np.random.Generator) -> list[np.ndarray]:
    """One reparameterized draw ``unvec(mu_m + L_m eps)`` per fidelity."""
    out = []
    for m in range(1, model.M + 1):
        p = model.params[m - 1]
        eps = rng.standard_normal(p["mu"].shape[0])
        w = p["mu"] + model.chol(m) @ eps
        out.append(w.reshape(model.config.latent_dims[m - 1], -1))
    return out


# ---------------------------------------------------------------- ELBO on the tape


def _draw_eps(model: MfModel, rng, n_samples: int):
    return [[rng.standard_normal(model.config.weight_size(m)) for m in range(1, model.M + 1)]
            for _ in range(n_samples)]


def _kl_terms(model: MfModel, vs, prior_var: float):
    terms = []
    for m in range(1, model.M + 1):
        v = vs[m - 1]
        P = model.config.weight_size(m)
        diag = ad.softplus(v["chol_diag_raw"])
        tr = ad.square(diag).sum()
        if "chol_off" in v:
            tr = tr + ad.square(ad.tril_strict(v["chol_off"])).sum()
        quad = ad.square(v["mu"]).sum()
        logdet = 2.0 * ad.log(diag).sum()
        kl = 0.5 * ((tr + quad) * (1.0 / prior_var) - P + P * np.log(prior_var) - logdet)
        terms.append(kl)
    return terms


def _chol_var(v):
    diag = ad.diag_embed(ad.softplus(v["chol_diag_raw"]))
    if "chol_off" in v:
        return ad.tril_strict(v["chol_off"]) + diag
    return diag


def _elbo_graph(model: MfModel, dataset: Dataset, eps_draws, prior_var: float):
    """Build the ELBO on the tape; returns (elbo Var, parameter Vars)."""
    cfg = model.config
    vs = [{name: ad.Var(val) for name, val in p.items()} for p in model.params]
    groups = {}
    for m in range(1, model.M + 1):
        xs, ys = dataset.group(m)
        if xs is not None:
            groups[m] = (model.normalize_x(xs), (ys - model.y_shift[m - 1]) / model.y_scale[m - 1])
    top = max(groups) if groups else 0
    chols = {m: _chol_var(vs[m - 1]) for m in range(1, top + 1)}
    loglik = 0.0
    for eps in eps_draws:
        ws = []
        for m in range(1, top + 1):
            v = vs[m - 1]
            w = v["mu"] + chols[m] @ eps[m - 1]
            ws.append(w.reshape(cfg.latent_dims[m - 1], cfg.hidden_width))
        for fid, (xn, yn) in groups.items():
            prev = None
            for m in range(1, fid + 1):
                v = vs[m - 1]
                a = ad.Var(xn) if prev is None else ad.concat([ad.Var(xn), prev], axis=1)
                for layer in range(cfg.hidden_layers):
                    a = a @ v[f"W{layer}"] + v[f"b{layer}"]
                    if cfg.activation == "tanh":
                        a = ad.tanh(a)
                prev = a @ ws[m - 1].T
            v = vs[fid - 1]
            resid = yn - prev @ v["A"].T
            n, d = yn.shape
            tau = ad.exp(v["log_tau"])
            ll = -0.5 * n * d * (LOG_2PI + v["log_tau"]) - 0.5 * ad.square(resid).sum() / tau
            loglik = ll + loglik
    loglik = loglik * (1.0 / len(eps_draws))
    kl = _kl_terms(model, vs, prior_var)
    total = loglik
    for t in kl:
        total = total - t
    if not np.isfinite(total.value):
        bad = "likelihood" if not np.isfinite(_value(loglik)) else "KL"
        raise NumericalError(f"non-finite ELBO ({bad} term)")
    return total, vs


def _value(x):
    return x.value if isinstance(x, ad.Var) else x


def elbo(model: MfModel, dataset: Dataset, rng: np.random.Generator, config: TrainConfig) -> float:
    """Monte-Carlo ELBO: expected Gaussian log-likelihood minus KL to ``N(0, prior_var I)``."""
    eps = _draw_eps(model, rng, config.elbo_mc_samples)
    total, _ = _elbo_graph(model, dataset, eps, config.prior_var)
    return float(total.value)


def elbo_and_grad(model: MfModel, dataset: Dataset, eps_draws, prior_var: float = 1.0):
    """ELBO for fixed reparameterization noise and its gradient per parameter."""
    total, vs = _elbo_graph(model, dataset, eps_draws, prior_var)
    total.backward()
    grads = [{name: (v.grad if v.grad is not None else np.zeros_like(v.value))
              for name, v in p.items()} for p in vs]
    return float(total.value), grads


def kl_divergence(model: MfModel, prior_var: float = 1.0) -> float:
    vs = [{name: ad.Var(val) for name, val in p.items()} for p in model.params]
    return float(sum(t.value for t in _kl_terms(model, vs, prior_var)))


# ---------------------------------------------------------------- training


def _flatten(params):
    return np.concatenate([v.reshape(-1) for p in params for v in p.values()])


def _unflatten(vec, template):
    out, i = [], 0
    for p in template:
        q = {}
        for name, v in p.items():
            q[name] = vec[i:i + v.size].reshape(v.shape).copy()
            i += v.size
        out.append(q)
    return out


def _eval_elbo(model, dataset, config, n_eval=8):
    rng = np.random.default_rng(config.seed + 7919)
    eps = _draw_eps(model, rng, n_eval)
    return float(_elbo_graph(model, dataset, eps, config.prior_var)[0].value)


def _bind_views(model, theta):
    # parameters become views into ``theta`` so updates happen in place
    model.params = _unflatten_views(theta, model.params)


def _unflatten_views(vec, template):
    out, i = [], 0
    for p in template:
        q = {}
        for name, v in p.items():
            q[name] = vec[i:i + v.size].reshape(v.shape)
            i += v.size
        out.append(q)
    return out


def _adam(model, dataset, config, lr):
    rng = np.random.default_rng(config.seed)
    theta = _flatten(model.params)
    _bind_views(model, theta)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = max(len(dataset), 1)
    for t in range(1, config.epochs + 1):
        draws = _draw_eps(model, rng, config.elbo_mc_samples)
        value, grads = elbo_and_grad(model, dataset, draws, config.prior_var)
        g = -_flatten(grads) / n
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient during training")
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        step = lr * (m1 / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + eps)
        theta -= step
    model.params = _unflatten(theta, model.params)
    return model


def train(model: MfModel, dataset: Dataset, config: TrainConfig) -> MfModel:
    """Maximize the ELBO with Adam; returns a new model, input untouched.

    The returned model never has a lower evaluation ELBO (fixed seed) than
    the input. A non-finite loss triggers one restart at half the learning
    rate before failing.
    """
    dataset.validate(model.config)
    if config.epochs == 0:
        return model.copy()
    start = _eval_elbo(model, dataset, config)
    lr = config.learning_rate
    for attempt in range(2):
        try:
            trained = _adam(model.copy(), dataset, config, lr)
            final = _eval_elbo(trained, dataset, config)
            if not np.isfinite(final):
                raise NumericalError("non-finite ELBO after training")
            break
        except (NumericalError, FloatingPointError) as exc:
            if attempt == 1:
                raise NumericalError(f"training diverged twice (last lr={lr}): {exc}") from exc
            log.warning("training diverged (%s); retrying with lr=%g", exc, lr / 2)
            lr /= 2
    if final < start:
        log.info("training did not improve the evaluation ELBO; keeping the input parameters")
        return model.copy()
    return trained


# ---------------------------------------------------------------- prediction


def predict(model: MfModel, x, fidelity: int):
    """Posterior-mean output (original units) and delta-method latent belief."""
    from .delta import latent_belief

    if not 1 <= fidelity <= model.M:
        raise ContractError(f"fidelity {fidelity} out of range 1..{model.M}")
    belief = latent_belief(model, x, fidelity)
    mean = model.projection(fidelity) @ belief.mean
    return mean * model.y_scale[fidelity - 1] + model.y_shift[fidelity - 1], belief


def predict_mean(model: MfModel, xs, fidelity: int) -> np.ndarray:
    """Batched posterior-mean outputs (N x d_m) in original units."""
    hs = forward_latents(model, model.mean_weights(), np.atleast_2d(xs))
    out = hs[fidelity - 1] @ model.projection(fidelity).T
    return out * model.y_scale[fidelity - 1] + model.y_shift[fidelity - 1]


# ---------------------------------------------------------------- checkpoints


def save_model(model: MfModel, path):
    arrays = {"x_shift": model.x_shift, "x_scale": model.x_scale, "y_scale": model.y_scale}
    for m, p in enumerate(model.params, start=1):
        arrays[f"y_shift/{m}"] = model.y_shift[m - 1]
        for name, v in p.items():
            arrays[f"param/{m}/{name}"] = v
    header = json.dumps({"format": "bmfal-model", "version": 1, "config": asdict(model.config),
                         "shapes": {k: list(v.shape) for k, v in arrays.items()}})
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(header), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> MfModel:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != "bmfal-model":
            raise ContractError(f"{path} is not a model checkpoint")
        config = ModelConfig(**header["config"])
        params = []
        for m in range(1, config.num_fidelities + 1):
            prefix = f"param/{m}/"
            params.append({k[len(prefix):]: z[k].copy() for k in z.files if k.startswith(prefix)})
        return MfModel(config, params, z["x_shift"].copy(), z["x_scale"].copy(),
                       [z[f"y_shift/{m}"].copy() for m in range(1, config.num_fidelities + 1)],
                       z["y_scale"].copy())
