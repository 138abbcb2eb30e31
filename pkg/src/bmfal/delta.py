"""First-order (delta method) Gaussian beliefs over latent outputs.

Latents are linearized in the stacked last-layer weights
``w = [vec(W_1); ...; vec(W_M)]`` around the posterior mean. With
``w = mu + L eps`` and ``eps ~ N(0, I)``, each query's latent is
``h(mu) + J L eps`` so every cross-covariance is ``(J_a L)(J_b L)^T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gaussian import (ContractError, GaussianBelief, ProjectedOutputSpec,
                       projected_mutual_information, whitening_factor)
from .model import MfModel, forward_latents


@dataclass
class LatentJointBelief:
    belief: GaussianBelief
    block_index: list  # (offset, dim) per query

    def block(self, j: int) -> GaussianBelief:
        off, dim = self.block_index[j]
        return self.belief.marginal(np.arange(off, off + dim))


def weight_offsets(model: MfModel) -> np.ndarray:
    sizes = [model.config.weight_size(m) for m in range(1, model.M + 1)]
    return np.cumsum([0] + sizes)


def _act_deriv(a, activation):
    return 1.0 - a * a if activation == "tanh" else np.ones_like(a)


def latent_chain(model: MfModel, xs, upto: int | None = None):
    """Latent means and weight-Jacobians for a batch of inputs.

    Returns lists ``hs[m-1]`` (N x k_m) and ``jacs[m-1]`` (N x k_m x P) for
    m = 1..upto, evaluated at the posterior-mean weights.
    """
    cfg = model.config
    upto = model.M if upto is None else upto
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n = xs.shape[0]
    offs = weight_offsets(model)
    P = offs[-1]
    xn = model.normalize_x(xs)
    weights = model.mean_weights()
    hs, jacs = [], []
    for m in range(1, upto + 1):
        p = model.params[m - 1]
        xin = xn if m == 1 else np.concatenate([xn, hs[-1]], axis=1)
        a = xin
        grad = None  # d phi / d xin, N x width x in_dim
        for layer in range(cfg.hidden_layers):
            wl = p[f"W{layer}"]
            a = a @ wl + p[f"b{layer}"]
            if cfg.activation == "tanh":
                a = np.tanh(a)
            dact = _act_deriv(a, cfg.activation)
            if grad is None:
                grad = dact[:, :, None] * wl.T[None, :, :]
            else:
                grad = dact[:, :, None] * (wl.T @ grad)
        phi = a
        wm = weights[m - 1]
        k = wm.shape[0]
        h = phi @ wm.T
        jac = np.zeros((n, k, P))
        if m > 1:
            dphi_dh = grad[:, :, cfg.input_dim:]
            dh_dprev = wm @ dphi_dh
            jac[:, :, :offs[m - 1]] = dh_dprev @ jacs[-1][:, :, :offs[m - 1]]
        # h_i = sum_c W[i, c] phi_c with row-major vec index i * width + c
        width = cfg.hidden_width
        for i in range(k):
            start = offs[m - 1] + i * width
            jac[:, i, start:start + width] = phi
        hs.append(h)
        jacs.append(jac)
    return hs, jacs


def latent_jacobian(model: MfModel, x, fidelity: int, method: str = "analytic",
                    step: float = 1e-5) -> np.ndarray:
    """Jacobian (k_m x P) of ``h_m(x)`` w.r.t. the stacked weights at the mean."""
    _check_query(model, x, fidelity)
    if method == "analytic":
        return latent_chain(model, x, fidelity)[1][fidelity - 1][0]
    if method != "fd":
        raise ContractError(f"unknown Jacobian method {method!r}")
    offs = weight_offsets(model)
    mu = np.concatenate([model.params[m]["mu"] for m in range(model.M)])
    shapes = [w.shape for w in model.mean_weights()]

    def h_at(vec):
        ws = [vec[offs[i]:offs[i + 1]].reshape(shapes[i]) for i in range(model.M)]
        return forward_latents(model, ws, x)[fidelity - 1]

    cols = []
    for i in range(len(mu)):
        dh = step * (1.0 + abs(mu[i]))
        up, dn = mu.copy(), mu.copy()
        up[i] += dh
        dn[i] -= dh
        cols.append((h_at(up) - h_at(dn)) / (2 * dh))
    return np.stack(cols, axis=1)


def block_chol(model: MfModel) -> list[np.ndarray]:
    return [model.chol(m) for m in range(1, model.M + 1)]


def scale_by_chol(model: MfModel, jac: np.ndarray, chols=None) -> np.ndarray:
    """``J @ blockdiag(L_1..L_M)`` over the trailing weight axis."""
    chols = block_chol(model) if chols is None else chols
    offs = weight_offsets(model)
    out = np.empty_like(jac)
    for m, c in enumerate(chols):
        sl = slice(offs[m], offs[m + 1])
        out[..., sl] = jac[..., sl] @ c
    return out


def latent_belief(model: MfModel, x, fidelity: int) -> GaussianBelief:
    _check_query(model, x, fidelity)
    hs, jacs = latent_chain(model, x, fidelity)
    g = scale_by_chol(model, jacs[fidelity - 1][0])
    return GaussianBelief(hs[fidelity - 1][0], _sym(g @ g.T))


def _sym(c):
    return 0.5 * (c + c.T)


def _check_query(model: MfModel, x, fidelity: int):
    if not 1 <= int(fidelity) <= model.M:
        raise ContractError(f"fidelity {fidelity} out of range 1..{model.M}")
    if np.asarray(x).reshape(-1).shape[0] != model.config.input_dim:
        raise ContractError("query input has the wrong dimension")


def query_factors(model: MfModel, queries: Sequence, chols=None):
    """Latent means (list) and ``J L`` factors (list of k_m x P) per query."""
    means, factors = [None] * len(queries), [None] * len(queries)
    by_fid = {}
    for j, (x, m) in enumerate(queries):
        _check_query(model, x, m)
        by_fid.setdefault(int(m), []).append(j)
    for m, idx in by_fid.items():
        xs = np.stack([np.asarray(queries[j][0], dtype=float).reshape(-1) for j in idx])
        hs, jacs = latent_chain(model, xs, m)
        g = scale_by_chol(model, jacs[m - 1], chols)
        for row, j in enumerate(idx):
            means[j] = hs[m - 1][row]
            factors[j] = g[row]
    return means, factors


def joint_latent_belief(model: MfModel, queries: Sequence) -> LatentJointBelief:
    """Joint Gaussian over the stacked latents of ``queries`` [(x, m), ...]."""
    if len(queries) == 0:
        raise ContractError("query set must be nonempty")
    means, factors = query_factors(model, queries)
    g = np.concatenate(factors, axis=0)
    blocks, off = [], 0
    for f in factors:
        blocks.append((off, f.shape[0]))
        off += f.shape[0]
    return LatentJointBelief(GaussianBelief(np.concatenate(means), _sym(g @ g.T)), blocks)


def output_spec(model: MfModel, fidelities: Sequence[int]) -> ProjectedOutputSpec:
    return ProjectedOutputSpec([model.projection(m) for m in fidelities],
                               [model.noise_var(m) for m in fidelities])


def output_mi(model: MfModel, batch_queries: Sequence, target_query) -> float:
    """``I({y_{m_j}(x_j)}, y_{m_t}(x_t))`` via the joint latent belief.

    This is the direct route: it builds the full joint latent covariance and
    evaluates three projected log-determinants in the latent dimension.
    """
    if len(batch_queries) == 0:
        raise ContractError("batch must be nonempty")
    queries = list(batch_queries) + [target_query]
    joint = joint_latent_belief(model, queries)
    spec = output_spec(model, [int(m) for _, m in queries])
    n = len(batch_queries)
    return projected_mutual_information(joint.belief, spec, (np.arange(n), [n]))


def whitened_factors(model: MfModel, xs, fidelity: int, chols=None, rfac=None) -> np.ndarray:
    """``R_m J L`` for a batch of inputs at one fidelity (N x k' x P).

    ``R_m^T R_m = A_m^T A_m / tau_m``, so the projected-plus-noise output of
    a query carries the same information as ``R_m h + white noise``.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    _, jacs = latent_chain(model, xs, fidelity)
    g = scale_by_chol(model, jacs[fidelity - 1], chols)
    if rfac is None:
        rfac = whitening_factor(model.projection(fidelity), model.noise_var(fidelity))
    return rfac @ g
