"""Gaussian entropy and mutual-information primitives.

All quantities are in nats. Covariances are dense numpy arrays; the
projected-output routines never build a ``d x d`` matrix and work in the
latent dimension instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOG_2PI_E = np.log(2.0 * np.pi * np.e)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
MI_CLAMP = 1e-8


class NumericalError(ArithmeticError):
    """Raised when a factorization or objective cannot be made finite."""


class ContractError(ValueError):
    """Raised on shape/partition/domain violations of an operation's inputs."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ContractError(f"cov shape {self.cov.shape} does not match mean length {n}")
        scale = max(np.abs(self.cov).max(initial=0.0), 1e-300)
        if np.abs(self.cov - self.cov.T).max(initial=0.0) > 1e-10 * scale:
            raise ContractError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def marginal(self, idx) -> "GaussianBelief":
        idx = np.asarray(idx, dtype=int)
        return GaussianBelief(self.mean[idx], self.cov[np.ix_(idx, idx)])


@dataclass
class ProjectedOutputSpec:
    """Per-block projection ``A_j`` (d_j x k_j) and noise variance ``tau_j``."""

    projections: list
    noise_vars: list
    _r: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self.projections) != len(self.noise_vars):
            raise ContractError("one noise variance per projection block is required")
        self.projections = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.projections]
        self.noise_vars = [float(t) for t in self.noise_vars]
        for t in self.noise_vars:
            if not t > 0:
                raise ContractError(f"noise variance must be positive, got {t}")

    @property
    def block_dims(self) -> list[tuple[int, int]]:
        return [a.shape for a in self.projections]

    @property
    def latent_dim(self) -> int:
        return sum(a.shape[1] for a in self.projections)

    @property
    def output_dim(self) -> int:
        return sum(a.shape[0] for a in self.projections)

    def whitening_factors(self) -> list[np.ndarray]:
        # R_j with R_j^T R_j = A_j^T A_j / tau_j
        if self._r is None:
            self._r = [whitening_factor(a, t) for a, t in zip(self.projections, self.noise_vars)]
        return self._r


def whitening_factor(projection, noise_var: float) -> np.ndarray:
    """Return ``R`` (at most k x k) with ``R.T @ R == A.T @ A / noise_var``."""
    if not noise_var > 0:
        raise ContractError(f"noise variance must be positive, got {noise_var}")
    a = np.atleast_2d(np.asarray(projection, dtype=float))
    r = np.linalg.qr(a, mode="r")
    return r / np.sqrt(noise_var)


def cholesky_jittered(mat: np.ndarray) -> np.ndarray:
    """Cholesky factor with escalating diagonal jitter.

    Jitter starts at ``1e-10 * trace/n`` and grows by 10x up to
    ``1e-4 * trace/n``.
    """
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(mat) / n
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = JITTER_START * scale
    eye = np.eye(n)
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(mat + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"matrix is not PSD; leading minor {_first_bad_minor(mat)} fails")


def _first_bad_minor(mat: np.ndarray) -> int:
    for i in range(1, mat.shape[0] + 1):
        try:
            np.linalg.cholesky(mat[:i, :i])
        except np.linalg.LinAlgError:
            return i
    return mat.shape[0]


def logdet_psd(mat) -> float:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] == 0:
        return 0.0
    chol = cholesky_jittered(mat)
    return 2.0 * float(np.log(np.diag(chol)).sum())


def entropy(belief: GaussianBelief) -> float:
    """Differential entropy ``0.5 * log det(2 pi e cov)``."""
    n = belief.dim
    return 0.5 * (n * LOG_2PI_E + logdet_psd(belief.cov))


def logdet_lowrank(noise_var: float, projection, latent_cov) -> float:
    """``log det(tau I_d + A S A^T)`` evaluated in the latent dimension.

    Uses ``det(I_d + A S A^T / tau) = det(I_k + S A^T A / tau)``, written in
    the symmetric form ``I + R S R^T`` with ``R^T R = A^T A / tau``.
    """
    if not noise_var > 0:
        raise ContractError(f"noise variance must be positive, got {noise_var}")
    a = np.atleast_2d(np.asarray(projection, dtype=float))
    s = np.atleast_2d(np.asarray(latent_cov, dtype=float))
    d, k = a.shape
    if s.shape != (k, k):
        raise ContractError(f"latent covariance shape {s.shape} does not match projection {a.shape}")
    r = whitening_factor(a, noise_var)
    inner = np.eye(r.shape[0]) + r @ s @ r.T
    return d * np.log(noise_var) + logdet_psd(0.5 * (inner + inner.T))


def _block_whitener(rs: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(r.shape[0] for r in rs)
    cols = sum(r.shape[1] for r in rs)
    out = np.zeros((rows, cols))
    i = j = 0
    for r in rs:
        out[i:i + r.shape[0], j:j + r.shape[1]] = r
        i += r.shape[0]
        j += r.shape[1]
    return out


def projected_logdet(latent_cov: np.ndarray, spec: ProjectedOutputSpec) -> float:
    """``log det(blockdiag(A) S blockdiag(A)^T + blockdiag(tau I))``."""
    if latent_cov.shape != (spec.latent_dim, spec.latent_dim):
        raise ContractError(
            f"latent covariance has dim {latent_cov.shape[0]}, spec expects {spec.latent_dim}")
    r = _block_whitener(spec.whitening_factors())
    inner = np.eye(r.shape[0]) + r @ latent_cov @ r.T
    noise = sum(a.shape[0] * np.log(t) for a, t in zip(spec.projections, spec.noise_vars))
    return noise + logdet_psd(0.5 * (inner + inner.T))


def projected_joint_entropy(latent_joint: GaussianBelief, spec: ProjectedOutputSpec) -> float:
    """Entropy of ``y = blockdiag(A) h + noise`` with ``h ~ latent_joint``."""
    return 0.5 * (spec.output_dim * LOG_2PI_E + projected_logdet(latent_joint.cov, spec))


def _check_partition(n: int, a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=int).reshape(-1)
    b = np.asarray(b, dtype=int).reshape(-1)
    both = np.concatenate([a, b])
    if len(a) == 0 or len(b) == 0:
        raise ContractError("both blocks of the partition must be nonempty")
    if len(both) != n or len(np.unique(both)) != n or both.min() < 0 or both.max() >= n:
        raise ContractError(f"blocks do not partition range({n}) exactly once")
    return a, b


def clamp_mi(value: float) -> float:
    if value < 0.0:
        if value > -MI_CLAMP:
            return 0.0
        raise NumericalError(f"mutual information is materially negative: {value:.3e}")
    return float(value)


def mutual_information(joint: GaussianBelief, split) -> float:
    """``H(a) + H(b) - H(a, b)`` for an index partition ``split = (a, b)``."""
    a, b = _check_partition(joint.dim, *split)
    cov = joint.cov
    val = 0.5 * (logdet_psd(cov[np.ix_(a, a)]) + logdet_psd(cov[np.ix_(b, b)])
                 - logdet_psd(cov[np.ix_(np.r_[a, b], np.r_[a, b])]))
    return clamp_mi(val)


def projected_mutual_information(latent_joint: GaussianBelief, spec: ProjectedOutputSpec,
                                 split) -> float:
    """MI between two groups of projected-plus-noise output blocks.

    ``split`` partitions the *block* indices of ``spec``.
    """
    nblocks = len(spec.projections)
    a, b = _check_partition(nblocks, *split)
    offsets = np.cumsum([0] + [p.shape[1] for p in spec.projections])

    def sub(blocks):
        idx = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in blocks])
        s = ProjectedOutputSpec([spec.projections[i] for i in blocks],
                                [spec.noise_vars[i] for i in blocks])
        return projected_logdet(latent_joint.cov[np.ix_(idx, idx)], s)

    val = 0.5 * (sub(a) + sub(b) - sub(np.r_[a, b]))
    return clamp_mi(val)
