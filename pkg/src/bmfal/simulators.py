"""Multi-fidelity oracles on nested square meshes of the unit square.

Fields are stored row-major as ``u[i * n + j] = u(s1_i, s2_j)`` with nodes
``s = arange(n) / (n - 1)`` (boundary nodes included, so d = n**2). Using
exact rational node positions keeps shared nodes of nested meshes
bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .gaussian import ContractError, NumericalError
from .optimize import DomainBox


@dataclass(frozen=True)
class MeshSpec:
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ContractError("mesh needs at least 3 points per side")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def size(self) -> int:
        return self.n * self.n

    def nodes(self) -> np.ndarray:
        return np.arange(self.n) / (self.n - 1)

    def grid(self):
        s = self.nodes()
        return np.meshgrid(s, s, indexing="ij")


@dataclass
class FidelityLadder:
    meshes: list
    lambdas: list
    eval_mesh: MeshSpec

    def __post_init__(self):
        self.meshes = [m if isinstance(m, MeshSpec) else MeshSpec(int(m)) for m in self.meshes]
        if not isinstance(self.eval_mesh, MeshSpec):
            self.eval_mesh = MeshSpec(int(self.eval_mesh))
        self.lambdas = [Fraction(l) for l in self.lambdas]
        if len(self.meshes) != len(self.lambdas):
            raise ContractError("one cost per mesh is required")
        ns = [m.n for m in self.meshes]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ContractError("mesh sizes must strictly increase with fidelity")
        if any(b < a for a, b in zip(self.lambdas, self.lambdas[1:])) or self.lambdas[0] <= 0:
            raise ContractError("costs must be positive and nondecreasing")

    @property
    def num_fidelities(self) -> int:
        return len(self.meshes)

    @property
    def output_dims(self) -> list[int]:
        return [m.size for m in self.meshes]


def default_ladder(num_fidelities: int = 2) -> FidelityLadder:
    if num_fidelities == 2:
        return FidelityLadder([17, 33], [1, 3], MeshSpec(65))
    if num_fidelities == 3:
        return FidelityLadder([17, 33, 65], [1, 3, 10], MeshSpec(65))
    raise ContractError("default ladders exist for 2 or 3 fidelities")


# ---------------------------------------------------------------- finite differences


@lru_cache(maxsize=16)
def _laplacian(n: int) -> sp.csc_matrix:
    """Negative 5-point Laplacian on the (n-2)^2 interior nodes, Dirichlet 0."""
    m = n - 2
    h2 = (1.0 / (n - 1)) ** 2
    t = sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
    eye = sp.identity(m)
    return ((sp.kron(t, eye) + sp.kron(eye, t)) / h2).tocsc()


@lru_cache(maxsize=16)
def _poisson_factor(n: int):
    return spla.splu(_laplacian(n))


def _embed(interior: np.ndarray, n: int) -> np.ndarray:
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = interior.reshape(n - 2, n - 2)
    return u.reshape(-1)


def gaussian_bump(center, mesh: MeshSpec, sigma: float = 0.1) -> np.ndarray:
    s1, s2 = mesh.grid()
    c = np.asarray(center, dtype=float)
    return np.exp(-((s1 - c[0]) ** 2 + (s2 - c[1]) ** 2) / (2 * sigma**2)).reshape(-1)


def solve_poisson_source(source: np.ndarray, mesh: MeshSpec) -> np.ndarray:
    """Solve ``-Lap u = source`` with zero Dirichlet data; ``source`` is a full field."""
    n = mesh.n
    f = np.asarray(source, dtype=float).reshape(n, n)[1:-1, 1:-1].reshape(-1)
    u = _poisson_factor(n).solve(f)
    resid = np.linalg.norm(_laplacian(n) @ u - f)
    if resid > 1e-10 * max(np.linalg.norm(f), 1e-300) and np.linalg.norm(f) > 0:
        raise NumericalError(f"Poisson residual {resid:.2e} exceeds tolerance")
    return _embed(u, n)


def solve_poisson(x, mesh: MeshSpec, sigma: float = 0.1) -> np.ndarray:
    """Field for a unit Gaussian source of width ``sigma`` centered at ``x``."""
    return solve_poisson_source(gaussian_bump(x, mesh, sigma), mesh)


@lru_cache(maxsize=16)
def _heat_factor(n: int, coef: float):
    a = sp.identity((n - 2) ** 2, format="csc") + coef * _laplacian(n)
    return spla.splu(a.tocsc())


def solve_heat_initial(u0: np.ndarray, mesh: MeshSpec, alpha: float = 0.01, T: float = 1.0,
                       dt: float = 1e-2) -> np.ndarray:
    """Backward-Euler ``u_t = alpha Lap u`` from full field ``u0`` to time ``T``."""
    n = mesh.n
    u = np.asarray(u0, dtype=float).reshape(n, n)[1:-1, 1:-1].reshape(-1).copy()
    steps = int(round(T / dt))
    if alpha == 0 or steps == 0:
        return _embed(u, n)
    solver = _heat_factor(n, float(alpha * dt))
    for _ in range(steps):
        u = solver.solve(u)
    return _embed(u, n)


def solve_heat(x, mesh: MeshSpec, alpha: float = 0.01, T: float = 1.0, dt: float = 1e-2,
               sigma: float = 0.1) -> np.ndarray:
    """Temperature at ``T`` from a Gaussian initial bump centered at ``x``."""
    return solve_heat_initial(gaussian_bump(x, mesh, sigma), mesh, alpha, T, dt)


# ---------------------------------------------------------------- interpolation


def _bilinear_weights(n_from: int, n_to: int):
    # node j of the target sits at j (nf-1)/(nt-1) in source index units
    j = np.arange(n_to)
    num = j * (n_from - 1)
    i0 = np.minimum(num // (n_to - 1), n_from - 2)
    t = (num - i0 * (n_to - 1)) / (n_to - 1)
    return i0, t


def interpolate(field, src: MeshSpec, dst: MeshSpec) -> np.ndarray:
    """Bilinear interpolation between square meshes of the unit square."""
    u = np.asarray(field, dtype=float).reshape(src.n, src.n)
    if src.n == dst.n:
        return u.reshape(-1).copy()
    i0, t = _bilinear_weights(src.n, dst.n)
    a = u[i0][:, i0]
    b = u[i0 + 1][:, i0]
    c = u[i0][:, i0 + 1]
    d = u[i0 + 1][:, i0 + 1]
    ti = t[:, None]
    tj = t[None, :]
    out = (1 - ti) * ((1 - tj) * a + tj * c) + ti * ((1 - tj) * b + tj * d)
    # keep coincident nodes bit-exact
    exact_i = t == 0
    out[np.ix_(exact_i, exact_i)] = u[np.ix_(i0[exact_i], i0[exact_i])]
    return out.reshape(-1)


# ---------------------------------------------------------------- oracles


class SimulatorOracle:
    """Queryable multi-fidelity map ``f_m: box -> R^{n_m^2}`` with costs."""

    name = "oracle"

    def __init__(self, ladder: FidelityLadder, domain: DomainBox):
        self.ladder = ladder
        self.domain = domain

    @property
    def input_dim(self) -> int:
        return self.domain.dim

    @property
    def num_fidelities(self) -> int:
        return self.ladder.num_fidelities

    def field(self, x, mesh: MeshSpec, fidelity: int) -> np.ndarray:
        raise NotImplementedError

    def query(self, x, fidelity: int):
        if not 1 <= fidelity <= self.num_fidelities:
            raise ContractError(f"fidelity {fidelity} out of range")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.input_dim or not self.domain.contains(x):
            raise ContractError(f"input {x} outside the domain")
        return self.field(x, self.ladder.meshes[fidelity - 1], fidelity), self.ladder.lambdas[fidelity - 1]

    def ground_truth(self, x) -> np.ndarray:
        """Reference field on the evaluation mesh."""
        return self.field(np.asarray(x, dtype=float), self.ladder.eval_mesh, self.num_fidelities)

    def to_eval_mesh(self, y, fidelity: int) -> np.ndarray:
        return interpolate(y, self.ladder.meshes[fidelity - 1], self.ladder.eval_mesh)


class PoissonOracle(SimulatorOracle):
    name = "poisson"

    def __init__(self, ladder=None, sigma: float = 0.1):
        super().__init__(ladder or default_ladder(2), DomainBox([0.1, 0.1], [0.9, 0.9]))
        self.sigma = sigma

    def field(self, x, mesh, fidelity):
        return solve_poisson(x, mesh, self.sigma)


class HeatOracle(SimulatorOracle):
    name = "heat"

    def __init__(self, ladder=None, alpha: float = 0.01, T: float = 1.0, dt: float = 1e-2,
                 sigma: float = 0.1):
        super().__init__(ladder or default_ladder(2), DomainBox([0.1, 0.1], [0.9, 0.9]))
        self.alpha, self.T, self.dt, self.sigma = alpha, T, dt, sigma

    def field(self, x, mesh, fidelity):
        return solve_heat(x, mesh, self.alpha, self.T, self.dt, self.sigma)


@dataclass
class SyntheticSpec:
    """Analytic two-input field family.

    Target: a Gaussian bump centered at ``x`` plus a product of sines whose
    frequencies depend on ``x``. Fidelity m widens the bump by
    ``smoothing * (M - m) / (M - 1)`` (Gaussian blur) and adds a smooth
    discrepancy scaled by ``discrepancy * (M - m) / (M - 1)``.
    """

    meshes: list = field(default_factory=lambda: [9, 17])
    lambdas: list = field(default_factory=lambda: [1, 3])
    eval_mesh: int = 33
    width: float = 0.35
    wave: float = 0.3
    smoothing: float = 0.1
    discrepancy: float = 0.3


def synthetic_target(x, s1, s2, width=0.35, wave=0.3, blur=0.0):
    w2 = width**2 + blur**2
    bump = (width**2 / w2) * np.exp(-((s1 - x[0]) ** 2 + (s2 - x[1]) ** 2) / (2 * w2))
    return bump + wave * np.sin(np.pi * s1 * (1 + x[0])) * np.sin(np.pi * s2 * (1 + x[1]))


class SyntheticOracle(SimulatorOracle):
    name = "synthetic"

    def __init__(self, spec: SyntheticSpec | None = None):
        spec = spec or SyntheticSpec()
        ladder = FidelityLadder(spec.meshes, spec.lambdas, MeshSpec(spec.eval_mesh))
        super().__init__(ladder, DomainBox([0.0, 0.0], [1.0, 1.0]))
        self.spec = spec

    def level(self, fidelity: int) -> float:
        M = self.num_fidelities
        return (M - fidelity) / (M - 1) if M > 1 else 0.0

    def field(self, x, mesh, fidelity):
        sp_ = self.spec
        s1, s2 = mesh.grid()
        lvl = self.level(fidelity)
        u = synthetic_target(x, s1, s2, sp_.width, sp_.wave, sp_.smoothing * lvl)
        if lvl > 0 and sp_.discrepancy != 0:
            u = u + sp_.discrepancy * lvl * (x[0] - 0.5) * np.cos(np.pi * s1) * np.cos(np.pi * s2)
        return u.reshape(-1)


def synthetic_oracle(spec: SyntheticSpec | None = None) -> SyntheticOracle:
    return SyntheticOracle(spec)


def make_oracle(problem: str, num_fidelities: int = 2) -> SimulatorOracle:
    if problem == "poisson":
        return PoissonOracle(default_ladder(num_fidelities))
    if problem == "heat":
        return HeatOracle(default_ladder(num_fidelities))
    if problem == "synthetic":
        if num_fidelities == 2:
            return SyntheticOracle()
        return SyntheticOracle(SyntheticSpec(meshes=[9, 17, 33], lambdas=[1, 3, 10], eval_mesh=33))
    raise ContractError(f"unknown problem {problem!r}")
