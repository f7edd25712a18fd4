"""
Load moments, truncated SVD of the load covariance and propagation of the
mean and the low-rank covariance factors through ``A(omega)``.

The load covariance is never formed densely: it is carried as the centered
sample matrix ``Z`` (``Sigma_f = Z Z^H``), whose thin SVD gives the
covariance singular values as squared singular values of ``Z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.io

from lrmor.errors import ContractError
from lrmor.mesh_fem import CoupledSystem
from lrmor.solvers import FullOrderModel
from lrmor.tbl import LoadEnsemble


@dataclass(frozen=True)
class MomentPair:
    """Mean and factored covariance ``factor @ factor^H`` of a random vector.

    ``factor`` holds only the rows in ``support``; all other rows of the
    covariance are zero.
    """

    mean: np.ndarray
    factor: np.ndarray = field(repr=False)
    support: slice = slice(None)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def n_samples(self) -> int:
        return self.factor.shape[1] + 1

    @property
    def covariance(self) -> np.ndarray:
        """Dense ``n x n`` covariance (small problems only)."""
        out = np.zeros((self.n, self.n), dtype=complex)
        out[self.support, self.support] = self.factor @ self.factor.conj().T
        return out


def estimate_moments(samples: Union[LoadEnsemble, np.ndarray]) -> MomentPair:
    """Sample mean and unbiased sample covariance (``1/(I-1)``) of the columns."""
    if isinstance(samples, LoadEnsemble):
        data, n, support = samples.forces, samples.n, slice(0, samples.n_s)
    else:
        data = np.asarray(samples)
        if data.ndim != 2:
            raise ContractError("samples must be an n x I matrix")
        n, support = data.shape[0], slice(0, data.shape[0])
    count = data.shape[1]
    if count < 2:
        raise ContractError(f"at least 2 samples are needed, got {count}")
    mu = data.mean(axis=1)
    mean = np.zeros(n, dtype=complex)
    mean[support] = mu
    factor = (data - mu[:, None]) / np.sqrt(count - 1)
    return MomentPair(mean, factor.astype(complex), support)


def normalize_phase(U: np.ndarray):
    """Rotate each column so its largest-magnitude entry is real positive.

    Returns the rotated columns and the unit phase factors applied.
    """
    if U.shape[1] == 0:
        return U.copy(), np.ones(0, dtype=complex)
    idx = np.argmax(np.abs(U), axis=0)
    pivot = U[idx, np.arange(U.shape[1])]
    mag = np.abs(pivot)
    rot = np.where(mag > 0, pivot.conj() / np.where(mag > 0, mag, 1.0), 1.0)
    return U * rot, rot


def select_rank(values: np.ndarray, energy_tol: float, l_max: Optional[int] = None) -> int:
    """Smallest ``l`` with ``sum(S[:l]) >= energy_tol * sum(S)``, capped at ``l_max``."""
    total = float(np.sum(values))
    if total <= 0:
        return 0
    cumulative = np.cumsum(values)
    l = int(np.searchsorted(cumulative, energy_tol * total, side="left")) + 1
    l = min(l, int(np.count_nonzero(values)))
    return l if l_max is None else min(l, int(l_max))


@dataclass(frozen=True)
class LowRankFactorization:
    """Truncated SVD ``U_l diag(S_l) V_l^H``; ``spectrum`` keeps every singular value."""

    U: np.ndarray = field(repr=False)
    S: np.ndarray
    V: np.ndarray = field(repr=False)
    spectrum: np.ndarray = field(repr=False)
    hermitian: bool = True

    @property
    def l(self) -> int:
        return self.S.shape[0]

    @property
    def energy_captured(self) -> float:
        total = float(np.sum(self.spectrum))
        return 1.0 if total == 0 else float(np.sum(self.S)) / total

    def dense(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.conj().T

    def scaled(self, c: float) -> "LowRankFactorization":
        return LowRankFactorization(self.U, c * self.S, self.V, c * self.spectrum, self.hermitian)


def truncated_svd(moments: Union[MomentPair, np.ndarray], l_max: int = 64,
                  energy_tol: float = 0.99) -> LowRankFactorization:
    """Rank-``l`` truncation of a covariance.

    ``moments`` is a :class:`MomentPair` (SVD of its sample factor, never
    densified) or an explicit square matrix.  Column phases follow
    :func:`normalize_phase`.
    """
    if isinstance(moments, MomentPair):
        Q, sigma, _ = np.linalg.svd(moments.factor, full_matrices=False)
        values = sigma ** 2
        l = select_rank(values, energy_tol, l_max)
        Ql, _ = normalize_phase(Q[:, :l])
        U = np.zeros((moments.n, l), dtype=complex)
        U[moments.support] = Ql
        return LowRankFactorization(U, values[:l].copy(), U, values, hermitian=True)

    cov = np.asarray(moments)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ContractError("covariance must be a square matrix")
    Uf, values, Vh = np.linalg.svd(cov)
    l = select_rank(values, energy_tol, l_max)
    U, rot = normalize_phase(Uf[:, :l].astype(complex))
    V = Vh[:l].conj().T * rot
    scale = max(np.linalg.norm(cov), np.finfo(float).tiny)
    hermitian = (np.linalg.norm(cov - cov.conj().T) <= 1e-12 * scale
                 and np.allclose(U, V, atol=1e-8))
    if hermitian:
        V = U
    return LowRankFactorization(U, values[:l].copy(), V, values, hermitian)


@dataclass(frozen=True)
class SolutionCovariance:
    """Low-rank solution covariance ``U_x diag(S) V_x^H``."""

    U: np.ndarray = field(repr=False)
    S: np.ndarray
    V: np.ndarray = field(repr=False)
    hermitian: bool = True

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.S.shape[0]


def _as_model(model):
    return FullOrderModel(model) if isinstance(model, CoupledSystem) else model


def solve_mean(model, means: Sequence[np.ndarray], omegas: Sequence[float]) -> list:
    """Mean response at each frequency: one factorization and one solve each."""
    model = _as_model(model)
    return [model.factorize(w).solve(np.asarray(f)) for f, w in zip(means, omegas)]


def _propagate(lu, factors: LowRankFactorization, mean=None):
    rhs = [] if mean is None else [np.asarray(mean)[:, None]]
    rhs.append(factors.U)
    if not factors.hermitian:
        rhs.append(factors.V)
    X = lu.solve(np.hstack(rhs))
    offset = 0 if mean is None else 1
    Ux = X[:, offset:offset + factors.l]
    Vx = Ux if factors.hermitian else X[:, offset + factors.l:]
    cov = SolutionCovariance(Ux, factors.S.copy(), Vx, factors.hermitian)
    return (X[:, 0] if mean is not None else None), cov


def propagate_factors(model, factors: LowRankFactorization, omega: float) -> SolutionCovariance:
    """Solve ``A U_x = U`` (and ``A V_x = V`` unless Hermitian): ``l`` or ``2l`` solves."""
    return _propagate(_as_model(model).factorize(omega), factors)[1]


def propagate_moments(model, mean: np.ndarray, factors: LowRankFactorization, omega: float):
    """Mean and factor propagation sharing one factorization (``l + 1`` solves)."""
    return _propagate(_as_model(model).factorize(omega), factors, mean)


def reconstruct_covariance(sc: SolutionCovariance, rows=None, cols=None) -> np.ndarray:
    """Requested block of ``U_x diag(S) V_x^H``; the full matrix only if both are ``None``."""
    def pick(M, idx):
        if idx is None:
            return M
        idx = np.asarray(idx) if not isinstance(idx, slice) else idx
        if not isinstance(idx, slice) and idx.size and (idx.min() < -M.shape[0] or idx.max() >= M.shape[0]):
            raise ContractError(f"index out of range for dimension {M.shape[0]}")
        return M[idx]

    return (pick(sc.U, rows) * sc.S) @ pick(sc.V, cols).conj().T


def save_factors(factors: Union[SolutionCovariance, LowRankFactorization], prefix,
                 fmt: str = "mtx") -> list:
    """Write ``<prefix>_U``, ``_S`` (and ``_V`` unless Hermitian) as Matrix Market arrays or ``.npy``."""
    prefix = Path(prefix)
    parts = {"U": factors.U, "S": np.asarray(factors.S, dtype=float)[:, None]}
    if not factors.hermitian:
        parts["V"] = factors.V
    written = []
    for name, arr in parts.items():
        path = prefix.with_name(f"{prefix.name}_{name}.{fmt}")
        if fmt == "mtx":
            field_ = "real" if name == "S" else "complex"
            scipy.io.mmwrite(path, arr, field=field_, precision=17)
        elif fmt == "npy":
            np.save(path, np.ascontiguousarray(arr))
        else:
            raise ContractError(f"unknown factor format {fmt!r}")
        written.append(path)
    return written


def load_factors(prefix, fmt: str = "mtx") -> SolutionCovariance:
    """Inverse of :func:`save_factors`."""
    prefix = Path(prefix)

    def read(name):
        path = prefix.with_name(f"{prefix.name}_{name}.{fmt}")
        if not path.exists():
            return None
        return np.load(path) if fmt == "npy" else np.asarray(scipy.io.mmread(path))

    U, S, V = read("U"), read("S"), read("V")
    if U is None or S is None:
        raise FileNotFoundError(f"no factors at {prefix}")
    hermitian = V is None
    U = U.astype(complex)
    return SolutionCovariance(U, S[:, 0].astype(float), U if hermitian else V.astype(complex),
                              hermitian)
