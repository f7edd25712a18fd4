"""
Second-order Krylov moment matching and Galerkin reduction.

Around an expansion point ``sigma`` the transfer function of
``(K - omega^2 M) x = g`` is expanded in ``mu = omega^2 - sigma^2``::

    x(mu) = sum_k mu^k (A(sigma)^-1 M)^k A(sigma)^-1 g

so the block Krylov space spanned by ``s_0 = A(sigma)^-1 G`` and
``s_k = A(sigma)^-1 M s_{k-1}`` (k < q) matches ``q`` moments of every
input in ``G``.  One sparse LU of ``A(sigma)`` serves all levels.
Columns are orthogonalized level by level (block Arnoldi), which spans the
same space as the raw recurrence while keeping it numerically independent.

Orthonormality is taken in the inner product weighted by ``diag(K)``.
Structural displacements and cavity pressures differ by many orders of
magnitude; balancing them keeps the reduced operator well conditioned
without changing the span, hence without changing the moments matched.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.io
import scipy.linalg as sla

from lrmor.errors import ContractError, DegenerateInputError, ExpansionPointError, SolverError
from lrmor.mesh_fem import CoupledSystem
from lrmor.moments import normalize_phase
from lrmor.solvers import RESIDUAL_TOL, FullOrderModel, SolveCounter, check_residual

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ExpansionConfig:
    """Expansion points [Hz], moment order per point and the input block per point."""

    frequencies: Sequence[float]
    inputs: Sequence[np.ndarray] = field(repr=False)
    order: int = 20
    deflation_tol: float = 1e-10

    def __post_init__(self):
        if len(self.frequencies) == 0:
            raise ContractError("at least one expansion point is required")
        if self.order < 1:
            raise ContractError(f"order must be >= 1, got {self.order}")
        if len(self.inputs) != len(self.frequencies):
            raise ContractError("one input block per expansion point is required")
        for block in self.inputs:
            if np.asarray(block).size == 0:
                raise ContractError("empty input block")


@dataclass
class ProjectionBasis:
    """Orthonormal columns ``V`` (``n x r``) plus construction provenance."""

    V: np.ndarray = field(repr=False)
    expansion_frequencies: List[float] = field(default_factory=list)
    order: int = 0
    input_counts: List[int] = field(default_factory=list)
    deflation_log: List[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.V.shape[1]

    def orthonormality_error(self) -> float:
        """``||V^H W V - I||_F`` with ``W = diag(weights)^2``."""
        W = self.V if self.weights is None else self.weights[:, None] * self.V
        return float(np.linalg.norm(W.conj().T @ W - np.eye(self.r)))


def dof_weights(system) -> np.ndarray:
    """``sqrt|diag K|`` with zero entries replaced by the largest weight."""
    w = np.sqrt(np.abs(system.K.diagonal())).astype(float)
    if not np.any(w > 0):
        return np.ones_like(w)
    w[w == 0] = w.max()
    return w


class _Accumulator:
    """Growing orthonormal column set with deflation.

    A new block is projected against all accepted columns in one block
    Gram-Schmidt sweep, then orthonormalized within itself column by column.
    A column whose remaining norm falls below ``tol`` times its original norm
    is deflated.  The survivors go through the same two steps once more
    (block CGS2), which restores orthogonality lost to cancellation while
    keeping all work against the accepted set in matrix-matrix products.
    """

    def __init__(self, n: int, tol: float, capacity: int = 64):
        self.tol = tol
        self._Q = np.empty((n, capacity), dtype=complex)
        self.k = 0

    @property
    def Q(self) -> np.ndarray:
        return self._Q[:, :self.k]

    def _grow(self, extra):
        need = self.k + extra
        if need > self._Q.shape[1]:
            cap = max(need, 2 * self._Q.shape[1])
            Q = np.empty((self._Q.shape[0], cap), dtype=complex)
            Q[:, :self.k] = self._Q[:, :self.k]
            self._Q = Q

    def _sweep(self, B, ref):
        """One projection against ``Q`` plus in-block Gram-Schmidt; returns (P, kept)."""
        if self.k:
            Q = self.Q
            # conjugate the narrow block rather than copying Q
            B -= Q @ (B.conj().T @ Q).conj().T
        P = np.empty_like(B)
        kept = []
        for c in range(B.shape[1]):
            v = B[:, c]
            if ref[c] == 0:
                continue
            nv = np.linalg.norm(v)
            for _ in range(2):
                if not kept or nv <= self.tol * ref[c]:
                    break
                W = P[:, :len(kept)]
                v = v - W @ (v.conj() @ W).conj()
                prev, nv = nv, np.linalg.norm(v)
                if nv > 0.5 * prev:
                    break
            if nv <= self.tol * ref[c]:
                continue
            P[:, len(kept)] = v / nv
            kept.append(c)
        return P[:, :len(kept)], kept

    chunk = 32

    def add(self, block: np.ndarray):
        """Orthogonalize ``block`` and append survivors; return accepted column indices."""
        B = np.array(block, dtype=complex, copy=True)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[1] > self.chunk:
            # wide blocks go in chunks so in-block work stays small
            kept = []
            for s in range(0, B.shape[1], self.chunk):
                kept += [s + c for c in self._add(B[:, s:s + self.chunk])]
            return kept
        return self._add(B)

    def _add(self, B):
        P, kept = self._sweep(B, np.linalg.norm(B, axis=0))
        if not kept:
            return []
        P, again = self._sweep(P, np.ones(P.shape[1]))
        kept = [kept[i] for i in again]
        P, _ = normalize_phase(P)
        self._grow(P.shape[1])
        self._Q[:, self.k:self.k + P.shape[1]] = P
        self.k += P.shape[1]
        return kept


def orthonormalize(blocks, tol: float = 1e-10, log: Optional[list] = None,
                   labels: Optional[Sequence[dict]] = None,
                   weights: Optional[np.ndarray] = None) -> ProjectionBasis:
    """Orthonormal basis of the span of ``blocks`` with deflation.

    ``labels`` (one dict per column across all blocks) annotate deflation
    log entries; the default label is the running column index.  With
    ``weights`` the columns are orthonormal in ``<x, y> = (w x)^H (w y)``.
    """
    if isinstance(blocks, np.ndarray):
        blocks = [blocks]
    blocks = [np.atleast_2d(np.asarray(b).T).T for b in blocks]
    if not blocks or sum(b.shape[1] for b in blocks) == 0:
        raise DegenerateInputError("no columns to orthonormalize")
    log = [] if log is None else log
    acc = _Accumulator(blocks[0].shape[0], tol, sum(b.shape[1] for b in blocks))
    w = None if weights is None else np.asarray(weights, float)[:, None]
    col = 0
    for b in blocks:
        kept = set(acc.add(b if w is None else w * b))
        for c in range(b.shape[1]):
            if c not in kept:
                entry = {"column": col + c, "stage": "orthonormalize"}
                if labels is not None:
                    entry.update(labels[col + c])
                log.append(entry)
        col += b.shape[1]
    if acc.k == 0:
        raise DegenerateInputError("all candidate columns were deflated")
    V = acc.Q.copy() if w is None else acc.Q / w
    return ProjectionBasis(V, deflation_log=log, weights=None if w is None else w[:, 0])


def _factorize_at(model, sigma_hz):
    try:
        return model.factorize(TWO_PI * sigma_hz)
    except SolverError as exc:
        raise ExpansionPointError(
            f"dynamic stiffness is singular at the expansion point {sigma_hz:g} Hz; "
            "shift the expansion point off the resonance", frequency=sigma_hz) from exc


def krylov_block(system, sigma: float, inputs: np.ndarray, q: int, tol: float = 1e-10,
                 orthogonalize: bool = True, log: Optional[list] = None, point: int = 0,
                 model=None, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Moment-matching block at the expansion angular frequency ``sigma`` [rad/s].

    With ``orthogonalize=False`` the raw recurrence ``s_0 = A^-1 G``,
    ``s_k = A^-1 M s_{k-1}`` is returned as ``n x (m q)``, levels
    concatenated.  Otherwise each level is orthonormalized against the
    previous ones before the next application of ``A^-1 M``; deflated
    directions are dropped (and logged as ``{point, level, input}``).
    The returned columns are orthonormal in the ``weights`` inner product
    (plain Euclidean when ``weights`` is None).
    """
    model = FullOrderModel(system) if model is None else model
    M = system.M
    G = np.asarray(inputs, dtype=complex)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[1] == 0:
        raise ContractError("krylov_block needs at least one input vector")
    if q < 1:
        raise ContractError(f"order must be >= 1, got {q}")
    lu = _factorize_at(model, sigma / TWO_PI)

    if not orthogonalize:
        levels = [lu.solve(G)]
        for _ in range(1, q):
            levels.append(lu.solve(M @ levels[-1]))
        return np.hstack(levels)

    log = [] if log is None else log
    w = np.ones(G.shape[0]) if weights is None else np.asarray(weights, float)
    w = w[:, None]
    inp = _Accumulator(G.shape[0], tol, G.shape[1])
    lineage = inp.add(w * G)
    for c in sorted(set(range(G.shape[1])) - set(lineage)):
        log.append({"point": point, "level": -1, "input": c, "stage": "input"})
    if not lineage:
        raise DegenerateInputError("all input vectors are zero or dependent")

    acc = _Accumulator(G.shape[0], tol, len(lineage) * q)
    S = lu.solve(inp.Q / w)
    for level in range(q):
        kept = acc.add(w * S)
        for c in sorted(set(range(S.shape[1])) - set(kept)):
            log.append({"point": point, "level": level, "input": lineage[c], "stage": "krylov"})
        lineage = [lineage[c] for c in kept]
        if not kept or level == q - 1:
            break
        new = acc.Q[:, acc.k - len(kept):] / w
        S = lu.solve(M @ new)
    return acc.Q / w


def build_basis(system: CoupledSystem, cfg: ExpansionConfig, model=None) -> ProjectionBasis:
    """Global basis: Krylov blocks of every expansion point, orthonormalized once together."""
    model = FullOrderModel(system) if model is None else model
    weights = dof_weights(system)
    log: list = []
    blocks = []
    t0 = time.perf_counter()
    for p, (f, G) in enumerate(zip(cfg.frequencies, cfg.inputs)):
        blocks.append(krylov_block(system, TWO_PI * f, G, cfg.order, cfg.deflation_tol,
                                   log=log, point=p, model=model, weights=weights))
    t1 = time.perf_counter()
    labels = [{"point": p, "level": None, "input": None}
              for p, b in enumerate(blocks) for _ in range(b.shape[1])]
    basis = orthonormalize(blocks, cfg.deflation_tol, log=log, labels=labels, weights=weights)
    t2 = time.perf_counter()
    basis.expansion_frequencies = [float(f) for f in cfg.frequencies]
    basis.order = int(cfg.order)
    basis.input_counts = [int(np.atleast_2d(np.asarray(G).T).shape[0]) for G in cfg.inputs]
    basis.timings = {"krylov": t1 - t0, "orthonormalize": t2 - t1, "total": t2 - t0}
    return basis


# -- reduced system -----------------------------------------------------------

class ReducedFactorization:
    """Dense LU of ``K_r - omega^2 M_r``; ``solve`` projects, solves and lifts."""

    def __init__(self, rs: "ReducedSystem", omega: float):
        self.rs = rs
        self.omega = omega
        self.frequency = omega / TWO_PI
        self.A_r = rs.operator(omega)
        if rs.r == 0 or not np.all(np.isfinite(self.A_r)):
            raise SolverError("invalid reduced operator", frequency=self.frequency)
        self._lu = sla.lu_factor(self.A_r, check_finite=False)
        if np.any(np.diag(self._lu[0]) == 0):
            raise SolverError(f"singular reduced operator at {self.frequency:.6g} Hz",
                              frequency=self.frequency)
        rs.counter.dense_factorizations += 1
        self.last_residual = None

    refinement_steps = 2

    def _refine(self, X, B):
        # residual in extended precision; X itself stays double
        A = self.A_r.astype(np.clongdouble)
        for _ in range(self.refinement_steps):
            R = (B.astype(np.clongdouble) - A @ X.astype(np.clongdouble)).astype(complex)
            X = X + sla.lu_solve(self._lu, R, check_finite=False)
            self.rs.counter.refinement_solves += B.shape[1]
        return X

    def solve_reduced(self, rhs_r) -> np.ndarray:
        rhs_r = np.asarray(rhs_r, dtype=complex)
        B = rhs_r.reshape(rhs_r.shape[0], -1)
        X = sla.lu_solve(self._lu, B, check_finite=False)
        self.rs.counter.dense_solves += B.shape[1]
        try:
            self.last_residual = check_residual(self.A_r, X, B, self.frequency, RESIDUAL_TOL)
        except SolverError:
            X = self._refine(X, B)
            self.last_residual = check_residual(self.A_r, X, B, self.frequency, RESIDUAL_TOL,
                                                extended=True)
        return X.reshape(rhs_r.shape)

    def solve(self, B) -> np.ndarray:
        """Full-length approximation ``V (A_r^-1 V^H B)``."""
        return self.rs.lift(self.solve_reduced(self.rs.project(B)))


class ReducedSystem:
    """Galerkin projection ``K_r = V^H K V``, ``M_r = V^H M V``."""

    def __init__(self, K_r, M_r, basis: ProjectionBasis, D_r=None, eta: float = 0.0,
                 counter: Optional[SolveCounter] = None):
        self.K_r = K_r
        self.M_r = M_r
        self.D_r = D_r
        self.eta = eta
        self.basis = basis
        self.counter = SolveCounter() if counter is None else counter

    @property
    def r(self) -> int:
        return self.K_r.shape[0]

    @property
    def V(self) -> np.ndarray:
        return self.basis.V

    def operator(self, omega: float) -> np.ndarray:
        A = self.K_r - omega ** 2 * self.M_r
        if self.eta and self.D_r is not None:
            A = A + 1j * self.eta * self.D_r
        return A

    def project(self, f) -> np.ndarray:
        """``f_r = V^H f``; rows where ``f`` is zero are skipped when ``f`` is shorter."""
        f = np.asarray(f)
        V = self.V[:f.shape[0]]
        return V.conj().T @ f

    def lift(self, x_r) -> np.ndarray:
        return lift(self.basis, x_r)

    def factorize(self, omega: float) -> ReducedFactorization:
        return ReducedFactorization(self, omega)


def reduce(system: CoupledSystem, basis: ProjectionBasis, counter=None) -> ReducedSystem:
    V = basis.V
    Vh = V.conj().T
    K_r = Vh @ (system.K @ V)
    M_r = Vh @ (system.M @ V)
    D_r = None
    if system.eta:
        D_r = Vh @ (system.structural_stiffness @ V)
    return ReducedSystem(K_r, M_r, basis, D_r, system.eta, counter)


def solve_reduced(rs: ReducedSystem, omega: float, rhs_reduced) -> np.ndarray:
    return rs.factorize(omega).solve_reduced(rhs_reduced)


def lift(basis: ProjectionBasis, x_r) -> np.ndarray:
    return basis.V @ np.asarray(x_r)


# -- files --------------------------------------------------------------------

def save_basis(basis: ProjectionBasis, path, fmt: str = "mtx") -> Path:
    """Write ``V`` (Matrix Market array, or ``.npy``) and a JSON sidecar."""
    path = Path(path)
    if fmt == "mtx":
        path = path.with_suffix(".mtx")
        scipy.io.mmwrite(path, basis.V, field="complex", precision=17)
    elif fmt == "npy":
        path = path.with_suffix(".npy")
        np.save(path, np.ascontiguousarray(basis.V))
    else:
        raise ContractError(f"unknown basis format {fmt!r}")
    meta = {"n": basis.n, "r": basis.r, "expansion_frequencies": basis.expansion_frequencies,
            "order": basis.order, "input_counts": basis.input_counts,
            "deflation_log": basis.deflation_log, "format": fmt,
            "weights": None if basis.weights is None else [float(x) for x in basis.weights]}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_basis(path) -> ProjectionBasis:
    path = Path(path)
    if path.suffix == ".json":
        meta = json.loads(path.read_text())
        path = path.with_suffix("." + meta.get("format", "mtx"))
    else:
        meta = json.loads(path.with_suffix(".json").read_text())
    V = np.load(path) if path.suffix == ".npy" else np.asarray(scipy.io.mmread(path))
    return ProjectionBasis(np.asarray(V, dtype=complex), meta["expansion_frequencies"],
                           meta["order"], meta["input_counts"], meta["deflation_log"],
                           weights=None if meta.get("weights") is None else np.asarray(meta["weights"]))
