"""Sparse direct solves of the full-order dynamic stiffness, with solve accounting."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from lrmor.errors import SolverError
from lrmor.mesh_fem import CoupledSystem, dof_coordinates, dynamic_stiffness, nested_dissection

RESIDUAL_TOL = 1e-8


@dataclass
class SolveCounter:
    """Counts factorizations and right-hand sides solved (one per column).

    Extra solves spent on iterative refinement are kept apart in
    ``refinement_solves``.
    """

    sparse_factorizations: int = 0
    sparse_solves: int = 0
    dense_factorizations: int = 0
    dense_solves: int = 0
    refinement_solves: int = 0

    def snapshot(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def since(self, snap: dict) -> dict:
        return {k: getattr(self, k) - v for k, v in snap.items()}


def check_residual(A, X, B, frequency=None, tol: float = RESIDUAL_TOL,
                   extended: bool = False) -> np.ndarray:
    """Relative residual per column; raises :class:`SolverError` above ``tol``.

    ``extended`` forms ``A X - B`` in long double.  Near a resonance the
    double-precision product carries rounding noise of order
    ``eps |A| |X|``, which can exceed ``tol`` on its own.
    """
    if extended:
        R = (np.asarray(A, np.clongdouble) @ np.asarray(X, np.clongdouble)
             - np.asarray(B, np.clongdouble)).astype(complex)
    else:
        R = A @ X - B
    bn = np.linalg.norm(B, axis=0)
    rn = np.linalg.norm(R, axis=0)
    rel = np.where(bn > 0, rn / np.where(bn > 0, bn, 1.0), rn)
    if not np.all(np.isfinite(rel)) or np.any(rel > tol):
        where = "" if frequency is None else f" at {frequency:.6g} Hz"
        raise SolverError(f"relative residual {np.nanmax(rel):.3e} exceeds {tol:g}{where}"
                          " (near-singular dynamic stiffness)", frequency=frequency)
    return rel


class SparseFactorization:
    """LU of ``A(omega)``; reused for every right-hand side at this frequency."""

    def __init__(self, A, omega, counter: SolveCounter, perm=None, residual_tol=RESIDUAL_TOL):
        self.A = A
        self.omega = omega
        self.frequency = omega / (2 * np.pi)
        self.counter = counter
        self.residual_tol = residual_tol
        self.last_residual = None
        self._perm = perm
        self._real = not np.iscomplexobj(A.data) or not np.any(A.data.imag)
        mat = A.real if self._real else A
        if perm is not None:
            mat = mat[perm][:, perm]
        mat = mat.tocsc()
        # the real part of a complex matrix is a strided view SuperLU rejects
        mat.data = np.ascontiguousarray(mat.data)
        try:
            self._lu = spla.splu(mat, permc_spec="NATURAL" if perm is not None else "COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"factorization failed at {self.frequency:.6g} Hz: {exc}",
                              frequency=self.frequency) from exc
        counter.sparse_factorizations += 1

    def _solve_raw(self, B):
        if self._perm is not None:
            B = B[self._perm]
        if self._real:
            if np.iscomplexobj(B):
                # real and imaginary parts in one multi-column call
                m = B.shape[1]
                Y = self._lu.solve(np.hstack([B.real, B.imag]))
                X = Y[:, :m] + 1j * Y[:, m:]
            else:
                X = self._lu.solve(np.ascontiguousarray(B))
        else:
            X = self._lu.solve(np.asarray(B, dtype=complex))
        if self._perm is not None:
            out = np.empty_like(X)
            out[self._perm] = X
            X = out
        return X

    def solve(self, B) -> np.ndarray:
        B = np.asarray(B)
        vector = B.ndim == 1
        B2 = B.reshape(B.shape[0], -1).astype(complex)
        X = self._solve_raw(B2)
        self.counter.sparse_solves += B2.shape[1]
        try:
            self.last_residual = check_residual(self.A, X, B2, self.frequency, self.residual_tol)
        except SolverError:
            # one step of iterative refinement before giving up on this frequency
            X = X + self._solve_raw(B2 - self.A @ X)
            self.counter.refinement_solves += B2.shape[1]
            self.last_residual = check_residual(self.A, X, B2, self.frequency, self.residual_tol)
        return X[:, 0] if vector else X


class FullOrderModel:
    """Full-order solver: one sparse LU per frequency.

    Uses a geometric nested-dissection ordering when the mesh parameters
    are known, else SuperLU's COLAMD.
    """

    def __init__(self, system: CoupledSystem, counter: Optional[SolveCounter] = None,
                 residual_tol: float = RESIDUAL_TOL, ordering: str = "auto"):
        self.system = system
        self.counter = SolveCounter() if counter is None else counter
        self.residual_tol = residual_tol
        self.perm = None
        if ordering == "auto":
            coords = dof_coordinates(system)
            if coords is not None:
                self.perm = nested_dissection(coords)
        elif ordering != "colamd":
            raise ValueError(f"unknown ordering {ordering!r}")

    @property
    def n(self) -> int:
        return self.system.n

    def operator(self, omega: float):
        return dynamic_stiffness(self.system, omega)

    def factorize(self, omega: float) -> SparseFactorization:
        return SparseFactorization(self.operator(omega), omega, self.counter, self.perm,
                                   self.residual_tol)
