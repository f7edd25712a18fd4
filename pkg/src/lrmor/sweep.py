"""
Frequency sweeps in three modes, error measures and the phase-time table.

Modes
-----
FOM
    Factorize ``A(omega)`` and solve every load sample; the response
    covariance is the sample covariance of the responses.
FOM-lowrank
    Truncated SVD of the load covariance, then ``l + 1`` sparse solves
    (factors plus mean) from one factorization.
ROM
    Same truncated factors, solved with the ``r x r`` Galerkin system and
    lifted back; no sparse work after the offline phase.
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from lrmor.errors import ConfigurationError, ContractError, SolverError
from lrmor.krylov import ProjectionBasis, ReducedSystem, reduce
from lrmor.mesh_fem import CoupledSystem, meshes_from_meta
from lrmor.moments import (LowRankFactorization, SolutionCovariance, estimate_moments,
                           truncated_svd)
from lrmor.solvers import FullOrderModel, SolveCounter
from lrmor.tbl import Excitation, LoadEnsemble, frequency_key

TWO_PI = 2.0 * np.pi
MODES = ("FOM", "FOM-lowrank", "ROM")
PHASES = ("svd", "factors", "assembly")


def frequency_grid(f_min: float, f_max: float, step: float) -> np.ndarray:
    """``{f_min, f_min + step, ..., f_max}``; the end point is included when it lies on the grid."""
    if f_min < 0 or f_max < f_min:
        raise ConfigurationError(f"invalid band [{f_min}, {f_max}]")
    if step <= 0:
        raise ConfigurationError(f"step must be positive, got {step}")
    count = int(np.floor((f_max - f_min) / step + 1e-9)) + 1
    return np.round(f_min + step * np.arange(count), 9)


@dataclass
class SweepConfig:
    """Band, mode and statistics settings of one sweep.

    ``covariance_frequencies`` restricts the covariance work (SVD, factors,
    assembly) to the listed frequencies; elsewhere only the mean response
    is computed.  ``None`` means every grid frequency.  Solution factors
    are retained in full length at ``keep_frequencies``.
    """

    f_min: float = 16.0
    f_max: float = 500.0
    step: float = 2.0
    mode: str = "ROM"
    probes: Sequence[int] = ()
    seed: int = 0
    n_samples: int = 1000
    l_max: int = 64
    energy_tol: float = 0.99
    covariance_frequencies: Optional[Sequence[float]] = None
    keep_frequencies: Sequence[float] = ()
    output_dofs: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_samples < 2:
            raise ConfigurationError("at least 2 samples are needed")
        if not 0 < self.energy_tol <= 1:
            raise ConfigurationError("energy_tol must lie in (0, 1]")
        frequency_grid(self.f_min, self.f_max, self.step)

    @property
    def grid(self) -> np.ndarray:
        return frequency_grid(self.f_min, self.f_max, self.step)

    def wants_covariance(self, f: float) -> bool:
        if self.covariance_frequencies is None:
            return True
        return any(abs(f - g) < 1e-6 for g in self.covariance_frequencies)

    def keeps(self, f: float) -> bool:
        return any(abs(f - g) < 1e-6 for g in self.keep_frequencies)


class EnsembleSource:
    """Load ensembles keyed by frequency, reproducible from ``seed``."""

    def __init__(self, excitation: Excitation, n_samples: int, seed: int):
        self.excitation = excitation
        self.n_samples = n_samples
        self.seed = seed

    def __call__(self, frequency: float) -> LoadEnsemble:
        return self.excitation.ensemble(frequency, frequency_key(frequency), self.n_samples,
                                        self.seed)


@dataclass
class StepResult:
    frequency: float
    mean_probes: np.ndarray
    var_probes: np.ndarray
    rank: int = 0
    energy: float = float("nan")
    residual: float = float("nan")
    timings: Dict[str, float] = field(default_factory=dict)
    solves: Dict[str, int] = field(default_factory=dict)
    covariance: bool = False
    flagged: bool = False
    message: str = ""


@dataclass
class SweepResult:
    """Per-frequency records of one sweep plus retained full-length solutions."""

    mode: str
    frequencies: np.ndarray
    probes: np.ndarray
    steps: List[StepResult]
    means: Dict[float, np.ndarray] = field(default_factory=dict, repr=False)
    factors: Dict[float, SolutionCovariance] = field(default_factory=dict, repr=False)
    spectra: Dict[float, np.ndarray] = field(default_factory=dict, repr=False)
    offline_time: float = 0.0

    @property
    def mean_traces(self) -> np.ndarray:
        """``F x P`` complex mean response at the probes (NaN at flagged steps)."""
        return np.array([s.mean_probes for s in self.steps]).reshape(len(self.steps), -1)

    @property
    def variance_traces(self) -> np.ndarray:
        return np.array([s.var_probes for s in self.steps]).reshape(len(self.steps), -1)

    @property
    def flagged(self) -> List[float]:
        return [s.frequency for s in self.steps if s.flagged]

    def trace(self, probe: int) -> np.ndarray:
        idx = list(self.probes).index(probe)
        return self.mean_traces[:, idx]


def default_probes(system: CoupledSystem) -> List[int]:
    """One plate deflection DOF and one cavity pressure DOF away from symmetry lines."""
    meshes = meshes_from_meta(system.meta)
    if meshes is None:
        return [0, system.n_s]
    plate, cavity = meshes
    target = np.array([0.31 * plate.lx, 0.37 * plate.ly])
    node = int(np.argmin(np.sum((plate.coords - target) ** 2, axis=1)))
    target3 = np.array([0.68 * plate.lx, 0.59 * plate.ly, 0.77 * cavity.lz])
    fnode = int(np.argmin(np.sum((cavity.coords - target3) ** 2, axis=1)))
    return [int(plate.dof_map[node, 0]), system.n_s + fnode]


def _full(v: np.ndarray, n: int) -> np.ndarray:
    if v.shape[0] == n:
        return v
    out = np.zeros((n,) + v.shape[1:], dtype=complex)
    out[:v.shape[0]] = v
    return out


def _nan_step(f, n_probes, message):
    nan = np.full(n_probes, np.nan)
    return StepResult(f, nan + 1j * nan, nan.copy(), flagged=True, message=message)


def run_sweep(cfg: SweepConfig, system: CoupledSystem,
              source: Callable[[float], LoadEnsemble],
              basis=None, counter: Optional[SolveCounter] = None,
              model=None) -> SweepResult:
    """Mean and covariance response over ``cfg.grid``.

    ``basis`` (a :class:`ProjectionBasis` or :class:`ReducedSystem`) is
    required in ROM mode.  A frequency whose solve fails the residual check
    is flagged, reported with a warning and skipped.
    """
    counter = SolveCounter() if counter is None else counter
    probes = np.asarray(cfg.probes if len(cfg.probes) else default_probes(system), dtype=int)
    out = probes if cfg.output_dofs is None else np.asarray(cfg.output_dofs, dtype=int)
    if np.any(probes < 0) or np.any(probes >= system.n):
        raise ConfigurationError(f"probe DOFs must lie in [0, {system.n})")

    offline = 0.0
    rs = None
    if cfg.mode == "ROM":
        if basis is None:
            raise ConfigurationError("ROM mode needs a projection basis")
        if isinstance(basis, ReducedSystem):
            rs = basis
            rs.counter = counter
        else:
            t0 = time.perf_counter()
            rs = reduce(system, basis, counter)
            offline = time.perf_counter() - t0
        offline += rs.basis.timings.get("total", 0.0)
        V_out, V_probe = rs.V[out], rs.V[probes]
    else:
        model = FullOrderModel(system, counter) if model is None else model
        model.counter = counter

    result = SweepResult(cfg.mode, cfg.grid, probes, [], offline_time=offline)
    for f in cfg.grid:
        f = float(f)
        omega = TWO_PI * f
        ens = source(f)
        snap = counter.snapshot()
        timings = dict.fromkeys(PHASES, 0.0)
        want_cov = cfg.wants_covariance(f)
        try:
            t0 = time.perf_counter()
            moments = estimate_moments(ens)
            if cfg.mode == "FOM":
                # everything counts as assembly: solve all samples, form the covariance
                lu = model.factorize(omega)
                rhs = moments.mean[:, None]
                if want_cov:
                    rhs = np.hstack([rhs, _full(moments.factor, system.n)])
                X = lu.solve(rhs)
                mean = X[:, 0]
                step = StepResult(f, mean[probes], np.zeros(len(probes)))
                if want_cov:
                    Zx = X[:, 1:]
                    block = Zx[out] @ Zx[out].conj().T
                    step.var_probes = np.sum(np.abs(Zx[probes]) ** 2, axis=1)
                    step.rank = Zx.shape[1]
                    if cfg.keeps(f):
                        result.factors[f] = SolutionCovariance(Zx, np.ones(Zx.shape[1]), Zx)
                timings["assembly"] = time.perf_counter() - t0
                step.residual = float(np.max(lu.last_residual))
            else:
                lr = None
                if want_cov:
                    lr = truncated_svd(moments, cfg.l_max, cfg.energy_tol)
                    timings["svd"] = time.perf_counter() - t0
                t1 = time.perf_counter()
                cols = [moments.mean[:, None]] + ([lr.U] if lr is not None else [])
                if lr is not None and not lr.hermitian:
                    cols.append(lr.V)
                rhs = np.hstack(cols)
                if cfg.mode == "FOM-lowrank":
                    lu = model.factorize(omega)
                    X = lu.solve(rhs)
                    residual = lu.last_residual
                else:
                    lu = rs.factorize(omega)
                    Y = lu.solve_reduced(rs.project(rhs[:system.n_s]))
                    residual = lu.last_residual
                    X = rs.lift(Y) if cfg.keeps(f) else None
                    mean_probe = V_probe @ Y[:, 0]
                timings["factors"] = time.perf_counter() - t1
                t2 = time.perf_counter()
                if cfg.mode == "ROM":
                    step = StepResult(f, mean_probe, np.zeros(len(probes)))
                else:
                    step = StepResult(f, X[probes, 0], np.zeros(len(probes)))
                if lr is not None:
                    l = lr.l
                    if cfg.mode == "ROM":
                        Uo = V_out @ Y[:, 1:1 + l]
                        Vo = Uo if lr.hermitian else V_out @ Y[:, 1 + l:]
                    else:
                        Uo = X[out, 1:1 + l]
                        Vo = Uo if lr.hermitian else X[out, 1 + l:]
                    block = (Uo * lr.S) @ Vo.conj().T
                    if cfg.output_dofs is None:
                        step.var_probes = np.real(np.diag(block))
                    else:
                        Up = V_probe @ Y[:, 1:1 + l] if cfg.mode == "ROM" else X[probes, 1:1 + l]
                        step.var_probes = np.sum(np.abs(Up) ** 2 * lr.S, axis=1)
                    step.rank, step.energy = l, lr.energy_captured
                    result.spectra[f] = lr.spectrum
                    if cfg.keeps(f):
                        Ux = X[:, 1:1 + l]
                        Vx = Ux if lr.hermitian else X[:, 1 + l:]
                        result.factors[f] = SolutionCovariance(Ux, lr.S.copy(), Vx, lr.hermitian)
                timings["assembly"] = time.perf_counter() - t2
                step.residual = float(np.max(residual))
                if cfg.keeps(f) and X is not None:
                    result.means[f] = X[:, 0]
            if cfg.mode == "FOM" and cfg.keeps(f):
                result.means[f] = mean
            step.covariance = want_cov
        except SolverError as exc:
            warnings.warn(f"{cfg.mode}: skipping {f:g} Hz: {exc}", RuntimeWarning, stacklevel=2)
            step = _nan_step(f, len(probes), str(exc))
        step.timings = timings
        step.timings["total"] = sum(timings[p] for p in PHASES)
        step.solves = counter.since(snap)
        result.steps.append(step)
    return result


# -- error measures -----------------------------------------------------------

def transfer_error(fom_trace, rom_trace, fom_frequencies=None, rom_frequencies=None):
    """``max | |p_FOM| - |p_ROM| |`` and that value divided by ``max |p_FOM|``.

    Frequencies flagged in either trace (NaN) are left out.
    """
    a = np.asarray(fom_trace)
    b = np.asarray(rom_trace)
    if a.shape != b.shape:
        raise ContractError(f"trace shapes differ: {a.shape} vs {b.shape}")
    if fom_frequencies is not None or rom_frequencies is not None:
        fa = np.asarray(fom_frequencies, float)
        fb = np.asarray(rom_frequencies, float)
        if fa.shape != fb.shape or not np.allclose(fa, fb, rtol=0, atol=1e-9):
            raise ContractError("traces are not on the same frequency grid")
    ok = np.isfinite(a) & np.isfinite(b)
    if not np.any(ok):
        return float("nan"), float("nan")
    diff = np.abs(np.abs(a[ok]) - np.abs(b[ok]))
    err = float(diff.max())
    peak = float(np.abs(a[ok]).max())
    return err, (err / peak if peak > 0 else (0.0 if err == 0 else float("inf")))


def _as_factors(c):
    if isinstance(c, SolutionCovariance):
        return c.U, np.asarray(c.S), c.V
    if isinstance(c, LowRankFactorization):
        return c.U, np.asarray(c.S), c.V
    if isinstance(c, tuple) and len(c) == 3:
        return c
    return None


def _factored_norm(L, weights, R):
    """``|| L diag(weights) R^H ||_F`` from thin QR factors of ``L`` and ``R``."""
    _, RL = np.linalg.qr(L)
    _, RR = np.linalg.qr(R)
    return float(np.linalg.norm((RL * weights) @ RR.conj().T))


def covariance_error(fom_cov, rom_cov) -> float:
    """``||Sigma_FOM - Sigma_ROM||_F / ||Sigma_FOM||_F``.

    Factored inputs (``SolutionCovariance``, ``LowRankFactorization`` or a
    ``(U, S, V)`` tuple) are never densified: the difference is written as
    ``[U_a U_b] diag(S_a, -S_b) [V_a V_b]^H`` and its norm taken from the
    triangular factors of two thin QRs.
    """
    fa, fb = _as_factors(fom_cov), _as_factors(rom_cov)
    if fa is None or fb is None:
        A = fom_cov if fa is None else (fa[0] * fa[1]) @ fa[2].conj().T
        B = rom_cov if fb is None else (fb[0] * fb[1]) @ fb[2].conj().T
        A, B = np.asarray(A), np.asarray(B)
        if A.shape != B.shape:
            raise ContractError(f"covariance shapes differ: {A.shape} vs {B.shape}")
        den = np.linalg.norm(A)
        if den == 0:
            raise ContractError("reference covariance is zero")
        return float(np.linalg.norm(A - B) / den)
    Ua, Sa, Va = fa
    Ub, Sb, Vb = fb
    if Ua.shape[0] != Ub.shape[0] or Va.shape[0] != Vb.shape[0]:
        raise ContractError("factor row dimensions differ")
    den = _factored_norm(Ua, Sa, Va)
    if den == 0:
        raise ContractError("reference covariance is zero")
    if all(np.array_equal(x, y) for x, y in zip(fa, fb)):
        # identical factors: exact zero rather than the QR rounding floor
        return 0.0
    num = _factored_norm(np.hstack([Ua, Ub]), np.concatenate([Sa, -np.asarray(Sb)]),
                         np.hstack([Va, Vb]))
    return num / den


# -- timing table -------------------------------------------------------------

TIMING_ROWS = ("Compute V (offline)", "SVD", "Low-rank factors", "Assembly", "Total")
_ROW_KEYS = {"SVD": "svd", "Low-rank factors": "factors", "Assembly": "assembly"}


@dataclass
class TimingTable:
    """Mean seconds per frequency step (covariance steps only) per mode."""

    columns: List[str]
    rows: Dict[str, Dict[str, Optional[float]]]
    steps: Dict[str, int]
    first_step: Dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        if not self.columns:
            return ""
        lines = ["{:<22}".format("Operation") + "".join(f"{c:>16}" for c in self.columns)]
        for name in TIMING_ROWS:
            cells = []
            for c in self.columns:
                v = self.rows[name].get(c)
                if v is None:
                    cells.append(f"{'-':>16}")
                elif name == TIMING_ROWS[0]:
                    cells.append(f"{v:>12.3f} s*")
                else:
                    cells.append(f"{v:>14.3f} s")
            lines.append(f"{name:<22}" + "".join(cells))
        if "ROM" in self.first_step:
            lines.append(f"* offline; first ROM step incl. offline: {self.first_step['ROM']:.3f} s")
        return "\n".join(lines) + "\n"

    def amortization_step(self, rom: str = "ROM", reference: str = "FOM-lowrank") -> Optional[int]:
        """First step count ``k`` with ``offline + k*ROM <= k*reference``."""
        if rom not in self.columns or reference not in self.columns:
            return None
        off = self.rows[TIMING_ROWS[0]][rom] or 0.0
        per_rom = self.rows["Total"][rom]
        per_ref = self.rows["Total"][reference]
        if per_ref <= per_rom:
            return None
        return int(np.ceil(off / (per_ref - per_rom))) if off > 0 else 1


def timing_report(results) -> TimingTable:
    """Phase-time table from ``{mode: SweepResult}`` (or a list of results)."""
    if isinstance(results, dict):
        results = list(results.values())
    columns = [r.mode for r in results]
    rows: Dict[str, Dict[str, Optional[float]]] = {name: {} for name in TIMING_ROWS}
    steps, first = {}, {}
    for r in results:
        cov = [s for s in r.steps if s.covariance and not s.flagged]
        steps[r.mode] = len(cov)
        rows[TIMING_ROWS[0]][r.mode] = r.offline_time if r.mode == "ROM" else None
        for name, key in _ROW_KEYS.items():
            vals = [s.timings.get(key, 0.0) for s in cov]
            # FOM books the whole step as assembly
            used = r.mode != "FOM" or key == "assembly"
            rows[name][r.mode] = (float(np.mean(vals)) if vals else 0.0) if used else None
        total = sum(v for k, v in ((n, rows[n][r.mode]) for n in _ROW_KEYS) if v is not None)
        rows["Total"][r.mode] = total
        if r.mode == "ROM":
            first["ROM"] = total + r.offline_time
    return TimingTable(columns, rows, steps, first)


# -- CSV output ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace_csv(path, frequencies, trace) -> Path:
    """Columns ``f_Hz, re, im, abs``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_Hz", "re", "im", "abs"])
        for f, p in zip(frequencies, trace):
            w.writerow([_fmt(f), _fmt(np.real(p)), _fmt(np.imag(p)), _fmt(np.abs(p))])
    return path


def write_err_cov_csv(path, frequencies, errors, truncation=None) -> Path:
    """Columns ``f_Hz, err_cov`` (plus ``err_truncation`` when given)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_Hz", "err_cov"] + (["err_truncation"] if truncation is not None else []))
        for i, (f, e) in enumerate(zip(frequencies, errors)):
            row = [_fmt(f), _fmt(e)]
            if truncation is not None:
                row.append(_fmt(truncation[i]))
            w.writerow(row)
    return path


def write_spectrum_csv(path, values) -> Path:
    """Columns ``index, value`` (1-based)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(np.asarray(values), start=1):
            w.writerow([i, _fmt(v)])
    return path


def write_timing_csv(path, table: TimingTable) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["operation"] + table.columns)
        for name in TIMING_ROWS:
            w.writerow([name] + ["" if table.rows[name].get(c) is None
                                 else f"{table.rows[name][c]:.6f}" for c in table.columns])
    return path
