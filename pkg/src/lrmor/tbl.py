"""
Turbulent boundary layer wall-pressure synthesis and stochastic plate loads.

Pressure realizations are superpositions of uncorrelated wall plane waves:
each wave ``(kx_h, ky_j)`` carries the amplitude
``sqrt(Phi(kx_h, ky_j, omega) dkx dky) / (2 pi)`` and an independent phase
drawn uniformly on ``[0, 2 pi)``.  The field is synthesized on a source grid,
transferred to the plate nodes by nearest-neighbour lookup and integrated
against the plate deflection functions (bilinear within each element).

The analytic wall-pressure model is a Goody single-point spectrum shaped in
wavenumber by a separable Corcos form::

    Phi(kx, ky, w) = Phi_pp(w) * 4 pi^2 * Lx(kx) * Ly(ky)

where ``Lx`` and ``Ly`` are unit-area Lorentzians centred on the convective
wavenumber ``w / U_c`` and on zero, with half-widths ``alpha_x w / U_c``
and ``alpha_y w / U_c``.  With this normalization
``(1 / 4 pi^2) * integral(Phi dkx dky) = Phi_pp(w)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from lrmor.errors import ConfigurationError, ContractError
from lrmor.mesh_fem import PlateMesh, plate_load_matrix

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TabulatedSpectrum:
    """Phi_pp sampled on a regular (f, kx, ky) grid; linear in (kx, ky), zero outside."""

    f_hz: np.ndarray
    kx: np.ndarray
    ky: np.ndarray
    values: np.ndarray  # (len(f), len(kx), len(ky))

    def __call__(self, kx, ky, omega):
        f = omega / TWO_PI
        i = int(np.argmin(np.abs(self.f_hz - f)))
        interp = RegularGridInterpolator((self.kx, self.ky), self.values[i],
                                         bounds_error=False, fill_value=0.0)
        kx, ky = np.broadcast_arrays(np.asarray(kx, float), np.asarray(ky, float))
        out = interp(np.column_stack([kx.ravel(), ky.ravel()]))
        return np.maximum(out, 0.0).reshape(kx.shape)


@dataclass(frozen=True)
class SpectrumModel:
    """Wall-pressure wavenumber-frequency spectrum parameters.

    ``tau_w`` defaults to the value placing the Goody point-spectrum peak at
    about 100 Hz for the default boundary layer (see :func:`point_spectrum`).
    """

    kind: str = "corcos-goody"
    U_inf: float = 230.0
    uc_ratio: float = 0.7
    alpha_x: float = 0.116
    alpha_y: float = 0.7
    delta: float = 0.1
    tau_w: float = 0.00903
    rho: float = 1.21
    nu: float = 1.5e-5
    table: Optional[TabulatedSpectrum] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("corcos-goody", "tabulated"):
            raise ConfigurationError(f"unknown spectrum kind {self.kind!r}")
        if self.kind == "tabulated" and self.table is None:
            raise ConfigurationError("tabulated spectrum requires a table")
        if not self.U_inf * self.uc_ratio > 0:
            raise ConfigurationError(
                f"convective velocity must be positive, got {self.U_inf * self.uc_ratio}")
        for name in ("alpha_x", "alpha_y", "delta", "tau_w", "rho", "nu"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    @property
    def U_c(self) -> float:
        return self.U_inf * self.uc_ratio


def point_spectrum(model: SpectrumModel, omega):
    """Goody single-point wall-pressure spectrum [Pa^2 s]."""
    omega = np.asarray(omega, dtype=float)
    u_tau2 = model.tau_w / model.rho
    r_t = model.delta * u_tau2 / (model.U_inf * model.nu)
    x = omega * model.delta / model.U_inf
    num = 3.0 * x ** 2
    den = (x ** 0.75 + 0.5) ** 3.7 + (1.1 * r_t ** -0.57 * x) ** 7
    return model.tau_w ** 2 * model.delta / model.U_inf * num / den


def _lorentzian(k, centre, width):
    return width / (np.pi * (width ** 2 + (k - centre) ** 2))


def wall_pressure_spectrum(model: SpectrumModel, kx, ky, omega):
    """Phi(kx, ky, omega) [Pa^2 m^2 s]; broadcasts over ``kx`` and ``ky``."""
    if omega <= 0:
        raise ConfigurationError(f"omega must be positive, got {omega}")
    if model.kind == "tabulated":
        return model.table(kx, ky, omega)
    kc = omega / model.U_c
    shape = (_lorentzian(np.asarray(kx, float), kc, model.alpha_x * kc)
             * _lorentzian(np.asarray(ky, float), 0.0, model.alpha_y * kc))
    return point_spectrum(model, omega) * 4.0 * np.pi ** 2 * shape


def load_spectrum_csv(path, **kwargs) -> SpectrumModel:
    """Read a tabulated spectrum with columns ``f_Hz, kx, ky, phi_pp``.

    Rows must cover a full regular grid in (f, kx, ky); order is free.
    """
    data = np.genfromtxt(path, delimiter=",", names=True)
    try:
        f, kx, ky, phi = (np.asarray(data[c], float) for c in ("f_Hz", "kx", "ky", "phi_pp"))
    except ValueError as exc:
        raise ConfigurationError(f"{path}: expected columns f_Hz, kx, ky, phi_pp") from exc
    uf, ukx, uky = np.unique(f), np.unique(kx), np.unique(ky)
    if len(f) != len(uf) * len(ukx) * len(uky):
        raise ConfigurationError(f"{path}: rows do not form a regular (f, kx, ky) grid")
    values = np.zeros((len(uf), len(ukx), len(uky)))
    values[np.searchsorted(uf, f), np.searchsorted(ukx, kx), np.searchsorted(uky, ky)] = phi
    if np.any(values < 0):
        raise ConfigurationError(f"{path}: negative spectral density")
    return SpectrumModel(kind="tabulated", table=TabulatedSpectrum(uf, ukx, uky, values), **kwargs)


@dataclass(frozen=True)
class WavenumberGrid:
    kx: np.ndarray
    ky: np.ndarray
    dkx: float
    dky: float

    @property
    def shape(self):
        return len(self.kx), len(self.ky)


def make_wavenumber_grid(omega_max: float, U_c: float, n: int = 32,
                         factor: float = 1.5, ny: Optional[int] = None) -> WavenumberGrid:
    """Uniform grid symmetric about zero with ``max|k| = factor * omega_max / U_c``."""
    if U_c <= 0 or omega_max <= 0:
        raise ConfigurationError("omega_max and U_c must be positive")
    if factor <= 1.0:
        raise ConfigurationError("factor must exceed 1 so the convective peak is covered")
    ny = n if ny is None else ny
    if n < 2 or ny < 2:
        raise ConfigurationError("wavenumber grid needs at least 2 points per direction")
    kmax = factor * omega_max / U_c
    kx = np.linspace(-kmax, kmax, n)
    ky = np.linspace(-kmax, kmax, ny)
    return WavenumberGrid(kx, ky, kx[1] - kx[0], ky[1] - ky[0])


# -- randomness ---------------------------------------------------------------

def frequency_key(frequency: float) -> int:
    """Grid-independent frequency index for seeding: the frequency in mHz."""
    return int(round(float(frequency) * 1000.0))


def sample_seed(seed: int, frequency_index: int, sample_index: int) -> np.random.SeedSequence:
    """Counter-based sub-seed: a pure function of the three integers."""
    return np.random.SeedSequence([int(seed), int(frequency_index), int(sample_index)])


def draw_phases(rng_seed, nx: int, ny: int) -> np.ndarray:
    """I.i.d. phases, uniform on ``[0, 2 pi)``.

    ``rng_seed`` may be an int, a :class:`~numpy.random.SeedSequence` or a
    tuple ``(seed, frequency_index, sample_index)``.
    """
    if isinstance(rng_seed, tuple):
        rng_seed = sample_seed(*rng_seed)
    rng = np.random.default_rng(rng_seed)
    return np.mod(TWO_PI * rng.random((nx, ny)), TWO_PI)


# -- synthesis ----------------------------------------------------------------

def wave_amplitudes(model: SpectrumModel, grid: WavenumberGrid, omega: float) -> np.ndarray:
    kx, ky = np.meshgrid(grid.kx, grid.ky, indexing="ij")
    phi = wall_pressure_spectrum(model, kx, ky, omega)
    return np.sqrt(phi * grid.dkx * grid.dky) / TWO_PI


def _check_phases(phases, shape):
    phases = np.asarray(phases, dtype=float)
    if phases.shape[-2:] != tuple(shape):
        raise ContractError(f"phases have shape {phases.shape[-2:]}, grid is {tuple(shape)}")
    return phases


def superpose(amplitudes, grid: WavenumberGrid, points, phases) -> np.ndarray:
    """Plane-wave sum at arbitrary ``points`` (P x 2).

    ``phases`` is ``(Nx, Ny)`` or a batch ``(S, Nx, Ny)``; the result is
    ``(P,)`` or ``(S, P)`` accordingly.
    """
    amplitudes = np.asarray(amplitudes, float)
    phases = _check_phases(phases, grid.shape)
    if amplitudes.shape != grid.shape:
        raise ContractError(f"amplitudes {amplitudes.shape} do not match grid {grid.shape}")
    points = np.atleast_2d(np.asarray(points, float))
    coef = amplitudes * np.exp(1j * phases)
    ex = np.exp(1j * np.outer(points[:, 0], grid.kx))  # (P, Nx)
    ey = np.exp(1j * np.outer(points[:, 1], grid.ky))  # (P, Ny)
    t = coef @ ey.T  # (..., Nx, P)
    return np.einsum("...hp,ph->...p", t, ex)


def superpose_on_grid(amplitudes, grid: WavenumberGrid, xs, ys, phases) -> np.ndarray:
    """Plane-wave sum on the tensor grid ``xs x ys``, flattened y-major.

    Equivalent to :func:`superpose` on ``points = [(x_i, y_j)]`` ordered
    ``j * len(xs) + i`` but exploits separability of the exponentials.
    """
    amplitudes = np.asarray(amplitudes, float)
    phases = _check_phases(phases, grid.shape)
    coef = amplitudes * np.exp(1j * phases)
    ex = np.exp(1j * np.outer(np.asarray(xs, float), grid.kx))  # (Px, Nx)
    ey = np.exp(1j * np.outer(np.asarray(ys, float), grid.ky))  # (Py, Ny)
    field_ = ey @ np.swapaxes(coef, -1, -2) @ ex.T  # (..., Py, Px)
    return field_.reshape(field_.shape[:-2] + (-1,))


def synthesize_pressure_field(model: SpectrumModel, grid: WavenumberGrid, omega: float,
                              points, phases) -> np.ndarray:
    """Complex wall pressure [Pa] at ``points`` for one or many phase realizations."""
    return superpose(wave_amplitudes(model, grid, omega), grid, points, phases)


# -- transfer to the structural mesh -----------------------------------------

def nearest_source(source_points, target_points, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest source point for every target point.

    Exhaustive search; ties go to the lowest source index.
    """
    src = np.atleast_2d(np.asarray(source_points, float))
    tgt = np.atleast_2d(np.asarray(target_points, float))
    if src.shape[0] == 0:
        raise ConfigurationError("source point set is empty")
    out = np.empty(tgt.shape[0], dtype=np.intp)
    for start in range(0, tgt.shape[0], chunk):
        block = tgt[start:start + chunk]
        d2 = ((block[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


def transfer_to_mesh(source_points, source_pressures, target) -> np.ndarray:
    """Nearest-neighbour transfer of pressures (last axis = source point) to plate nodes."""
    points = target.coords if isinstance(target, PlateMesh) else target
    pressures = np.asarray(source_pressures)
    if pressures.shape[-1] != np.atleast_2d(source_points).shape[0]:
        raise ContractError("source_pressures do not match source_points")
    return pressures[..., nearest_source(source_points, points)]


def assemble_force_vector(nodal_pressures, plate: PlateMesh, load_matrix=None) -> np.ndarray:
    """Consistent plate loads from nodal pressures.

    ``(N_nodes,) -> (n_s,)``; a batch ``(S, N_nodes)`` gives ``(n_s, S)``
    (one column per sample).
    """
    L = plate_load_matrix(plate) if load_matrix is None else load_matrix
    p = np.asarray(nodal_pressures)
    if p.shape[-1] != plate.n_nodes:
        raise ContractError(f"expected {plate.n_nodes} nodal pressures, got {p.shape[-1]}")
    return L @ p.T if p.ndim == 2 else L @ p


# -- ensembles ----------------------------------------------------------------

@dataclass(frozen=True)
class LoadEnsemble:
    """``I`` force samples at one frequency.

    Only the structural block is stored (``forces``: ``n_s x I``); fluid
    rows of the full-length vectors are identically zero.
    """

    frequency: float
    forces: np.ndarray = field(repr=False)
    n: int
    seed: int = 0
    frequency_index: int = 0

    @property
    def n_s(self) -> int:
        return self.forces.shape[0]

    @property
    def n_samples(self) -> int:
        return self.forces.shape[1]

    @property
    def samples(self) -> np.ndarray:
        """Full ``n x I`` sample matrix (fluid rows zero)."""
        out = np.zeros((self.n, self.n_samples), dtype=complex)
        out[:self.n_s] = self.forces
        return out


def default_source_grid(plate: PlateMesh, refine: float = 1.6):
    """Tensor source grid not commensurate with the plate nodes."""
    nx = max(2, int(round(refine * plate.nx)))
    ny = max(2, int(round(refine * plate.ny)))
    return np.linspace(0.0, plate.lx, nx + 1), np.linspace(0.0, plate.ly, ny + 1)


class Excitation:
    """Pressure model bound to a plate: produces load ensembles per frequency."""

    def __init__(self, model: SpectrumModel, grid: WavenumberGrid, plate: PlateMesh,
                 n_total: Optional[int] = None, source_grid=None):
        self.model = model
        self.grid = grid
        self.plate = plate
        self.n_total = plate.n_dofs if n_total is None else int(n_total)
        xs, ys = default_source_grid(plate) if source_grid is None else source_grid
        self.xs, self.ys = np.asarray(xs, float), np.asarray(ys, float)
        xx, yy = np.meshgrid(self.xs, self.ys, indexing="xy")
        self.source_points = np.column_stack([xx.ravel(), yy.ravel()])
        self.nearest = nearest_source(self.source_points, plate.coords)
        self.load_matrix = plate_load_matrix(plate)

    def phases(self, seed: int, frequency_index: int, n_samples: int) -> np.ndarray:
        nx, ny = self.grid.shape
        return np.stack([draw_phases(sample_seed(seed, frequency_index, i), nx, ny)
                         for i in range(n_samples)])

    def forces(self, omega: float, phases) -> np.ndarray:
        """Structural force block ``(n_s, S)`` for a batch of phase matrices."""
        amp = wave_amplitudes(self.model, self.grid, omega)
        pressures = superpose_on_grid(amp, self.grid, self.xs, self.ys, phases)
        nodal = pressures[..., self.nearest]
        return assemble_force_vector(np.atleast_2d(nodal), self.plate, self.load_matrix)

    def ensemble(self, frequency: float, frequency_index: int, n_samples: int,
                 seed: int) -> LoadEnsemble:
        if n_samples < 2:
            raise ContractError(f"need at least 2 samples, got {n_samples}")
        phases = self.phases(seed, frequency_index, n_samples)
        f = self.forces(TWO_PI * frequency, phases)
        return LoadEnsemble(float(frequency), f, self.n_total, int(seed), int(frequency_index))


def generate_ensemble(model: SpectrumModel, grid: WavenumberGrid, plate: PlateMesh,
                      frequencies: Sequence[float], n_samples: int, seed: int,
                      n_total: Optional[int] = None, source_grid=None) -> list:
    exc = Excitation(model, grid, plate, n_total, source_grid)
    return [exc.ensemble(f, frequency_key(f), n_samples, seed) for f in frequencies]


# -- files --------------------------------------------------------------------

def _ensemble_meta(ens: LoadEnsemble) -> dict:
    return {"f_Hz": ens.frequency, "n": ens.n, "n_s": ens.n_s, "samples": ens.n_samples,
            "seed": ens.seed, "frequency_index": ens.frequency_index}


def save_ensemble(ens: LoadEnsemble, path, fmt: str = "npy") -> Path:
    """Write one frequency's ensemble.

    ``npy``: the ``n_s x I`` complex block, with a JSON sidecar ``<path>.json``.
    ``csv``: a ``# key=value`` comment line, then the header
    ``dof,re_0,im_0,re_1,im_1,...`` and one row per structural DOF.
    Fluid rows (``n_s .. n-1``) are zero and not written.
    """
    path = Path(path)
    meta = _ensemble_meta(ens)
    if fmt == "npy":
        path = path.with_suffix(".npy")
        np.save(path, np.ascontiguousarray(ens.forces))
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    elif fmt == "csv":
        path = path.with_suffix(".csv")
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(f"{k}={v!r}" for k, v in sorted(meta.items())) + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["dof"] + [f"{p}_{i}" for i in range(ens.n_samples) for p in ("re", "im")])
            inter = np.empty((ens.n_s, 2 * ens.n_samples))
            inter[:, 0::2] = ens.forces.real
            inter[:, 1::2] = ens.forces.imag
            for dof, row in enumerate(inter):
                writer.writerow([dof] + [repr(float(v)) for v in row])
    else:
        raise ConfigurationError(f"unknown ensemble format {fmt!r}")
    return path


def load_ensemble(path) -> LoadEnsemble:
    import ast

    path = Path(path)
    if path.suffix == ".npy":
        meta = json.loads(path.with_suffix(".json").read_text())
        forces = np.load(path)
    elif path.suffix == ".csv":
        with open(path) as fh:
            first = fh.readline()
            meta = dict(item.split("=", 1) for item in first[1:].split())
            meta = {k: ast.literal_eval(v) for k, v in meta.items()}
            data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
        forces = data[:, 1::2] + 1j * data[:, 2::2]
    else:
        raise ConfigurationError(f"unknown ensemble file type {path.suffix!r}")
    return LoadEnsemble(float(meta["f_Hz"]), forces, int(meta["n"]), int(meta["seed"]),
                        int(meta["frequency_index"]))
