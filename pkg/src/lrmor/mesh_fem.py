"""
Plate and cavity meshes, element matrices and the coupled plate-cavity system.

The plate is discretized with conforming Bogner-Fox-Schmit rectangles
(nodal DOFs ``w, dw/dx, dw/dy, d2w/dxdy``), the cavity with trilinear
8-node hexahedra carrying one pressure DOF per node.  Both grids are
structured, so every element of a mesh shares one element matrix; the
global matrices are obtained by scattering that matrix.

Global DOF ordering: structural DOFs ``0 .. n_s-1`` (node-major, 4 per
plate node), followed by fluid DOFs ``n_s .. n-1`` (one per cavity node).
The cavity's ``z = 0`` face nodes carry the same ids, in the same order,
as the plate nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from lrmor.errors import ConfigurationError, InterfaceError, MeshError

PLATE_DOFS_PER_NODE = 4
W, WX, WY, WXY = range(PLATE_DOFS_PER_NODE)


@dataclass(frozen=True)
class MaterialProperties:
    """Plate and fluid material data (SI units).

    Defaults are the aluminium plate / air cavity of the benchmark model.
    ``eta`` is an optional structural loss factor applied as ``(1 + i eta) K_s``.
    """

    youngs_modulus: float = 70e9
    thickness: float = 0.003
    poisson_ratio: float = 0.3
    density_plate: float = 2700.0
    density_fluid: float = 1.21
    speed_of_sound: float = 340.0
    eta: float = 0.0

    def __post_init__(self):
        for name in ("youngs_modulus", "thickness", "density_plate",
                     "density_fluid", "speed_of_sound"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(f"{name} must be strictly positive, got {value}")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ConfigurationError(
                f"poisson_ratio must lie in (0, 0.5), got {self.poisson_ratio}")
        if self.eta < 0:
            raise ConfigurationError(f"eta must be non-negative, got {self.eta}")

    @property
    def bending_stiffness(self) -> float:
        """B = E t^3 / (12 (1 - nu^2)) in N m."""
        return (self.youngs_modulus * self.thickness ** 3
                / (12.0 * (1.0 - self.poisson_ratio ** 2)))

    def bending_wavelength(self, frequency: float) -> float:
        """Free bending wavelength of the plate at ``frequency`` [Hz]."""
        omega = 2.0 * np.pi * frequency
        mass = self.density_plate * self.thickness
        return 2.0 * np.pi * (self.bending_stiffness / (mass * omega ** 2)) ** 0.25

    def acoustic_wavelength(self, frequency: float) -> float:
        return self.speed_of_sound / frequency

    def max_element_size(self, frequency: float, nodes_per_wavelength: int = 10) -> float:
        """Largest element edge resolving both wave types at ``frequency``."""
        shortest = min(self.bending_wavelength(frequency),
                       self.acoustic_wavelength(frequency))
        return shortest / nodes_per_wavelength


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if not np.isfinite(value) or value <= 0:
            raise ConfigurationError(f"{name} must be positive, got {value}")


def _check_count(**kwargs):
    for name, value in kwargs.items():
        if int(value) != value or value < 2:
            raise ConfigurationError(f"{name} must be an integer >= 2, got {value}")


@dataclass(frozen=True)
class PlateMesh:
    """Structured rectangular plate mesh in the ``z = 0`` plane.

    Node ``j * (nx + 1) + i`` sits at ``(i * lx / nx, j * ly / ny)``;
    elements list their nodes counter-clockwise starting at the lower-left
    corner.
    """

    nx: int
    ny: int
    lx: float
    ly: float
    coords: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    dof_map: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_dofs(self) -> int:
        return self.dof_map.size

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def deflection_dofs(self) -> np.ndarray:
        """Global indices of the nodal deflection (``w``) DOFs."""
        return self.dof_map[:, W].copy()


@dataclass(frozen=True)
class CavityMesh:
    """Structured box mesh; node ``k*(ny+1)*(nx+1) + j*(nx+1) + i``."""

    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    lz: float
    coords: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    dof_map: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def face_nodes(self) -> np.ndarray:
        """Node ids on the ``z = 0`` face, in plate node order."""
        return np.arange((self.nx + 1) * (self.ny + 1))


def _grid_quads(nx, ny):
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    n0 = (j * (nx + 1) + i).ravel()
    return np.stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1], axis=1)


def build_plate_mesh(lx: float, ly: float, nx: int, ny: int) -> PlateMesh:
    _check_positive(lx=lx, ly=ly)
    _check_count(nx=nx, ny=ny)
    nx, ny = int(nx), int(ny)
    x = np.linspace(0.0, lx, nx + 1)
    y = np.linspace(0.0, ly, ny + 1)
    xx, yy = np.meshgrid(x, y, indexing="xy")
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    elements = _grid_quads(nx, ny)
    dof_map = np.arange(coords.shape[0] * PLATE_DOFS_PER_NODE).reshape(-1, PLATE_DOFS_PER_NODE)
    return PlateMesh(nx, ny, float(lx), float(ly), coords, elements, dof_map)


def build_cavity_mesh(lx: float, ly: float, lz: float, nx: int, ny: int, nz: int,
                      plate: Optional[PlateMesh] = None) -> CavityMesh:
    """Box mesh; if ``plate`` is given its grid must match the ``z = 0`` face."""
    _check_positive(lx=lx, ly=ly, lz=lz)
    _check_count(nx=nx, ny=ny, nz=nz)
    nx, ny, nz = int(nx), int(ny), int(nz)
    x = np.linspace(0.0, lx, nx + 1)
    y = np.linspace(0.0, ly, ny + 1)
    z = np.linspace(0.0, lz, nz + 1)
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    coords = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    quads = _grid_quads(nx, ny)
    layer = (nx + 1) * (ny + 1)
    base = np.concatenate([quads + k * layer for k in range(nz)])
    elements = np.hstack([base, base + layer])
    cavity = CavityMesh(nx, ny, nz, float(lx), float(ly), float(lz),
                        coords, elements, np.arange(coords.shape[0]))
    if plate is not None:
        check_interface(plate, cavity)
    return cavity


def check_interface(plate: PlateMesh, cavity: CavityMesh, atol: float = 1e-12) -> None:
    """Raise :class:`InterfaceError` unless the cavity face grid equals the plate grid."""
    if (plate.nx, plate.ny) != (cavity.nx, cavity.ny):
        raise InterfaceError(
            f"plate grid {plate.nx}x{plate.ny} does not match cavity face grid "
            f"{cavity.nx}x{cavity.ny}")
    face = cavity.coords[cavity.face_nodes]
    scale = max(plate.lx, plate.ly)
    if not (np.allclose(face[:, :2], plate.coords, atol=atol * scale, rtol=0)
            and np.allclose(face[:, 2], 0.0, atol=atol * scale)):
        raise InterfaceError("plate node coordinates do not coincide with the cavity z=0 face")


# -- element matrices ---------------------------------------------------------

def _hermite(xi, h):
    """Cubic Hermite functions on [0, 1] and their first/second x-derivatives.

    Returns arrays of shape (4, len(xi)) ordered (value@0, slope@0, value@1, slope@1).
    """
    xi = np.asarray(xi, dtype=float)
    n = np.array([1 - 3 * xi**2 + 2 * xi**3,
                  h * (xi - 2 * xi**2 + xi**3),
                  3 * xi**2 - 2 * xi**3,
                  h * (-xi**2 + xi**3)])
    dn = np.array([-6 * xi + 6 * xi**2,
                   h * (1 - 4 * xi + 3 * xi**2),
                   6 * xi - 6 * xi**2,
                   h * (-2 * xi + 3 * xi**2)]) / h
    d2n = np.array([-6 + 12 * xi,
                    h * (-4 + 6 * xi),
                    6 - 12 * xi,
                    h * (-2 + 6 * xi)]) / h**2
    return n, dn, d2n


# local node corner (a, b) in {0,1}^2, CCW from lower-left
_CORNERS = ((0, 0), (1, 0), (1, 1), (0, 1))


def _bfs_tables(xi, eta, hx, hy):
    """BFS shape functions N, N_xx, N_yy, N_xy at tensor points.

    Output shape: (16, len(xi), len(eta)).
    """
    nx_, dnx, d2nx = _hermite(xi, hx)
    ny_, dny, d2ny = _hermite(eta, hy)
    N = np.empty((16, len(xi), len(eta)))
    Nxx, Nyy, Nxy = np.empty_like(N), np.empty_like(N), np.empty_like(N)
    col = 0
    for a, b in _CORNERS:
        # per DOF: (x-function index, y-function index)
        for fx, fy in ((2 * a, 2 * b), (2 * a + 1, 2 * b), (2 * a, 2 * b + 1), (2 * a + 1, 2 * b + 1)):
            N[col] = np.outer(nx_[fx], ny_[fy])
            Nxx[col] = np.outer(d2nx[fx], ny_[fy])
            Nyy[col] = np.outer(nx_[fx], d2ny[fy])
            Nxy[col] = np.outer(dnx[fx], dny[fy])
            col += 1
    return N, Nxx, Nyy, Nxy


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def bilinear(xi, eta):
    """Bilinear quad shape functions at tensor points, shape (4, len(xi), len(eta))."""
    xi, eta = np.asarray(xi, float), np.asarray(eta, float)
    lx = np.array([1 - xi, xi])
    ly = np.array([1 - eta, eta])
    return np.array([np.outer(lx[a], ly[b]) for a, b in _CORNERS])


def plate_element_matrices(hx: float, hy: float, mat: MaterialProperties):
    """16x16 bending stiffness and consistent mass of one BFS rectangle."""
    if hx <= 0 or hy <= 0:
        raise MeshError(f"singular element Jacobian (hx={hx}, hy={hy})")
    g, w = _gauss01(4)
    N, Nxx, Nyy, Nxy = _bfs_tables(g, g, hx, hy)
    wt = np.outer(w, w) * hx * hy
    nu = mat.poisson_ratio
    bend = (np.einsum("ipq,jpq,pq->ij", Nxx, Nxx, wt)
            + np.einsum("ipq,jpq,pq->ij", Nyy, Nyy, wt)
            + nu * (np.einsum("ipq,jpq,pq->ij", Nxx, Nyy, wt)
                    + np.einsum("ipq,jpq,pq->ij", Nyy, Nxx, wt))
            + 2.0 * (1.0 - nu) * np.einsum("ipq,jpq,pq->ij", Nxy, Nxy, wt))
    ke = mat.bending_stiffness * bend
    me = mat.density_plate * mat.thickness * np.einsum("ipq,jpq,pq->ij", N, N, wt)
    return 0.5 * (ke + ke.T), 0.5 * (me + me.T)


def plate_load_element(hx: float, hy: float) -> np.ndarray:
    """16x4 matrix of integrals of BFS deflection functions times bilinear functions.

    Maps nodal pressures of one element to its consistent nodal loads; it is
    also the element block of the fluid-structure coupling matrix.
    """
    g, w = _gauss01(3)
    N, _, _, _ = _bfs_tables(g, g, hx, hy)
    P = bilinear(g, g)
    return np.einsum("ipq,jpq,pq->ij", N, P, np.outer(w, w) * hx * hy)


def cavity_element_matrices(hx: float, hy: float, hz: float, mat: MaterialProperties):
    """8x8 acoustic stiffness and mass (mass carries the 1/c^2 factor)."""
    if min(hx, hy, hz) <= 0:
        raise MeshError(f"singular element Jacobian (hx={hx}, hy={hy}, hz={hz})")
    k1 = lambda h: np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    m1 = lambda h: np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
    # tensor index (a, b, c) -> local node, matching build_cavity_mesh ordering
    order = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
             (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
    kx, ky, kz = k1(hx), k1(hy), k1(hz)
    mx, my, mz = m1(hx), m1(hy), m1(hz)
    ke = np.empty((8, 8))
    me = np.empty((8, 8))
    for i, (a, b, c) in enumerate(order):
        for j, (d, e, f) in enumerate(order):
            ke[i, j] = (kx[a, d] * my[b, e] * mz[c, f]
                        + mx[a, d] * ky[b, e] * mz[c, f]
                        + mx[a, d] * my[b, e] * kz[c, f])
            me[i, j] = mx[a, d] * my[b, e] * mz[c, f]
    return ke, me / mat.speed_of_sound ** 2


def _scatter(dofs: np.ndarray, elem: np.ndarray, n_rows: int,
             col_dofs: Optional[np.ndarray] = None, n_cols: Optional[int] = None):
    col_dofs = dofs if col_dofs is None else col_dofs
    n_cols = n_rows if n_cols is None else n_cols
    nel, a = dofs.shape
    b = col_dofs.shape[1]
    rows = np.repeat(dofs, b, axis=1).ravel()
    cols = np.tile(col_dofs, (1, a)).ravel()
    vals = np.tile(elem.ravel(), nel)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()


def _plate_element_dofs(plate: PlateMesh) -> np.ndarray:
    return plate.dof_map[plate.elements].reshape(plate.n_elements, 16)


def assemble_plate(plate: PlateMesh, mat: MaterialProperties):
    """Global free-edge plate stiffness ``K_s`` and consistent mass ``M_s``."""
    ke, me = plate_element_matrices(plate.hx, plate.hy, mat)
    dofs = _plate_element_dofs(plate)
    return _scatter(dofs, ke, plate.n_dofs), _scatter(dofs, me, plate.n_dofs)


def assemble_cavity(cavity: CavityMesh, mat: MaterialProperties):
    """Global rigid-wall acoustic stiffness ``K_f`` and mass ``M_f``."""
    ke, me = cavity_element_matrices(cavity.lx / cavity.nx, cavity.ly / cavity.ny,
                                     cavity.lz / cavity.nz, mat)
    dofs = cavity.dof_map[cavity.elements]
    return _scatter(dofs, ke, cavity.n_nodes), _scatter(dofs, me, cavity.n_nodes)


def plate_load_matrix(plate: PlateMesh) -> sp.csr_matrix:
    """Sparse ``n_s x n_nodes`` map from nodal pressures to consistent nodal loads."""
    le = plate_load_element(plate.hx, plate.hy)
    return _scatter(_plate_element_dofs(plate), le, plate.n_dofs,
                    col_dofs=plate.elements, n_cols=plate.n_nodes)


def assemble_coupling(plate: PlateMesh, cavity: CavityMesh) -> sp.csr_matrix:
    """Coupling matrix ``C_sf`` (``n_s x n_f``) of surface integrals over the interface."""
    check_interface(plate, cavity)
    load = plate_load_matrix(plate).tocoo()
    cols = cavity.face_nodes[load.col]
    return sp.coo_matrix((load.data, (load.row, cols)),
                         shape=(plate.n_dofs, cavity.n_nodes)).tocsr()


# -- coupled system -----------------------------------------------------------

@dataclass(frozen=True)
class CoupledSystem:
    """Second-order coupled system ``(K - omega^2 M) x = f``.

    ``K = [[K_s, -C_sf], [0, K_f]]`` and ``M = [[M_s, 0], [rho_f C_sf^T, M_f]]``.
    """

    K: sp.csr_matrix = field(repr=False)
    M: sp.csr_matrix = field(repr=False)
    n_s: int
    n_f: int
    eta: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.n_s + self.n_f

    @property
    def structure(self) -> slice:
        return slice(0, self.n_s)

    @property
    def fluid(self) -> slice:
        return slice(self.n_s, self.n)

    def block(self, matrix: str, rows: str, cols: str) -> sp.csr_matrix:
        """Sub-block of ``K`` or ``M`` by partition name (``"s"`` or ``"f"``)."""
        a = {"K": self.K, "M": self.M}[matrix]
        part = {"s": self.structure, "f": self.fluid}
        return a[part[rows], :][:, part[cols]]

    @property
    def coupling(self) -> sp.csr_matrix:
        return -self.block("K", "s", "f")

    @property
    def structural_stiffness(self) -> sp.csr_matrix:
        """``K_s`` embedded in an ``n x n`` matrix (target of the loss factor)."""
        ks = self.block("K", "s", "s")
        return sp.block_diag([ks, sp.csr_matrix((self.n_f, self.n_f))], format="csr")


def couple(Ks, Ms, Kf, Mf, C, rho_f: float, eta: float = 0.0, meta=None) -> CoupledSystem:
    n_s, n_f = Ks.shape[0], Kf.shape[0]
    K = sp.bmat([[Ks, -C], [None, Kf]], format="csr")
    M = sp.bmat([[Ms, None], [rho_f * C.T, Mf]], format="csr")
    K.sort_indices()
    M.sort_indices()
    return CoupledSystem(K, M, n_s, n_f, eta, dict(meta or {}))


def assemble_system(plate: PlateMesh, cavity: CavityMesh, mat: MaterialProperties) -> CoupledSystem:
    Ks, Ms = assemble_plate(plate, mat)
    Kf, Mf = assemble_cavity(cavity, mat)
    C = assemble_coupling(plate, cavity)
    meta = {
        "plate.lx": plate.lx, "plate.ly": plate.ly, "plate.nx": plate.nx, "plate.ny": plate.ny,
        "cavity.lz": cavity.lz, "cavity.nz": cavity.nz,
    }
    return couple(Ks, Ms, Kf, Mf, C, mat.density_fluid, mat.eta, meta)


def dynamic_stiffness(system: CoupledSystem, omega: float) -> sp.csc_matrix:
    """``A(omega) = K - omega^2 M`` (plus ``i eta K_s`` when damped), complex CSC."""
    if omega < 0:
        raise ConfigurationError(f"omega must be non-negative, got {omega}")
    A = (system.K - omega ** 2 * system.M).astype(complex)
    if system.eta:
        A = A + 1j * system.eta * system.structural_stiffness
    return A.tocsc()


# -- fill-reducing ordering --------------------------------------------------

def nested_dissection(points: np.ndarray, leaf_size: int = 64) -> np.ndarray:
    """Geometric nested-dissection permutation for DOFs located at ``points``.

    Splits recursively at the median grid plane of the longest extent;
    each separator is numbered after the two halves it separates.  Valid as
    a separator ordering for the structured meshes of this module, whose
    elements only connect neighbouring grid planes.
    """
    order = []

    def split(idx):
        if idx.size <= leaf_size:
            order.append(idx)
            return
        pts = points[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        planes = np.unique(pts[:, axis])
        if planes.size < 3:
            order.append(idx)
            return
        mid = planes[planes.size // 2]
        c = pts[:, axis]
        split(idx[c < mid])
        split(idx[c > mid])
        order.append(idx[c == mid])

    split(np.arange(points.shape[0]))
    return np.concatenate(order)


def meshes_from_meta(meta: dict):
    """Rebuild (plate, cavity) from a system's mesh metadata, or ``None``."""
    try:
        plate = build_plate_mesh(meta["plate.lx"], meta["plate.ly"], meta["plate.nx"], meta["plate.ny"])
        cavity = build_cavity_mesh(plate.lx, plate.ly, meta["cavity.lz"], plate.nx, plate.ny,
                                   meta["cavity.nz"], plate=plate)
    except KeyError:
        return None
    return plate, cavity


def dof_coordinates(system: "CoupledSystem") -> Optional[np.ndarray]:
    """Location of every global DOF (plate DOFs at their node, z = 0)."""
    meshes = meshes_from_meta(system.meta)
    if meshes is None:
        return None
    plate, cavity = meshes
    if plate.n_dofs != system.n_s or cavity.n_nodes != system.n_f:
        return None
    s = np.column_stack([np.repeat(plate.coords, PLATE_DOFS_PER_NODE, axis=0),
                         np.zeros(plate.n_dofs)])
    return np.vstack([s, cavity.coords])


# -- Matrix Market exchange ---------------------------------------------------

def _header(system: CoupledSystem, name: str) -> str:
    lines = [f"lrmor matrix {name}", f"n_s = {system.n_s}", f"n_f = {system.n_f}",
             f"eta = {system.eta!r}"]
    lines += [f"{k} = {v!r}" for k, v in sorted(system.meta.items())]
    return "\n".join(lines)


def save_system(system: CoupledSystem, directory) -> dict:
    """Write ``K.mtx``, ``M.mtx`` and ``C_sf.mtx`` (coordinate, real, general)."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, mat in (("K", system.K), ("M", system.M), ("C_sf", system.coupling)):
        path = directory / f"{name}.mtx"
        scipy.io.mmwrite(path, sp.coo_matrix(mat), comment=_header(system, name),
                         field="real", symmetry="general", precision=17)
        paths[name] = path
    return paths


def read_mm_header(path) -> dict:
    """Parse ``key = value`` comment lines of a Matrix Market file."""
    import ast

    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("%%"):
                continue
            if not line.startswith("%"):
                break
            text = line[1:].strip()
            if "=" in text:
                key, value = (s.strip() for s in text.split("=", 1))
                try:
                    out[key] = ast.literal_eval(value)
                except (ValueError, SyntaxError):
                    out[key] = value
    return out


def load_system(directory) -> CoupledSystem:
    from pathlib import Path

    directory = Path(directory)
    head = read_mm_header(directory / "K.mtx")
    K = sp.csr_matrix(scipy.io.mmread(directory / "K.mtx"))
    M = sp.csr_matrix(scipy.io.mmread(directory / "M.mtx"))
    K.sort_indices()
    M.sort_indices()
    meta = {k: v for k, v in head.items() if "." in k}
    return CoupledSystem(K, M, int(head["n_s"]), int(head["n_f"]),
                         float(head.get("eta", 0.0)), meta)
