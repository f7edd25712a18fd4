import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from lrmor.errors import ConfigurationError, InterfaceError, MeshError
from lrmor.mesh_fem import (PLATE_DOFS_PER_NODE, WX, MaterialProperties, assemble_cavity,
                            assemble_coupling, assemble_plate, assemble_system, build_cavity_mesh,
                            build_plate_mesh, dynamic_stiffness, load_system, plate_load_matrix,
                            save_system)

# hand evaluations of the dispersion relations (see test bodies for the formulas)
BENDING_STIFFNESS = 173.07692307692307     # 70e9 * 0.003**3 / (12 * 0.91)
BENDING_WAVELENGTH_500 = 0.24101466493459114
WAVENUMBER_500 = 9.239978392911155         # 2 pi 500 / 340
OMEGA_114 = 716.2831250184728


def test_plate_mesh_counts():
    p = build_plate_mesh(1.0, 1.0, 2, 2)
    assert p.n_elements == 4 and p.n_nodes == 9
    assert p.n_dofs == 9 * PLATE_DOFS_PER_NODE
    np.testing.assert_allclose(p.coords[4], [0.5, 0.5])
    assert build_plate_mesh(1.0, 1.0, 10, 10).n_elements == 100
    again = build_plate_mesh(1.0, 1.0, 2, 2)
    assert np.array_equal(p.coords, again.coords) and np.array_equal(p.elements, again.elements)


def test_elements_counter_clockwise():
    p = build_plate_mesh(0.5, 0.3, 3, 2)
    xy = p.coords[p.elements]
    signed = 0.5 * np.sum(xy[:, :, 0] * np.roll(xy[:, :, 1], -1, axis=1)
                          - np.roll(xy[:, :, 0], -1, axis=1) * xy[:, :, 1], axis=1)
    np.testing.assert_allclose(signed, p.hx * p.hy)


def test_cavity_mesh_counts():
    c = build_cavity_mesh(1, 1, 1, 2, 2, 2)
    assert c.n_elements == 8 and c.n_nodes == 27


@pytest.mark.parametrize("args", [(0.0, 1.0, 2, 2), (1.0, 1.0, 0, 2), (1.0, -1.0, 2, 2)])
def test_bad_plate_mesh(args):
    with pytest.raises((MeshError, ConfigurationError)):
        build_plate_mesh(*args)


def test_interface_mismatch():
    p = build_plate_mesh(1.0, 1.0, 4, 4)
    with pytest.raises(InterfaceError):
        build_cavity_mesh(1.0, 1.0, 1.0, 4, 3, 2, plate=p)
    with pytest.raises(InterfaceError):
        build_cavity_mesh(1.0, 1.2, 1.0, 4, 4, 2, plate=p)


def test_material_constants(mat):
    assert mat.bending_stiffness == pytest.approx(BENDING_STIFFNESS, rel=1e-12)
    assert mat.bending_wavelength(500.0) == pytest.approx(BENDING_WAVELENGTH_500, rel=1e-12)
    assert mat.acoustic_wavelength(500.0) == pytest.approx(0.68)
    assert mat.max_element_size(500.0) == pytest.approx(BENDING_WAVELENGTH_500 / 10)
    assert 2 * np.pi * 500 / mat.speed_of_sound == pytest.approx(WAVENUMBER_500, rel=1e-12)


def test_default_desk_mesh_resolves_500hz(mat):
    # 0.48 m / 20 elements must resolve the bending wave with ten nodes per wavelength
    assert 0.48 / 20 <= BENDING_WAVELENGTH_500 / 10
    assert 0.45 / 20 <= 0.68 / 10


@pytest.mark.parametrize("bad", [dict(thickness=0.0), dict(poisson_ratio=0.5), dict(eta=-0.1)])
def test_material_validation(bad):
    with pytest.raises(ConfigurationError):
        MaterialProperties(**bad)


def test_plate_null_space(mat):
    p = build_plate_mesh(0.48, 0.40, 5, 4)
    K, M = assemble_plate(p, mat)
    scale = abs(K).max()
    const = np.zeros(p.n_dofs)
    const[p.dof_map[:, 0]] = 1.0
    assert np.abs(K @ const).max() < 1e-10 * scale
    # rigid rotation w = x, dw/dx = 1 is strain free
    tilt = np.zeros(p.n_dofs)
    tilt[p.dof_map[:, 0]] = p.coords[:, 0]
    tilt[p.dof_map[:, WX]] = 1.0
    assert np.abs(K @ tilt).max() < 1e-10 * scale
    assert abs(K - K.T).max() < 1e-12 * scale
    # translational mass equals the plate mass
    assert const @ (M @ const) == pytest.approx(mat.density_plate * mat.thickness * p.area)


def _free_plate_frequencies(mat, n, count=6):
    p = build_plate_mesh(0.48, 0.40, n, n)
    K, M = assemble_plate(p, mat)
    w2 = sla.eigh(K.toarray(), M.toarray(), eigvals_only=True)
    return np.sqrt(np.abs(w2[3:3 + count])) / (2 * np.pi)


def test_free_plate_convergence(mat):
    f4, f8, f16 = (_free_plate_frequencies(mat, n) for n in (4, 8, 16))
    d1, d2 = np.abs(f4 - f8), np.abs(f8 - f16)
    assert np.all(d2 < d1)
    assert np.all(d2 / f16 < 0.02)


def test_cavity_null_space_and_box_mode(mat):
    c = build_cavity_mesh(1.0, 1.0, 1.0, 10, 10, 10)
    K, M = assemble_cavity(c, mat)
    assert np.abs(K @ np.ones(c.n_nodes)).max() < 1e-12 * abs(K).max()
    w2 = sla.eigh(K.toarray(), M.toarray(), eigvals_only=True, subset_by_index=[0, 3])
    f = np.sqrt(np.abs(w2)) / (2 * np.pi)
    assert f[0] < 1e-3
    # axial rigid-wall mode of a 1 m box: c / (2 L) = 170 Hz (threefold)
    np.testing.assert_allclose(f[1:], 170.0, rtol=0.02)


def test_coupling_partition_of_unity():
    p = build_plate_mesh(0.48, 0.40, 4, 3)
    c = build_cavity_mesh(0.48, 0.40, 0.3, 4, 3, 2, plate=p)
    C = assemble_coupling(p, c).toarray()
    assert C.shape == (p.n_dofs, c.n_nodes)
    w = p.deflection_dofs()
    assert C[w].sum() == pytest.approx(p.area, rel=1e-12)
    # column sums over deflection rows: tributary area of each face node
    i = np.rint(p.coords[:, 0] / p.hx).astype(int)
    j = np.rint(p.coords[:, 1] / p.hy).astype(int)
    weight = np.where((i == 0) | (i == p.nx), 0.5, 1.0) * np.where((j == 0) | (j == p.ny), 0.5, 1.0)
    np.testing.assert_allclose(C[w][:, c.face_nodes].sum(axis=0), weight * p.hx * p.hy, rtol=1e-12)
    assert np.all(C[:, p.n_nodes:] == 0)


def test_load_matrix_resultants():
    p = build_plate_mesh(0.48, 0.40, 4, 3)
    L = plate_load_matrix(p)
    w = p.deflection_dofs()
    assert (L @ np.ones(p.n_nodes))[w].sum() == pytest.approx(p.area, rel=1e-12)
    assert np.all(L @ np.zeros(p.n_nodes) == 0)
    # p = x is reproduced exactly by bilinear interpolation
    resultant = (L @ p.coords[:, 0])[w].sum()
    assert resultant == pytest.approx(p.area * p.lx / 2, rel=1e-10)


def test_block_structure(small_system, small_meshes, mat):
    s = small_system
    plate, cavity = small_meshes
    assert s.n_s == plate.n_dofs and s.n_f == cavity.n_nodes
    assert s.block("M", "s", "f").nnz == 0 or abs(s.block("M", "s", "f")).max() == 0
    assert s.block("K", "f", "s").nnz == 0 or abs(s.block("K", "f", "s")).max() == 0
    C = assemble_coupling(plate, cavity)
    assert abs(s.block("K", "s", "f") + C).max() == 0
    assert abs(s.block("M", "f", "s") - mat.density_fluid * C.T).max() < 1e-15


def test_dynamic_stiffness(small_system):
    s = small_system
    A0 = dynamic_stiffness(s, 0.0)
    assert abs(A0 - s.K).max() == 0
    assert OMEGA_114 == pytest.approx(2 * np.pi * 114, rel=1e-12)
    A = dynamic_stiffness(s, OMEGA_114)
    union = (abs(s.K) + abs(s.M)) != 0
    # entries of A lie inside pattern(K) | pattern(M)
    pattern_A = sp.csr_matrix(abs(A) != 0)
    assert (pattern_A - pattern_A.multiply(union)).nnz == 0
    assert abs(A - A.T).max() > 0
    with pytest.raises(ConfigurationError):
        dynamic_stiffness(s, -1.0)


def test_loss_factor(small_meshes):
    mat = MaterialProperties(eta=0.02)
    s = assemble_system(*small_meshes, mat)
    A = dynamic_stiffness(s, 100.0)
    np.testing.assert_allclose(A.imag.toarray(), 0.02 * s.structural_stiffness.toarray())


def test_matrix_market_roundtrip(small_system, tmp_path):
    save_system(small_system, tmp_path)
    back = load_system(tmp_path)
    assert back.n_s == small_system.n_s and back.n_f == small_system.n_f
    assert abs(back.K - small_system.K).max() == 0
    assert abs(back.M - small_system.M).max() == 0
    assert back.meta == small_system.meta
    first = (tmp_path / "K.mtx").read_bytes()
    save_system(small_system, tmp_path)
    assert (tmp_path / "K.mtx").read_bytes() == first
