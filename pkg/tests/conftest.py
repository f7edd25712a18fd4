import numpy as np
import pytest
import scipy.sparse as sp

from lrmor.mesh_fem import (CoupledSystem, MaterialProperties, assemble_system, build_cavity_mesh,
                            build_plate_mesh)


@pytest.fixture(scope="session")
def mat():
    return MaterialProperties()


@pytest.fixture(scope="session")
def small_meshes():
    plate = build_plate_mesh(0.48, 0.40, 6, 5)
    cavity = build_cavity_mesh(0.48, 0.40, 0.45, 6, 5, 4, plate=plate)
    return plate, cavity


@pytest.fixture(scope="session")
def small_system(small_meshes, mat):
    return assemble_system(*small_meshes, mat)


def random_spd(n, rng, shift=1.0):
    Q = rng.standard_normal((n, n))
    return Q @ Q.T / n + shift * np.eye(n)


def toy_system(n, seed=0, n_s=None):
    """Dense SPD pencil wrapped as a CoupledSystem (no mesh metadata)."""
    rng = np.random.default_rng(seed)
    K = random_spd(n, rng, 1.0) * 1e4
    M = random_spd(n, rng, 0.5)
    n_s = n if n_s is None else n_s
    return CoupledSystem(sp.csr_matrix(K), sp.csr_matrix(M), n_s, n - n_s)


def random_psd(n, rank, rng, complex_=True):
    Z = rng.standard_normal((n, rank))
    if complex_:
        Z = Z + 1j * rng.standard_normal((n, rank))
    return Z @ Z.conj().T


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_acceptance(number, title, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
