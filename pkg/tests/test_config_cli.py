import json
import logging

import numpy as np
import pytest

from lrmor.cli import EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, main
from lrmor.config import SCHEMA, load_config
from lrmor.errors import ConfigurationError

TINY = """\
# tiny model for pipeline tests
plate.nx = 4
plate.ny = 3
cavity.nz = 3
tbl.nk = 8
excite.samples = 20
rom.points = 114, 128
rom.order = 4
sweep.f_min = 100
sweep.f_max = 128
sweep.step = 14
sweep.keep = 114, 128   # both on the grid
seed = 3
"""


def test_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg["seed"] == 0 and cfg["rom.points"] == [114.0, 414.0]
    assert cfg.excite_frequencies() == [114.0, 414.0]
    path = tmp_path / "c.cfg"
    path.write_text(TINY)
    cfg = load_config(path, ["seed=9", "sweep.covariance = 114"])
    assert cfg["plate.nx"] == 4 and cfg["seed"] == 9
    assert cfg["sweep.keep"] == [114.0, 128.0] and cfg["sweep.covariance"] == [114.0]
    assert cfg.material().youngs_modulus == 70e9
    # the dump is itself a valid config that reproduces every value
    dumped = tmp_path / "d.cfg"
    dumped.write_text(cfg.dump())
    assert load_config(dumped).values == cfg.values
    assert len(cfg.dump().splitlines()) == len(SCHEMA)


def test_expansion_points_follow_band():
    from lrmor.config import default_expansion_points
    assert default_expansion_points(16, 500) == [114.0, 414.0]
    # affine map of the default band onto the requested one
    pts = default_expansion_points(16, 1000)
    np.testing.assert_allclose(pts, [16 + 98 * 984 / 484, 16 + 398 * 984 / 484], atol=1e-6)
    cfg = load_config(None, ["sweep.f_min=100", "sweep.f_max=200"])
    assert all(100 < p < 200 for p in cfg["rom.points"])
    cfg = load_config(None, ["sweep.f_max=1000", "rom.points=300"])
    assert cfg["rom.points"] == [300.0]


@pytest.mark.parametrize("bad", ["nope=1", "seed=abc", "seed", "excite.format=xml",
                                 "rom.format=txt", "sweep.ensembles=maybe", "rom.points=none"])
def test_bad_config(bad):
    with pytest.raises(ConfigurationError):
        load_config(None, [bad])


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.cfg")


def test_print_config(capsys):
    assert main(["assemble", "--print-config", "--set", "seed=5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed = 5\n" in out and "rom.order = 20\n" in out


def test_usage_errors(tmp_path):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["assemble", "--set", "nope=1"]) == EXIT_USAGE
    assert main(["sweep"]) == EXIT_USAGE
    assert main(["compare", "--workdir", str(tmp_path)]) == EXIT_USAGE
    assert main(["assemble", "--threads", "0", "--workdir", str(tmp_path)]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    base = ["--config", str(cfg), "--workdir", str(root / "run"), "-q", "--threads", "1"]
    codes = {}
    for stage in (["assemble"], ["excite"], ["offline"], ["sweep", "--mode", "FOM-lowrank"],
                  ["sweep", "--mode", "ROM"], ["sweep", "--mode", "FOM"], ["compare"]):
        codes[" ".join(stage)] = main(stage + base)
    return root / "run", base, codes


def test_pipeline_outputs(pipeline):
    run, _, codes = pipeline
    assert all(c == EXIT_OK for c in codes.values()), codes
    for rel in ("system/K.mtx", "system/M.mtx", "system/C_sf.mtx", "system/system.json",
                "ensembles/ensemble_114Hz.csv", "basis/basis.mtx", "basis/basis.json",
                "sweep_ROM/steps.csv", "sweep_ROM/factors_114Hz_U.mtx",
                "compare/err_cov.csv", "compare/timing_table.txt", "compare/report.txt"):
        assert (run / rel).exists(), rel
    meta = json.loads((run / "system/system.json").read_text())
    assert len(meta["dof_map_sha256"]) == 64
    header = (run / "compare/err_cov.csv").read_text().splitlines()[0]
    assert header == "f_Hz,err_cov,err_truncation"
    assert "verdict: PASS" in (run / "compare/report.txt").read_text()


def test_refuses_overwrite(pipeline):
    _, base, _ = pipeline
    assert main(["assemble"] + base) == EXIT_USAGE
    assert main(["assemble", "--force"] + base) == EXIT_OK


def test_threshold_violation_exit_code(pipeline):
    _, base, _ = pipeline
    strict = ["--set", "compare.max_err_cov=-1", "--set", "compare.max_err_cov_points=-1"]
    assert main(["compare", "--force"] + base + strict) == EXIT_THRESHOLD


def test_identical_inputs_give_zero_errors(pipeline):
    run, base, _ = pipeline
    same = ["--set", "compare.candidate=FOM-lowrank"]
    assert main(["compare", "--force"] + base + same) == EXIT_OK
    rows = np.loadtxt(run / "compare/transfer_error.csv", delimiter=",", skiprows=1, ndmin=2)
    assert np.all(rows[:, 1:] == 0)
    err = np.loadtxt(run / "compare/err_cov.csv", delimiter=",", skiprows=1, ndmin=2)
    assert np.all(err[:, 1] == 0)


def test_mismatched_grids(pipeline, tmp_path, caplog):
    run, base, _ = pipeline
    other = ["--workdir", str(tmp_path / "w")]
    cfg_args = base[:2] + ["-q"]
    # a second run with a shorter band, compared against the first run's sweep
    for stage in (["assemble"], ["sweep", "--mode", "FOM-lowrank"]):
        assert main(stage + cfg_args + other) == EXIT_OK
    short = ["--set", "sweep.f_max=114"]
    assert main(["sweep", "--mode", "ROM"] + cfg_args + other + short) == EXIT_USAGE
    # ROM needs a basis; give it one, then compare mismatched grids
    (tmp_path / "w/sweep_ROM").mkdir(parents=True, exist_ok=True)
    for src in (run / "sweep_ROM").iterdir():
        (tmp_path / "w/sweep_ROM" / src.name).write_bytes(src.read_bytes())
    summary = json.loads((tmp_path / "w/sweep_ROM/sweep.json").read_text())
    summary["frequencies"] = summary["frequencies"][:2]
    (tmp_path / "w/sweep_ROM/sweep.json").write_text(json.dumps(summary))
    with caplog.at_level(logging.ERROR, logger="lrmor"):
        assert main(["compare"] + cfg_args + other) == EXIT_USAGE
    assert "frequency grids differ" in caplog.text


def test_two_sample_smoke(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY.replace("excite.samples = 20", "excite.samples = 2"))
    base = ["--config", str(cfg), "--workdir", str(tmp_path / "run"), "-q"]
    for stage in (["assemble"], ["excite"], ["offline"], ["sweep", "--mode", "ROM"],
                  ["sweep", "--mode", "FOM-lowrank"]):
        assert main(stage + base) == EXIT_OK, stage
    ranks = np.loadtxt(tmp_path / "run/sweep_ROM/steps.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.all(ranks <= 1)
