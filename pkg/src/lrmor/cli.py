"""
Command-line pipeline: ``assemble -> excite -> offline -> sweep -> compare``.

Every stage reads only the config and files written by earlier stages
under ``workdir``.  Exit codes: 0 success, 1 compare thresholds violated,
2 usage or configuration, 3 numerical failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from lrmor.config import SCHEMA, RunConfig, load_config
from lrmor.errors import (ConfigurationError, ContractError, DegenerateInputError, LrmorError,
                          SolverError)

log = logging.getLogger("lrmor")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(LrmorError):
    pass


class NumericalFailure(LrmorError):
    pass


# -- paths --------------------------------------------------------------------

def _fname(f: float) -> str:
    return f"{float(f):g}Hz"


def system_dir(cfg: RunConfig) -> Path:
    return cfg.workdir / "system"


def ensemble_path(cfg: RunConfig, f: float) -> Path:
    return cfg.workdir / "ensembles" / f"ensemble_{_fname(f)}.{cfg['excite.format']}"


def basis_path(cfg: RunConfig) -> Path:
    return cfg.workdir / "basis" / f"basis.{cfg['rom.format']}"


def sweep_dir(cfg: RunConfig, mode: str) -> Path:
    return cfg.workdir / f"sweep_{mode}"


def _guard(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {existing[0]} (use --force)")


def _require(path: Path, stage: str):
    if not Path(path).exists():
        raise UsageError(f"missing {path}; run '{stage}' first")


# -- shared builders ----------------------------------------------------------

def _meshes(cfg: RunConfig):
    from lrmor.mesh_fem import build_cavity_mesh, build_plate_mesh

    plate = build_plate_mesh(cfg["plate.lx"], cfg["plate.ly"], cfg["plate.nx"], cfg["plate.ny"])
    cavity = build_cavity_mesh(cfg["plate.lx"], cfg["plate.ly"], cfg["cavity.lz"],
                               cfg["plate.nx"], cfg["plate.ny"], cfg["cavity.nz"], plate=plate)
    return plate, cavity


def _load_system(cfg: RunConfig):
    from lrmor.mesh_fem import load_system

    _require(system_dir(cfg) / "K.mtx", "assemble")
    system = load_system(system_dir(cfg))
    expected = {"plate.lx": cfg["plate.lx"], "plate.ly": cfg["plate.ly"],
                "plate.nx": cfg["plate.nx"], "plate.ny": cfg["plate.ny"],
                "cavity.lz": cfg["cavity.lz"], "cavity.nz": cfg["cavity.nz"]}
    for k, v in expected.items():
        if k in system.meta and not np.isclose(float(system.meta[k]), float(v)):
            raise UsageError(f"system files were assembled with {k} = {system.meta[k]}, "
                             f"config says {v}; rerun 'assemble --force'")
    return system


def _excitation(cfg: RunConfig, plate, n_total: int):
    from lrmor.tbl import Excitation, default_source_grid, make_wavenumber_grid

    model = cfg.spectrum()
    grid = make_wavenumber_grid(2 * np.pi * cfg["sweep.f_max"], model.U_c, cfg["tbl.nk"],
                                cfg["tbl.kmax_factor"])
    return Excitation(model, grid, plate, n_total,
                      default_source_grid(plate, cfg["tbl.source_refine"]))


def _ensemble_source(cfg: RunConfig, system):
    from lrmor.sweep import EnsembleSource
    from lrmor.tbl import load_ensemble

    if cfg["sweep.ensembles"] == "files":
        def read(f):
            path = ensemble_path(cfg, f)
            _require(path, "excite")
            return load_ensemble(path)
        return read
    plate, _ = _meshes(cfg)
    return EnsembleSource(_excitation(cfg, plate, system.n), cfg["excite.samples"], cfg["seed"])


# -- stages -------------------------------------------------------------------

def cmd_assemble(cfg: RunConfig, force: bool = False) -> int:
    from lrmor.mesh_fem import assemble_system, save_system

    out = system_dir(cfg)
    targets = [out / "K.mtx", out / "M.mtx", out / "C_sf.mtx", out / "system.json"]
    _guard(targets, force)
    plate, cavity = _meshes(cfg)
    system = assemble_system(plate, cavity, cfg.material())
    save_system(system, out)
    digest = hashlib.sha256(np.ascontiguousarray(plate.dof_map, dtype=np.int64).tobytes()
                            + np.ascontiguousarray(cavity.face_nodes, dtype=np.int64).tobytes())
    meta = {"n": system.n, "n_s": system.n_s, "n_f": system.n_f,
            "dof_map_sha256": digest.hexdigest(), "eta": system.eta,
            **{k: system.meta[k] for k in sorted(system.meta)}}
    (out / "system.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    log.info("assembled n = %d (structure %d, fluid %d) -> %s", system.n, system.n_s,
             system.n_f, out)
    print(f"n = {system.n}")
    return EXIT_OK


def cmd_excite(cfg: RunConfig, force: bool = False) -> int:
    from lrmor.tbl import frequency_key, save_ensemble

    meta_path = system_dir(cfg) / "system.json"
    _require(meta_path, "assemble")
    n = int(json.loads(meta_path.read_text())["n"])
    freqs = cfg.excite_frequencies()
    _guard([ensemble_path(cfg, f) for f in freqs], force)
    plate, _ = _meshes(cfg)
    exc = _excitation(cfg, plate, n)
    ensemble_path(cfg, freqs[0]).parent.mkdir(parents=True, exist_ok=True)
    for f in freqs:
        ens = exc.ensemble(f, frequency_key(f), cfg["excite.samples"], cfg["seed"])
        path = save_ensemble(ens, ensemble_path(cfg, f), cfg["excite.format"])
        log.info("ensemble %g Hz: %d samples -> %s", f, ens.n_samples, path)
    return EXIT_OK


def cmd_offline(cfg: RunConfig, force: bool = False) -> int:
    from lrmor.krylov import ExpansionConfig, build_basis, save_basis
    from lrmor.moments import estimate_moments, truncated_svd
    from lrmor.tbl import load_ensemble

    target = basis_path(cfg)
    _guard([target, target.with_suffix(".json")], force)
    system = _load_system(cfg)
    inputs = []
    input_time = 0.0
    for f in cfg["rom.points"]:
        path = ensemble_path(cfg, f)
        _require(path, "excite")
        ens = load_ensemble(path)
        t0 = time.perf_counter()
        moments = estimate_moments(ens)
        lr = truncated_svd(moments, cfg["rank.l_max"], cfg["rank.energy_tol"])
        input_time += time.perf_counter() - t0
        cols = [moments.mean[:, None], lr.U] + ([] if lr.hermitian else [lr.V])
        inputs.append(np.hstack(cols))
        log.info("expansion point %g Hz: l = %d (%.4f of the spectrum)", f, lr.l,
                 lr.energy_captured)
    ecfg = ExpansionConfig(list(cfg["rom.points"]), inputs, cfg["rom.order"],
                           cfg["rom.deflation_tol"])
    basis = build_basis(system, ecfg)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_basis(basis, target, cfg["rom.format"])
    (target.parent / "offline_time.json").write_text(
        json.dumps({"seconds": input_time + basis.timings.get("total", 0.0)}) + "\n")
    log.info("basis r = %d, %d deflated candidates -> %s", basis.r, len(basis.deflation_log),
             target)
    print(f"r = {basis.r}")
    return EXIT_OK


def _write_sweep(res, out: Path):
    from lrmor.moments import save_factors
    from lrmor.sweep import write_spectrum_csv, write_trace_csv

    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(res.probes):
        write_trace_csv(out / f"trace_dof{int(p)}.csv", res.frequencies, res.mean_traces[:, i])
    with (out / "steps.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_Hz", "rank", "energy", "flagged"]
                   + [f"var_dof{int(p)}" for p in res.probes])
        for s in res.steps:
            w.writerow([repr(s.frequency), s.rank, repr(float(s.energy)), int(s.flagged)]
                       + [repr(float(v)) for v in s.var_probes])
    # timings and residuals vary run to run; kept apart from the deterministic files
    with (out / "timings.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_Hz", "covariance", "svd", "factors", "assembly", "total", "residual"]
                   + list(res.steps[0].solves) if res.steps else [])
        for s in res.steps:
            w.writerow([repr(s.frequency), int(s.covariance)]
                       + [f"{s.timings.get(k, 0.0):.6f}" for k in
                          ("svd", "factors", "assembly", "total")]
                       + [f"{s.residual:.3e}"] + [s.solves[k] for k in s.solves])
    (out / "offline_time.json").write_text(json.dumps({"seconds": res.offline_time}) + "\n")
    for f, spec in res.spectra.items():
        if f in res.factors:
            write_spectrum_csv(out / f"spectrum_{_fname(f)}.csv", spec)
    for f, sc in res.factors.items():
        save_factors(sc, out / f"factors_{_fname(f)}")
    for f, m in res.means.items():
        np.save(out / f"mean_{_fname(f)}.npy", np.asarray(m))
    summary = {"mode": res.mode, "frequencies": [float(f) for f in res.frequencies],
               "probes": [int(p) for p in res.probes], "flagged": res.flagged,
               "kept": sorted(float(f) for f in res.factors)}
    (out / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def cmd_sweep(cfg: RunConfig, mode: str, force: bool = False) -> int:
    from lrmor.krylov import load_basis
    from lrmor.sweep import MODES, SweepConfig, run_sweep

    if mode not in MODES:
        raise UsageError(f"mode must be one of {', '.join(MODES)}")
    out = sweep_dir(cfg, mode)
    _guard([out / "sweep.json"], force)
    system = _load_system(cfg)
    basis = None
    if mode == "ROM":
        path = basis_path(cfg)
        if not path.exists():
            raise UsageError(f"ROM mode needs a basis: missing {path}; run 'offline' first")
        basis = load_basis(path)
        off = path.parent / "offline_time.json"
        if off.exists():
            basis.timings["total"] = json.loads(off.read_text())["seconds"]
    probes = cfg["sweep.probes"]
    scfg = SweepConfig(cfg["sweep.f_min"], cfg["sweep.f_max"], cfg["sweep.step"], mode,
                       [] if probes is None else [int(p) for p in probes], cfg["seed"],
                       cfg["excite.samples"], cfg["rank.l_max"], cfg["rank.energy_tol"],
                       cfg["sweep.covariance"], cfg["sweep.keep"] or ())
    res = run_sweep(scfg, system, _ensemble_source(cfg, system), basis=basis)
    _write_sweep(res, out)
    log.info("%s sweep: %d frequencies, %d flagged -> %s", mode, len(res.frequencies),
             len(res.flagged), out)
    if res.flagged:
        log.error("flagged frequencies: %s", ", ".join(f"{f:g}" for f in res.flagged))
        return EXIT_NUMERIC
    return EXIT_OK


def _read_sweep(cfg: RunConfig, mode: str):
    d = sweep_dir(cfg, mode)
    _require(d / "sweep.json", f"sweep --mode {mode}")
    return d, json.loads((d / "sweep.json").read_text())


def _read_trace(path: Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1] + 1j * data[:, 2]


def _read_factors(d: Path, f: float):
    from lrmor.moments import load_factors

    return load_factors(d / f"factors_{_fname(f)}")


def _timing_result(d: Path, summary: dict):
    from lrmor.sweep import StepResult, SweepResult

    steps = []
    with (d / "timings.csv").open() as fh:
        for row in csv.DictReader(fh):
            s = StepResult(float(row["f_Hz"]), np.zeros(0), np.zeros(0),
                           covariance=bool(int(row["covariance"])))
            s.timings = {k: float(row[k]) for k in ("svd", "factors", "assembly", "total")}
            steps.append(s)
    off = json.loads((d / "offline_time.json").read_text())["seconds"]
    return SweepResult(summary["mode"], np.array(summary["frequencies"]),
                       np.array(summary["probes"]), steps, offline_time=off)


def cmd_compare(cfg: RunConfig, force: bool = False) -> int:
    from lrmor.sweep import (MODES, covariance_error, timing_report, transfer_error,
                             write_err_cov_csv, write_timing_csv)

    ref_mode, cand_mode = cfg["compare.reference"], cfg["compare.candidate"]
    out = cfg.workdir / "compare"
    _guard([out / "report.txt"], force)
    dref, sref = _read_sweep(cfg, ref_mode)
    dcand, scand = _read_sweep(cfg, cand_mode)
    fa, fb = np.array(sref["frequencies"]), np.array(scand["frequencies"])
    if fa.shape != fb.shape or not np.allclose(fa, fb):
        raise UsageError(f"frequency grids differ: {ref_mode} has {len(fa)} points "
                         f"[{fa.min():g}, {fa.max():g}], {cand_mode} has {len(fb)} points "
                         f"[{fb.min():g}, {fb.max():g}]")
    if sref["probes"] != scand["probes"]:
        raise UsageError(f"probe sets differ: {sref['probes']} vs {scand['probes']}")
    out.mkdir(parents=True, exist_ok=True)
    verdicts = []
    lines = [f"reference: {ref_mode}  candidate: {cand_mode}"]

    with (out / "transfer_error.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dof", "max_abs", "relative"])
        for p in sref["probes"]:
            a = _read_trace(dref / f"trace_dof{p}.csv")
            b = _read_trace(dcand / f"trace_dof{p}.csv")
            err, rel = transfer_error(a, b, fa, fb)
            w.writerow([p, repr(err), repr(rel)])
            ok = rel <= cfg["compare.max_transfer_rel"]
            verdicts.append(ok)
            lines.append(f"transfer dof {p}: max-abs {err:.3e}, relative {rel:.3e} "
                         f"[{'pass' if ok else 'FAIL'}]")

    common = sorted(set(sref["kept"]) & set(scand["kept"]))
    errs, trunc = [], []
    fom_dir = sweep_dir(cfg, "FOM")
    has_fom = (fom_dir / "sweep.json").exists() and ref_mode != "FOM"
    points = list(cfg["rom.points"])
    for f in common:
        e = covariance_error(_read_factors(dref, f), _read_factors(dcand, f))
        errs.append(e)
        t = float("nan")
        if has_fom and f in json.loads((fom_dir / "sweep.json").read_text())["kept"]:
            t = covariance_error(_read_factors(fom_dir, f), _read_factors(dref, f))
        trunc.append(t)
        at_point = any(abs(f - g) < 1e-6 for g in points)
        limit = cfg["compare.max_err_cov_points"] if at_point else cfg["compare.max_err_cov"]
        ok = e <= limit
        verdicts.append(ok)
        lines.append(f"err_cov {f:g} Hz: {e:.3e} (limit {limit:g}) [{'pass' if ok else 'FAIL'}]"
                     + ("" if np.isnan(t) else f"  truncation vs FOM: {t:.3e}"))
    write_err_cov_csv(out / "err_cov.csv", common, errs, trunc if has_fom else None)

    results = []
    for m in MODES:
        d = sweep_dir(cfg, m)
        if (d / "sweep.json").exists():
            results.append(_timing_result(d, json.loads((d / "sweep.json").read_text())))
    table = timing_report(results)
    write_timing_csv(out / "timing_table.csv", table)
    (out / "timing_table.txt").write_text(table.to_text())
    passed = all(verdicts)
    lines.append("verdict: " + ("PASS" if passed else "FAIL"))
    report = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(report)
    sys.stdout.write(report + table.to_text())
    return EXIT_OK if passed else EXIT_THRESHOLD


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("--workdir", help="shorthand for --set workdir=DIR")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/LAPACK threads (default: library default)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="lrmor", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("assemble", parents=[common], help="build and write K, M, C_sf")
    sub.add_parser("excite", parents=[common], help="write load ensembles")
    sub.add_parser("offline", parents=[common], help="build the projection basis")
    sp = sub.add_parser("sweep", parents=[common], help="run a frequency sweep")
    sp.add_argument("--mode", required=True, choices=["FOM", "FOM-lowrank", "ROM"])
    sub.add_parser("compare", parents=[common], help="error and timing report")
    parser.epilog = "configuration keys: " + ", ".join(SCHEMA)
    return parser


def _run(args) -> int:
    overrides = list(args.set)
    if args.workdir:
        overrides.append(f"workdir={args.workdir}")
    cfg = load_config(args.config, overrides)
    if args.print_config:
        sys.stdout.write(cfg.dump())
        return EXIT_OK
    force = args.force
    if args.command == "assemble":
        return cmd_assemble(cfg, force)
    if args.command == "excite":
        return cmd_excite(cfg, force)
    if args.command == "offline":
        return cmd_offline(cfg, force)
    if args.command == "sweep":
        return cmd_sweep(cfg, args.mode, force)
    return cmd_compare(cfg, force)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            log.error("--threads must be >= 1")
            return EXIT_USAGE
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            return _run(args)
    except (UsageError, ConfigurationError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (SolverError, DegenerateInputError, NumericalFailure) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
