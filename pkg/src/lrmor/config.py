"""
Flat ``key = value`` run configuration with dotted keys.

Lines starting with ``#`` are comments.  Unknown keys are rejected so typos
fail loudly.  List values are comma separated.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from lrmor.errors import ConfigurationError
from lrmor.mesh_fem import MaterialProperties
from lrmor.tbl import SpectrumModel, load_spectrum_csv

# key -> (type, default, help)
SCHEMA: Dict[str, tuple] = {
    "seed": (int, 0, "single source of all randomness"),
    "workdir": (str, "run", "directory for every stage's files"),
    "plate.lx": (float, 0.48, "plate length in x [m]"),
    "plate.ly": (float, 0.40, "plate length in y [m]"),
    "plate.nx": (int, 20, "plate elements in x (cavity shares it)"),
    "plate.ny": (int, 20, "plate elements in y (cavity shares it)"),
    "cavity.lz": (float, 0.45, "cavity depth [m]"),
    "cavity.nz": (int, 20, "cavity elements in z"),
    "mat.E": (float, 70e9, "Young's modulus [Pa]"),
    "mat.t": (float, 0.003, "plate thickness [m]"),
    "mat.nu": (float, 0.3, "Poisson ratio"),
    "mat.rho_s": (float, 2700.0, "plate density [kg/m^3]"),
    "mat.rho_f": (float, 1.21, "fluid density [kg/m^3]"),
    "mat.c": (float, 340.0, "speed of sound [m/s]"),
    "mat.eta": (float, 0.0, "structural loss factor"),
    "tbl.U_inf": (float, 230.0, "free-stream velocity [m/s]"),
    "tbl.uc_ratio": (float, 0.7, "convective / free-stream velocity"),
    "tbl.alpha_x": (float, 0.116, "streamwise coherence decay"),
    "tbl.alpha_y": (float, 0.7, "spanwise coherence decay"),
    "tbl.delta": (float, 0.1, "boundary-layer thickness [m]"),
    "tbl.tau_w": (float, 0.00903, "wall shear stress [Pa]"),
    "tbl.rho": (float, 1.21, "air density for the spectrum [kg/m^3]"),
    "tbl.nu": (float, 1.5e-5, "kinematic viscosity [m^2/s]"),
    "tbl.nk": (int, 32, "plane waves per wavenumber direction"),
    "tbl.kmax_factor": (float, 1.5, "grid half-width / convective wavenumber at f_max"),
    "tbl.source_refine": (float, 1.6, "pressure source grid density / plate mesh density"),
    "tbl.spectrum_csv": (str, "", "optional tabulated spectrum (f_Hz,kx,ky,phi_pp)"),
    "excite.samples": (int, 1000, "load samples per frequency"),
    "excite.frequencies": (list, None, "frequencies written by 'excite' (default: rom.points)"),
    "excite.format": (str, "csv", "ensemble file format: csv | npy"),
    "rank.l_max": (int, 64, "largest retained covariance rank"),
    "rank.energy_tol": (float, 0.99, "retained share of the singular-value sum"),
    "rom.points": (list, [114.0, 414.0], "expansion points [Hz] (default follows the band)"),
    "rom.order": (int, 20, "matched moments per expansion point"),
    "rom.deflation_tol": (float, 1e-10, "relative deflation tolerance"),
    "rom.format": (str, "mtx", "basis file format: mtx | npy"),
    "sweep.f_min": (float, 16.0, "lowest frequency [Hz]"),
    "sweep.f_max": (float, 500.0, "highest frequency [Hz]"),
    "sweep.step": (float, 2.0, "frequency step [Hz]"),
    "sweep.probes": (list, None, "probe DOFs (default: one plate, one cavity DOF)"),
    "sweep.covariance": (list, None, "frequencies with covariance work (default: all)"),
    "sweep.keep": (list, [16.0, 114.0, 414.0, 460.0, 500.0], "frequencies whose full factors are saved"),
    "sweep.ensembles": (str, "generate", "generate | files"),
    "compare.reference": (str, "FOM-lowrank", "reference sweep mode"),
    "compare.candidate": (str, "ROM", "compared sweep mode"),
    "compare.max_err_cov": (float, 1e-2, "err_cov threshold at every checked frequency"),
    "compare.max_err_cov_points": (float, 1e-4, "err_cov threshold at the expansion points"),
    "compare.max_transfer_rel": (float, 0.10, "relative max-abs transfer error threshold"),
}


def _parse(key: str, raw: str):
    kind = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if kind is list:
            if raw.lower() in ("", "none", "all", "auto"):
                return None
            return [float(x) for x in raw.split(",") if x.strip()]
        if kind is int:
            try:
                return int(raw)
            except ValueError:
                if float(raw).is_integer():
                    return int(float(raw))
                raise
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc
    return raw


def _render(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: Dict[str, object]
    source: Optional[Path] = None

    def __getitem__(self, key):
        return self.values[key]

    @property
    def workdir(self) -> Path:
        return Path(str(self.values["workdir"]))

    def material(self) -> MaterialProperties:
        v = self.values
        return MaterialProperties(v["mat.E"], v["mat.t"], v["mat.nu"], v["mat.rho_s"],
                                  v["mat.rho_f"], v["mat.c"], v["mat.eta"])

    def spectrum(self) -> SpectrumModel:
        v = self.values
        kwargs = dict(U_inf=v["tbl.U_inf"], uc_ratio=v["tbl.uc_ratio"], alpha_x=v["tbl.alpha_x"],
                      alpha_y=v["tbl.alpha_y"], delta=v["tbl.delta"], tau_w=v["tbl.tau_w"],
                      rho=v["tbl.rho"], nu=v["tbl.nu"])
        path = str(v["tbl.spectrum_csv"])
        if path:
            p = Path(path)
            if not p.is_absolute() and self.source is not None:
                p = self.source.parent / p
            return load_spectrum_csv(p, **kwargs)
        return SpectrumModel(**kwargs)

    def excite_frequencies(self) -> List[float]:
        f = self.values["excite.frequencies"]
        return list(self.values["rom.points"]) if f is None else list(f)

    def dump(self) -> str:
        lines = [f"{k} = {_render(self.values[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"


REFERENCE_BAND = (16.0, 500.0)


def default_expansion_points(f_min: float, f_max: float) -> List[float]:
    """Default points (114, 414 Hz on 16-500 Hz) mapped affinely onto ``[f_min, f_max]``."""
    lo, hi = REFERENCE_BAND
    base = SCHEMA["rom.points"][1]
    if (f_min, f_max) == (lo, hi) or f_max <= f_min:
        return list(base)
    scale = (f_max - f_min) / (hi - lo)
    return [round(f_min + (f - lo) * scale, 6) for f in base]


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    explicit = set()
    source = None

    def apply(line: str, where: str):
        if "=" not in line:
            raise ConfigurationError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        values[key] = _parse(key, raw)
        explicit.add(key)

    if path is not None:
        source = Path(path)
        try:
            text = source.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {source}: {exc.strerror}") from exc
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                apply(line, f"{source}:{no}")
    for item in overrides:
        apply(item, "--set")
    if "rom.points" not in explicit:
        values["rom.points"] = default_expansion_points(values["sweep.f_min"],
                                                        values["sweep.f_max"])
    if values["excite.format"] not in ("csv", "npy"):
        raise ConfigurationError("excite.format must be csv or npy")
    if values["rom.format"] not in ("mtx", "npy"):
        raise ConfigurationError("rom.format must be mtx or npy")
    if values["sweep.ensembles"] not in ("generate", "files"):
        raise ConfigurationError("sweep.ensembles must be generate or files")
    if values["rom.points"] is None:
        raise ConfigurationError("rom.points needs at least one frequency")
    return RunConfig(values, source)
