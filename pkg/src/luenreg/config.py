"""INI run configuration.

Example::

    [plant]
    n = 2
    p = 1
    f =
        z2
        -z1
    q = 0
    h = zeta - z1
    k = zeta - z1
    alpha = z1
    phi = y1
    Z_kind = ball
    Z_center = 0 0
    Z_radius = 1
    Xi = -1 1

Vector expressions (``f``, ``k``) take one component per line. The other
sections (``synthesis``, ``tuning``, ``simulation``, ``validation``,
``output``, ``sweep``) are optional and override defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import expr as ex
from .plant import Ball, Box, Interval, PlantModel, consistency_residual
from .synth import SynthesisSettings
from .validate import SimulationConfig, ValidationConfig

__all__ = ["ConfigError", "RunConfig", "TuningSettings", "SweepSettings", "load_config",
           "benchmark_path", "BENCHMARKS"]

A3_TOL = 1e-6
BENCHMARKS = ("linear", "vanderpol", "adversarial")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, and the line when known."""


@dataclass(frozen=True)
class TuningSettings:
    kappa0: float = 8.0
    kappa_max: float = 4096.0
    target_tail: float = 1e-2
    kappa: float | None = None
    mode: str = "linear"
    inits: int = 8


@dataclass(frozen=True)
class SweepSettings:
    parameter: str = "kappa"
    values: tuple[float, ...] = ()
    inits: int = 5


@dataclass(frozen=True, eq=False)
class RunConfig:
    path: Path
    plant: PlantModel
    synthesis: SynthesisSettings
    tuning: TuningSettings
    validation: ValidationConfig
    sweep: SweepSettings
    out_dir: Path
    a3_residual: float

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            synthesis=dataclasses.replace(self.synthesis, seed=seed),
            validation=dataclasses.replace(self.validation, seed=seed))


def benchmark_path(name: str) -> Path:
    """Path of a bundled benchmark config (``linear``, ``vanderpol``, ``adversarial``)."""
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return Path(str(resources.files("luenreg") / "data" / f"{name}.ini"))


class _Reader:
    def __init__(self, path: Path, text: str):
        self.path = path
        self.lines = text.splitlines()
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def line_of(self, section: str, key: str) -> int | None:
        in_sec = False
        pat = re.compile(rf"^\s*{re.escape(key)}\s*[=:]")
        for i, line in enumerate(self.lines, 1):
            s = line.strip()
            if s.startswith("[") and s.endswith("]"):
                in_sec = s[1:-1].strip() == section
            elif in_sec and pat.match(line):
                return i
        return None

    def where(self, section: str, key: str) -> str:
        ln = self.line_of(section, key)
        return f"{self.path}:{ln}" if ln else f"{self.path}"

    def error(self, section, key, msg) -> ConfigError:
        return ConfigError(f"{self.where(section, key)}: {section}.{key}: {msg}")

    def has(self, section, key) -> bool:
        return self.cp.has_option(section, key)

    def raw(self, section, key, default=None, required=False):
        if not self.cp.has_option(section, key):
            if required:
                raise ConfigError(f"{self.path}: missing required field {section}.{key}")
            return default
        return self.cp.get(section, key)

    def get(self, section, key, conv, default=None, required=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            return conv(v.strip())
        except (ValueError, TypeError) as exc:
            raise self.error(section, key, f"invalid value {v.strip()!r} ({exc})") from None

    def floats(self, section, key, default=None, required=False):
        return self.get(section, key, lambda s: tuple(float(t) for t in s.replace(",", " ").split()),
                        default, required)

    def exprs(self, section, key, variables, required=True) -> list[ex.Expr]:
        v = self.raw(section, key, None, required)
        items = [s.strip() for s in v.splitlines() if s.strip()]
        if not items:
            raise self.error(section, key, "empty expression")
        out = []
        for s in items:
            try:
                out.append(ex.parse(s, variables))
            except ex.ExprError as exc:
                raise self.error(section, key, f"{exc} in {s!r}") from None
        return out


def _opt_float(s: str):
    return None if s.lower() in ("", "auto", "none") else float(s)


def _plant(r: _Reader) -> PlantModel:
    sec = "plant"
    if not r.cp.has_section(sec):
        raise ConfigError(f"{r.path}: missing section [plant]")
    n = r.get(sec, "n", int, required=True)
    p = r.get(sec, "p", int, required=True)
    if n < 1 or p < 1:
        raise r.error(sec, "n" if n < 1 else "p", "must be a positive integer")
    zv = tuple(f"z{i + 1}" for i in range(n))
    zz = zv + ("zeta",)
    yv = tuple(f"y{j + 1}" for j in range(p))
    f = r.exprs(sec, "f", zz)
    if len(f) != n:
        raise r.error(sec, "f", f"{len(f)} components given, n = {n}")
    k = r.exprs(sec, "k", zz)
    if len(k) != p:
        raise r.error(sec, "k", f"{len(k)} components given, p = {p}")
    scalars = {}
    for key, variables in (("q", zz), ("h", zz), ("alpha", zv), ("phi", yv)):
        e = r.exprs(sec, key, variables)
        if len(e) != 1:
            raise r.error(sec, key, "expected a single expression")
        scalars[key] = e[0]

    kind = r.get(sec, "Z_kind", str.lower, "ball")
    if kind in ("ball", "annulus"):
        center = r.floats(sec, "Z_center", (0.0,) * n)
        radius = r.get(sec, "Z_radius", float, required=True)
        inner = r.get(sec, "Z_inner", float, 0.0)
        if len(center) != n:
            raise r.error(sec, "Z_center", f"dimension {len(center)} != n = {n}")
        try:
            Z = Ball(center, radius, inner)
        except ValueError as exc:
            raise r.error(sec, "Z_radius", str(exc)) from None
    elif kind == "box":
        lo = r.floats(sec, "Z_lower", required=True)
        hi = r.floats(sec, "Z_upper", required=True)
        if len(lo) != n or len(hi) != n:
            raise r.error(sec, "Z_lower", f"box bounds must have dimension n = {n}")
        try:
            Z = Box(lo, hi)
        except ValueError as exc:
            raise r.error(sec, "Z_lower", str(exc)) from None
    else:
        raise r.error(sec, "Z_kind", f"unknown set kind {kind!r} (ball, annulus or box)")
    xi = r.floats(sec, "Xi", required=True)
    if len(xi) != 2 or xi[0] > xi[1]:
        raise r.error(sec, "Xi", "expected 'lower upper'")
    return PlantModel(n=n, p=p, f=tuple(f), q=scalars["q"], h=scalars["h"], k=tuple(k),
                      alpha=scalars["alpha"], phi=scalars["phi"], Z=Z, Xi=Interval(*xi),
                      name=r.get(sec, "name", str, r.path.stem),
                      attraction_rate=r.get(sec, "attraction_rate", float, 1.0))


def _section(r: _Reader, sec: str, cls, convs: dict, base=None):
    base = base if base is not None else cls()
    kw = {}
    if r.cp.has_section(sec):
        known = set(convs)
        for key in r.cp.options(sec):
            if key not in known:
                raise r.error(sec, key, "unknown field")
        for key, conv in convs.items():
            if r.has(sec, key):
                kw[key] = r.get(sec, key, conv)
    return dataclasses.replace(base, **kw)


def _opt_str(s: str):
    return None if s.lower() in ("", "auto", "none") else s


def _floats(s: str):
    return tuple(float(t) for t in s.replace(",", " ").split())


def load_config(path) -> RunConfig:
    """Read, parse and check a run configuration.

    Raises
    ------
    ConfigError
        Syntax errors, unknown or missing fields, dimension mismatches, and
        plants whose measured output does not reproduce ``zeta - alpha(z)``
        (consistency assumption (a3)) to within 1e-6.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    r = _Reader(path, text)
    plant = _plant(r)

    synthesis = _section(r, "synthesis", SynthesisSettings, {
        "seed": int, "margin": float, "T_trunc": _opt_float, "tau_tol": float,
        "z_samples": int, "T_orbit": float, "burn_in": _opt_float, "keep_window": float,
        "n_keep": int, "mesh_tol": _opt_float, "gamma_mode": _opt_str, "ell_grid": int,
        "injectivity_grid": int, "injectivity_tol": float, "rtol": float, "atol": float,
    })
    if synthesis.gamma_mode not in (None, "mcshane", "nearest"):
        raise r.error("synthesis", "gamma_mode", "expected mcshane, nearest or auto")
    tuning = _section(r, "tuning", TuningSettings, {
        "kappa0": float, "kappa_max": float, "target_tail": float, "kappa": _opt_float,
        "mode": str, "inits": int,
    })
    if tuning.mode not in ("linear", "saturated"):
        raise r.error("tuning", "mode", "expected linear or saturated")
    if not 0 < tuning.kappa0 <= tuning.kappa_max:
        raise r.error("tuning", "kappa0", "need 0 < kappa0 <= kappa_max")
    sim = _section(r, "simulation", SimulationConfig, {
        "horizon": float, "tail_frac": float, "method": str, "step": _opt_float,
        "max_step": float, "rtol": float, "atol": float, "divergence_bound": float,
        "dense_points": int,
    })
    if sim.method not in ("rk4", "rk45"):
        raise r.error("simulation", "method", "expected rk4 or rk45")
    validation = _section(r, "validation", ValidationConfig, {
        "n_inits": int, "sweep_inits": int, "graph_samples": int, "T_check": float,
        "graph_tol": float, "decay_tol": float, "tune_margin": float, "ratio_low": float, "ratio_high": float,
        "consistency_tol": float, "zero_output_tol": float, "iss_amplitudes": _floats,
        "iss_omega": float, "iss_T": float,
    })
    validation = dataclasses.replace(
        validation, seed=synthesis.seed, sim=sim, kappa0=tuning.kappa0,
        kappa_max=tuning.kappa_max, target_tail=tuning.target_tail, tune_inits=tuning.inits)
    sweep = _section(r, "sweep", SweepSettings, {"parameter": str, "values": _floats, "inits": int})
    if sweep.parameter not in ("kappa", "T_trunc", "samples"):
        raise r.error("sweep", "parameter", "expected kappa, T_trunc or samples")
    out = Path(r.get("output", "dir", str, "out"))
    if not out.is_absolute():
        out = path.parent / out

    residual = consistency_residual(plant, np.random.default_rng(synthesis.seed))
    if not (residual <= A3_TOL):
        raise ConfigError(
            f"{path}: consistency assumption (a3) violated: "
            f"max |phi(k(z, zeta)) - (zeta - alpha(z))| = {residual:.3g} > {A3_TOL:g}")
    if not math.isfinite(plant.attraction_rate) or plant.attraction_rate <= 0:
        raise r.error("plant", "attraction_rate", "must be positive")
    return RunConfig(path, plant, synthesis, tuning, validation, sweep, out, residual)
