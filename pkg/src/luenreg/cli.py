"""Command line front end: ``luenreg {synth,simulate,validate,sweep}``.

Exit codes: 0 success or pass, 1 validation or stage failure, 2 configuration
or usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, benchmark_path, load_config
from .gamma import GammaMap, injectivity_diagnostic
from .observer import ObserverPair, TauSampleSet, compute_tau, truncation_bound
from .ode import AssumptionViolation, SaturationProfile
from .plant import derive_core
from .regulator import Controller, autotune_kappa
from .synth import Synthesis, synthesize
from .validate import (
    compute_metrics, sample_inits, simulate_closed_loop, validate,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

PAIR_FILE = "observer_pair.json"
TAU_FILE = "tau_samples.csv"
INJ_FILE = "injectivity.csv"
GAMMA_FILE = "gamma.json"
REPORT_FILE = "synth_report.txt"


class MissingArtifacts(ConfigError):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Artifacts

def write_artifacts(s: Synthesis, out: Path) -> None:
    meta = {
        "R1": s.sat.R1, "R2": s.sat.R2, "radius_floored": s.radius_floored,
        "ell": s.ell, "B_q": s.B_q, "T_trunc": s.T_trunc,
        "truncation_bound": s.truncation_bound, "resolution": s.resolution,
        "seed": s.settings.seed,
    }
    pair = s.pair.to_dict()
    pair["synthesis"] = meta
    _write(out / PAIR_FILE, json.dumps(pair, indent=1) + "\n")
    _write(out / TAU_FILE, s.tau_samples.to_csv())
    _write(out / INJ_FILE, s.injectivity.to_csv())
    _write(out / GAMMA_FILE, json.dumps(s.gamma.to_dict()) + "\n")
    _write(out / REPORT_FILE, "\n".join(s.report_lines()) + "\n")


def load_artifacts(cfg: RunConfig, out: Path) -> Synthesis:
    """Rebuild a `Synthesis` from the files written by ``synth``."""
    missing = [f for f in (PAIR_FILE, TAU_FILE, GAMMA_FILE) if not (out / f).exists()]
    if missing:
        raise MissingArtifacts(f"{out}: missing synthesis artifacts {', '.join(missing)}; run 'synth' first")
    d = json.loads((out / PAIR_FILE).read_text())
    meta = d["synthesis"]
    pair = ObserverPair.from_dict(d)
    samples = TauSampleSet.from_csv((out / TAU_FILE).read_text(), T_trunc=meta["T_trunc"],
                                    truncation_bound=meta["truncation_bound"])
    gamma = GammaMap.from_dict(json.loads((out / GAMMA_FILE).read_text()))
    if pair.m != 2 * cfg.plant.n + 2 or samples.z.shape[1] != cfg.plant.n:
        raise ConfigError(f"{out}: artifacts do not match the plant dimension n = {cfg.plant.n}")
    st = cfg.synthesis
    report = injectivity_diagnostic(samples, st.injectivity_grid, st.injectivity_tol)
    return Synthesis(
        plant=cfg.plant, core=derive_core(cfg.plant), settings=st,
        sat=SaturationProfile(meta["R1"], meta["R2"]), radius_floored=meta["radius_floored"],
        ell=meta["ell"], B_q=meta["B_q"], pair=pair, T_trunc=meta["T_trunc"],
        attractor=samples.z, resolution=meta["resolution"], tau_samples=samples,
        injectivity=report, gamma=gamma)


# ---------------------------------------------------------------------------
# Commands

def _controller(cfg: RunConfig, s: Synthesis, out: Path, log):
    """Controller with the configured or auto-tuned gain; writes ``tuning.csv`` when tuning."""
    tn = cfg.tuning
    sim = cfg.validation.sim
    c = Controller(s.pair, s.gamma, tn.kappa if tn.kappa else tn.kappa0, cfg.plant.phi_eval)
    rng = np.random.default_rng(cfg.synthesis.seed + 2)
    batch = sample_inits(cfg.plant, s.pair.m, tn.inits, rng)
    chi_max = math.nan
    if tn.kappa is None:
        res = autotune_kappa(cfg.plant, c, sim, tn.kappa0, tn.kappa_max, tn.target_tail, batch)
        _write(out / "tuning.csv", res.to_csv())
        log(f"kappa: {res.kappa:g} ({'accepted' if res.accepted else 'not accepted, best seen'})")
        c, chi_max = c.with_kappa(res.kappa), res.chi_max
    if tn.mode == "saturated":
        if not math.isfinite(chi_max):
            runs = simulate_closed_loop(cfg.plant, c, batch, sim)
            chi_max = max(compute_metrics(r, tail_frac=sim.tail_frac).sup_chi for r in runs)
        c = c.saturated(10.0 * chi_max)
    return c


def cmd_synth(cfg: RunConfig, out: Path, log) -> int:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = synthesize(cfg.plant, cfg.synthesis)
    write_artifacts(s, out)
    inj = s.injectivity
    log(f"m = {s.pair.m}, ell = {s.ell:.6g}, T_trunc = {s.T_trunc:.6g}, samples = {len(s.attractor)}")
    log(f"injectivity: {'pass' if inj.passed else 'FAIL'} "
        f"(phi at resolution {inj.phi_ref:.3g}, limit {inj.tol * inj.y_range:.3g})")
    return EXIT_OK if inj.passed else EXIT_FAIL


def cmd_simulate(cfg: RunConfig, out: Path, log, inits: int | None = None) -> int:
    s = load_artifacts(cfg, out)
    c = _controller(cfg, s, out, log)
    count = inits if inits is not None else cfg.validation.n_inits
    rng = np.random.default_rng(cfg.synthesis.seed + 3)
    batch = sample_inits(cfg.plant, s.pair.m, count, rng)
    sim = cfg.validation.sim
    runs = simulate_closed_loop(cfg.plant, c, batch, sim)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["init", "kappa", "tail_sup_e", "tail_sup_chi", "sup_e", "sup_chi",
                "max_state_norm", "dist_to_attractor", "bounded"])
    all_ok = True
    for i, r in enumerate(runs):
        _write(out / "trajectories" / f"run_{i:03d}.csv", r.to_csv())
        mt = compute_metrics(r, s.attractor, sim.tail_frac, sim.dense_points)
        all_ok &= mt.bounded
        w.writerow([i, _fmt(c.kappa), _fmt(mt.tail_sup_e), _fmt(mt.tail_sup_chi), _fmt(mt.sup_e),
                    _fmt(mt.sup_chi), _fmt(mt.max_state_norm), _fmt(mt.dist_to_attractor),
                    int(mt.bounded)])
    _write(out / "metrics.csv", buf.getvalue())
    log(f"{count} runs, {'all bounded' if all_ok else 'some runs diverged'}")
    return EXIT_OK if all_ok else EXIT_FAIL


def cmd_validate(cfg: RunConfig, out: Path, log) -> int:
    s = load_artifacts(cfg, out)
    rep = validate(s, cfg.validation)
    _write(out / "validation_report.txt", rep.to_text())
    _write(out / "validation_report.csv", rep.to_csv())
    if rep.tuning is not None:
        _write(out / "tuning.csv", rep.tuning.to_csv())
    for r in rep.records:
        log(f"{'pass' if r.passed else 'FAIL'}  {r.name}: {r.value:.6g}")
    log(f"overall: {'pass' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


SWEEP_HEADERS = {
    "kappa": ["kappa", "tail_sup_chi", "tail_sup_e", "bounded"],
    "T_trunc": ["T_trunc", "truncation_bound", "tau_max_norm", "tau_drift"],
    "samples": ["samples", "injectivity_pass", "phi_ref", "lipschitz"],
}


def cmd_sweep(cfg: RunConfig, out: Path, log, values=None, parameter=None) -> int:
    param = parameter or cfg.sweep.parameter
    vals = list(values if values is not None else cfg.sweep.values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADERS[param])
    if vals:
        s = load_artifacts(cfg, out)
        if param == "kappa":
            rng = np.random.default_rng(cfg.synthesis.seed + 4)
            batch = sample_inits(cfg.plant, s.pair.m, cfg.sweep.inits, rng)
            base = Controller(s.pair, s.gamma, vals[0], cfg.plant.phi_eval)
            sim = cfg.validation.sim
            for k in vals:
                runs = simulate_closed_loop(cfg.plant, base.with_kappa(k), batch, sim)
                mets = [compute_metrics(r, tail_frac=sim.tail_frac) for r in runs]
                w.writerow([_fmt(k), _fmt(max(m.tail_sup_chi for m in mets)),
                            _fmt(max(m.tail_sup_e for m in mets)), int(all(m.bounded for m in mets))])
        elif param == "T_trunc":
            z = s.attractor[:min(20, len(s.attractor))]
            prev = None
            for T in vals:
                x = compute_tau(z, s.pair, s.core, s.sat, T, s.settings.integrator)
                drift = math.nan if prev is None else float(np.max(np.linalg.norm(x - prev, axis=1)))
                w.writerow([_fmt(T), _fmt(truncation_bound(s.pair, s.B_q, T)),
                            _fmt(np.max(np.linalg.norm(x, axis=1))), _fmt(drift)])
                prev = x
        else:
            ts = s.tau_samples
            for count in vals:
                k = max(2, min(int(count), len(ts)))
                sub = TauSampleSet(ts.z[:k], ts.x[:k], ts.y[:k])
                rep = injectivity_diagnostic(sub, s.settings.injectivity_grid, s.settings.injectivity_tol)
                w.writerow([k, int(rep.passed), _fmt(rep.phi_ref), _fmt(rep.lipschitz)])
    _write(out / f"sweep_{param}.csv", buf.getvalue())
    log(f"sweep over {param}: {len(vals)} rows")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="luenreg", description=(
        "Synthesize and validate an internal-model output regulator built from a "
        "nonlinear Luenberger observer."))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True,
                        help="INI config path, or the name of a bundled benchmark "
                             "(linear, vanderpol, adversarial)")
        sp.add_argument("--out", help="artifact directory (default: [output] dir of the config)")
        sp.add_argument("--seed", type=int, help="override the synthesis and validation seed")
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")
        return sp

    common(sub.add_parser("synth", help="build (F, G), tau samples, injectivity report and gamma"))
    sim = common(sub.add_parser("simulate", help="closed-loop Monte-Carlo runs with trajectory CSVs"))
    sim.add_argument("--inits", type=int, help="number of initial conditions")
    common(sub.add_parser("validate", help="run all checks and write the validation report"))
    sw = common(sub.add_parser("sweep", help="sweep kappa, T_trunc or the sample count"))
    sw.add_argument("--parameter", choices=sorted(SWEEP_HEADERS))
    sw.add_argument("--values", nargs="*", type=float, help="parameter values (may be empty)")
    return p


def _resolve_config(arg: str) -> Path:
    path = Path(arg)
    if not path.exists() and not path.suffix:
        try:
            return benchmark_path(arg)
        except KeyError:
            pass
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg):
        if not args.quiet:
            print(msg)

    try:
        cfg = load_config(_resolve_config(args.config))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out) if args.out else cfg.out_dir
        log(f"config: {cfg.path} (consistency residual {cfg.a3_residual:.3g})")
        if args.command == "synth":
            return cmd_synth(cfg, out, log)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, log, args.inits)
        if args.command == "validate":
            return cmd_validate(cfg, out, log)
        return cmd_sweep(cfg, out, log, args.values, args.parameter)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AssumptionViolation, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
