"""Closed-loop simulation, metrics and the validation checks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.spatial import cKDTree

from .ode import COMPLETED, IntegratorConfig, Trajectory, flow_batch
from .plant import PlantModel, consistency_residual, zero_output_residual
from .regulator import Controller, autotune_kappa

__all__ = [
    "SimulationConfig", "ClosedLoopRun", "Metrics", "CheckRecord", "ValidationConfig",
    "ValidationReport", "closed_loop_field", "transformed_field", "simulate_closed_loop",
    "sample_inits", "compute_metrics", "check_graph_invariance", "check_xtilde_decay",
    "estimate_iss_gain", "iss_monotone", "gain_sweep_ratio", "configured_checks", "validate",
]


@dataclass(frozen=True)
class SimulationConfig:
    """Closed-loop run settings.

    With ``method="rk4"`` and ``step=None`` the fixed step is
    ``min(max_step, 1 / (kappa + |F|))``, well inside the stability region of
    the fast loop. Fixed steps suit the McShane ``gamma``, whose kinks make
    adaptive error control reject many steps.
    """

    horizon: float = 100.0
    tail_frac: float = 0.2
    method: str = "rk4"
    step: float | None = None
    max_step: float = 1e-2
    rtol: float = 1e-6
    atol: float = 1e-8
    divergence_bound: float = 1e6
    dense_points: int = 2000

    def integrator(self, c: "Controller | None" = None) -> IntegratorConfig:
        step = self.step
        if step is None:
            rate = 0.0 if c is None else c.kappa + float(np.linalg.norm(c.pair.F, 2))
            step = min(self.max_step, 1.0 / rate) if rate > 0 else self.max_step
        return IntegratorConfig(method=self.method, t_span=(0.0, self.horizon), step=step,
                                rtol=self.rtol, atol=self.atol,
                                divergence_bound=self.divergence_bound)


def closed_loop_field(plant: PlantModel, c: Controller):
    """Field of ``(z, zeta, eta)`` under the regulator, batched over rows."""
    n, F, G = plant.n, c.pair.F, c.pair.G

    def field(t, s):
        z, zeta, eta = s[:, :n], s[:, n], s[:, n + 1:]
        chi = plant.phi_eval(plant.k_eval(z, zeta))
        u = c.gamma_eval(eta) + c.v_eval(chi)
        dz = plant.f_eval(z, zeta)
        dzeta = plant.q_eval(z, zeta) + u
        deta = eta @ F.T + u[:, None] * G
        return np.concatenate([dz, dzeta[:, None], deta], axis=1)

    return field


def transformed_field(core, c: Controller):
    """Field of ``(z, chi, x)`` built from the core fields ``f0, q0, f1, q1``."""
    plant = core.plant
    n, F, G = plant.n, c.pair.F, c.pair.G
    FG = F @ G

    def field(t, s):
        z, chi, x = s[:, :n], s[:, n], s[:, n + 1:]
        q = core.q0(z) + core.q1(z, chi)
        measured = plant.phi_eval(plant.k_eval(z, chi + plant.alpha_eval(z)))
        u = c.gamma_eval(x + chi[:, None] * G) + c.v_eval(measured)
        dz = core.f0(z) + core.f1(z, chi)
        dx = x @ F.T + chi[:, None] * FG - q[:, None] * G
        return np.concatenate([dz, (q + u)[:, None], dx], axis=1)

    return field


@dataclass(eq=False)
class ClosedLoopRun:
    """A closed-loop trajectory of ``(z, zeta, eta)`` with its output channels."""

    traj: Trajectory
    plant: PlantModel
    controller: Controller

    @property
    def n(self) -> int:
        return self.plant.n

    def channels(self, states=None) -> dict[str, np.ndarray]:
        """``e, y1..yp, u, chi`` at the recorded states (or at `states`)."""
        s = self.traj.x if states is None else np.atleast_2d(states)
        n, p = self.plant.n, self.plant.p
        z, zeta, eta = s[:, :n], s[:, n], s[:, n + 1:]
        y = self.plant.k_eval(z, zeta)
        chi = self.plant.phi_eval(y)
        u = self.controller.gamma_eval(eta) + self.controller.v_eval(chi)
        out = {"e": self.plant.h_eval(z, zeta)}
        out.update({f"y{j + 1}": y[:, j] for j in range(p)})
        out["u"] = u
        out["chi"] = chi
        return out

    def column_names(self) -> list[str]:
        m = self.controller.m
        return ([f"z{i + 1}" for i in range(self.n)] + ["zeta"]
                + [f"eta{i + 1}" for i in range(m)])

    def to_csv(self) -> str:
        from .ode import write_trajectory_csv
        return write_trajectory_csv(self.traj, names=self.column_names(), extra=self.channels())


def sample_inits(plant: PlantModel, m: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Rows ``(z0, zeta0, eta0 = 0)`` with ``z0`` in Z and ``zeta0`` in Xi."""
    z = plant.Z.sample(rng, count)
    zeta = plant.Xi.sample(rng, count)
    return np.concatenate([z, zeta[:, None], np.zeros((count, m))], axis=1)


def simulate_closed_loop(plant: PlantModel, c: Controller, inits,
                         cfg: SimulationConfig = SimulationConfig()) -> list[ClosedLoopRun]:
    """Integrate the closed loop from each row of `inits` over ``[0, cfg.horizon]``."""
    x0 = np.atleast_2d(np.asarray(inits, float))
    if x0.shape[1] != plant.n + 1 + c.m:
        raise ValueError(f"initial states need {plant.n + 1 + c.m} columns, got {x0.shape[1]}")
    trajs = flow_batch(closed_loop_field(plant, c), x0, cfg.integrator(c))
    return [ClosedLoopRun(tr, plant, c) for tr in trajs]


@dataclass(frozen=True)
class Metrics:
    tail_sup_e: float
    tail_sup_chi: float
    sup_e: float
    sup_chi: float
    max_state_norm: float
    bounded: bool
    dist_to_attractor: float = math.nan
    decay_fit: float = math.nan


def _tail_states(traj: Trajectory, tail_frac: float, dense_points: int):
    t0, t1 = traj.t[0], traj.t[-1]
    start = t1 - tail_frac * (t1 - t0)
    keep = traj.t >= start
    grid = np.linspace(start, t1, dense_points) if t1 > t0 else traj.t[-1:]
    t = np.concatenate([traj.t[keep], grid])
    order = np.argsort(t, kind="stable")
    return t[order], np.concatenate([traj.x[keep], traj(grid)])[order]


def compute_metrics(run: ClosedLoopRun, attractor=None, tail_frac: float = 0.2,
                    dense_points: int = 2000) -> Metrics:
    """Sup and tail-window sup of ``|e|`` and ``|chi|``, plus distance to the attractor samples.

    The tail is the last `tail_frac` of the integrated time span and is
    evaluated at the recorded steps and at `dense_points` interpolated times.
    """
    tr = run.traj
    ch = run.channels()
    tt, ts = _tail_states(tr, tail_frac, dense_points)
    tch = run.channels(ts)
    norm = float(np.max(np.linalg.norm(tr.x, axis=1)))
    bounded = tr.status == COMPLETED and math.isfinite(norm)
    dist = math.nan
    if attractor is not None:
        dist = float(np.max(cKDTree(np.asarray(attractor, float)).query(ts[:, :run.n])[0]))
    chi = np.abs(tch["chi"])
    decay = math.nan
    pos = chi > 0
    if np.count_nonzero(pos) >= 2:
        decay = float(np.polyfit(tt[pos], np.log(chi[pos]), 1)[0])
    return Metrics(
        tail_sup_e=float(np.max(np.abs(tch["e"]))),
        tail_sup_chi=float(np.max(chi)),
        sup_e=float(max(np.max(np.abs(ch["e"])), np.max(np.abs(tch["e"])))),
        sup_chi=float(max(np.max(np.abs(ch["chi"])), np.max(chi))),
        max_state_norm=norm,
        bounded=bool(bounded),
        dist_to_attractor=dist,
        decay_fit=decay,
    )


# ---------------------------------------------------------------------------
# Cascade checks

def _cascade_field(core, pair):
    n, F, G = core.n, pair.F, pair.G

    def field(t, s):
        z, x = s[:, :n], s[:, n:]
        return np.concatenate([core.f0(z), x @ F.T - core.q0(z)[:, None] * G], axis=1)

    return field


def _cascade(core, pair, z0, x0, T, cfg, points):
    cfg = (cfg or IntegratorConfig(rtol=1e-11, atol=1e-13)).with_span(0.0, T)
    s0 = np.concatenate([np.atleast_2d(z0), np.atleast_2d(x0)], axis=1)
    trajs = flow_batch(_cascade_field(core, pair), s0, cfg)
    t = np.linspace(0.0, T, points)
    out = []
    for tr in trajs:
        if tr.status != COMPLETED:
            raise RuntimeError(f"cascade integration {tr.status}")
        out.append(tr(t))
    return t, np.stack(out)


def check_graph_invariance(core, pair, tau, z0, T: float, cfg: IntegratorConfig | None = None,
                           points: int = 41) -> float:
    """Max over ``t`` in ``[0, T]`` and over rows of `z0` of ``|x(t) - tau(z(t))|``.

    The cascade ``z' = f0(z), x' = F x - G q0(z)`` starts from ``(z0, tau(z0))``.
    `tau` maps ``(N, n)`` arrays to ``(N, m)``.
    """
    z0 = np.atleast_2d(np.asarray(z0, float))
    n = core.n
    _, states = _cascade(core, pair, z0, tau(z0), T, cfg, points)
    z = states[:, :, :n].reshape(-1, n)
    x = states[:, :, n:].reshape(-1, pair.m)
    return float(np.max(np.linalg.norm(x - tau(z), axis=1)))


def check_xtilde_decay(core, pair, tau, z0, x0, T: float, cfg: IntegratorConfig | None = None,
                       points: int = 41) -> float:
    """Max over ``t`` of ``|(x(t) - tau(z(t))) - exp(F t)(x0 - tau(z0))|``."""
    z0 = np.atleast_2d(np.asarray(z0, float))
    x0 = np.atleast_2d(np.asarray(x0, float))
    n = core.n
    t, states = _cascade(core, pair, z0, x0, T, cfg, points)
    xt0 = x0 - tau(z0)
    worst = 0.0
    for b in range(len(z0)):
        z, x = states[b, :, :n], states[b, :, n:]
        pred = np.stack([expm(pair.F * ti) @ xt0[b] for ti in t])
        worst = max(worst, float(np.max(np.linalg.norm(x - tau(z) - pred, axis=1))))
    return worst


# ---------------------------------------------------------------------------
# ISS gain

def estimate_iss_gain(plant: PlantModel, attractor, amplitudes, omega: float = 1.0,
                      T: float = 50.0, starts: int = 5, escape_radius: float = math.inf,
                      tail_frac: float = 0.2, cfg: IntegratorConfig | None = None) -> list[dict]:
    """Tail distance to the attractor samples under the probe ``zeta = alpha(z) + a sin(omega t)``.

    Each amplitude is simulated from the first `starts` attractor samples.
    A row is in regime when no run diverged and ``|z|`` stayed within
    `escape_radius`.
    """
    A = np.asarray(attractor, float)
    z0 = A[:min(starts, len(A))]
    tree = cKDTree(A)
    cfg = (cfg or IntegratorConfig(rtol=1e-10, atol=1e-12)).with_span(0.0, T)
    rows = []
    for a in amplitudes:
        a = float(a)

        def probe(t, z, a=a):
            return plant.f_eval(z, plant.alpha_eval(z) + a * math.sin(omega * t))

        trajs = flow_batch(probe, z0, cfg)
        ok = all(tr.status == COMPLETED for tr in trajs)
        max_norm = max(float(np.max(np.linalg.norm(tr.x, axis=1))) for tr in trajs)
        tail = 0.0
        for tr in trajs:
            _, zs = _tail_states(tr, tail_frac, 2000)
            tail = max(tail, float(np.max(tree.query(zs)[0])))
        rows.append({"amplitude": a, "tail_dist": tail, "max_norm": max_norm,
                     "in_regime": bool(ok and max_norm <= escape_radius)})
    return rows


def iss_monotone(rows) -> bool:
    vals = [r["tail_dist"] for r in rows if r["in_regime"]]
    return all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# Report

@dataclass(frozen=True)
class CheckRecord:
    name: str
    value: float
    threshold: float
    passed: bool
    relation: str = "<="
    detail: str = ""


@dataclass
class ValidationReport:
    records: list[CheckRecord] = field(default_factory=list)
    kappa: float = math.nan
    tuning: object = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def add(self, name, value, threshold, relation="<=", detail=""):
        value = float(value)
        if relation == "<=":
            ok = value <= threshold
        elif relation == ">=":
            ok = value >= threshold
        elif relation == "in":
            ok = threshold[0] <= value <= threshold[1]
        else:
            raise ValueError(relation)
        ok = bool(ok) and not math.isnan(value)
        self.records.append(CheckRecord(name, value, threshold, ok, relation, detail))
        self.records.sort(key=lambda r: r.name)

    def fail(self, name, detail):
        self.records.append(CheckRecord(name, math.nan, math.nan, False, "error", detail))
        self.records.sort(key=lambda r: r.name)

    @staticmethod
    def _fmt(v):
        if isinstance(v, tuple):
            return "[" + " ".join(format(float(x), ".17g") for x in v) + "]"
        return format(float(v), ".17g")

    def to_text(self) -> str:
        out = [f"overall: {'pass' if self.passed else 'fail'}", f"kappa: {self._fmt(self.kappa)}", ""]
        for r in self.records:
            out += [f"[{r.name}]", f"value: {self._fmt(r.value)}",
                    f"threshold: {r.relation} {self._fmt(r.threshold)}",
                    f"pass: {str(r.passed).lower()}"]
            if r.detail:
                out.append(f"detail: {r.detail}")
            out.append("")
        return "\n".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "value", "relation", "threshold", "pass"])
        for r in self.records:
            w.writerow([r.name, self._fmt(r.value), r.relation, self._fmt(r.threshold), int(r.passed)])
        return buf.getvalue()


@dataclass(frozen=True)
class ValidationConfig:
    seed: int = 0
    n_inits: int = 20
    tune_inits: int = 8
    sweep_inits: int = 5
    graph_samples: int = 10
    T_check: float = 10.0
    graph_tol: float = 1e-3
    decay_tol: float = 1e-6
    kappa0: float = 8.0
    kappa_max: float = 4096.0
    target_tail: float = 1e-2
    tune_margin: float = 0.25
    ratio_low: float = 0.3
    ratio_high: float = 0.8
    consistency_tol: float = 1e-9
    zero_output_tol: float = 1e-6
    iss_amplitudes: tuple = ()
    iss_omega: float = 1.0
    iss_T: float = 50.0
    sim: SimulationConfig = SimulationConfig()


def configured_checks(cfg: ValidationConfig) -> list[str]:
    names = ["closed_loop_bounded", "closed_loop_tail_e", "consistency_a3", "gain_sweep_ratio",
             "graph_invariance", "injectivity", "tuning_accepted", "xtilde_decay", "zero_output_a2"]
    if cfg.iss_amplitudes:
        names.append("iss_monotone")
    return sorted(names)


def validate(synth, cfg: ValidationConfig = ValidationConfig(), controller: Controller | None = None,
             injectivity=None) -> ValidationReport:
    """Run every configured check on a completed synthesis.

    Failures inside a check are recorded, never raised, so the report always
    holds one record per name in `configured_checks`. The gain is tuned on a
    batch of initial conditions separate from the validation batch.
    """
    plant, core, pair = synth.plant, synth.core, synth.pair
    rng = np.random.default_rng(cfg.seed + 1)
    report = ValidationReport()

    def guarded(names, fn):
        try:
            fn()
        except Exception as exc:  # recorded, the report must always complete
            done = {r.name for r in report.records}
            for name in names:
                if name not in done:
                    report.fail(name, f"{type(exc).__name__}: {exc}")

    guarded(["consistency_a3"], lambda: report.add(
        "consistency_a3", consistency_residual(plant, np.random.default_rng(cfg.seed)), cfg.consistency_tol))
    guarded(["zero_output_a2"], lambda: report.add(
        "zero_output_a2", zero_output_residual(plant, synth.attractor), cfg.zero_output_tol))
    inj = injectivity if injectivity is not None else synth.injectivity
    report.add("injectivity", float(inj.passed), 1.0, ">=",
               detail=f"phi_ref={inj.phi_ref:.6g} limit={inj.tol * inj.y_range:.6g}")

    idx = np.linspace(0, len(synth.attractor) - 1, min(cfg.graph_samples, len(synth.attractor))).astype(int)
    z_check = synth.attractor[idx]
    guarded(["graph_invariance"], lambda: report.add(
        "graph_invariance", check_graph_invariance(core, pair, synth.tau, z_check, cfg.T_check),
        cfg.graph_tol))

    def decay():
        x0 = rng.standard_normal((min(3, len(z_check)), pair.m))
        dev = check_xtilde_decay(core, pair, synth.tau, z_check[:len(x0)], x0, cfg.T_check)
        report.add("xtilde_decay", dev, cfg.decay_tol)
    guarded(["xtilde_decay"], decay)

    def closed_loop():
        c = controller or Controller(pair, synth.gamma, cfg.kappa0, plant.phi_eval)
        tune_batch = sample_inits(plant, pair.m, cfg.tune_inits, rng)
        # fresh initial conditions see up to a few times the tuning tail
        tuning = autotune_kappa(plant, c, cfg.sim, cfg.kappa0, cfg.kappa_max,
                                cfg.tune_margin * cfg.target_tail, tune_batch)
        report.tuning = tuning
        report.kappa = tuning.kappa
        report.add("tuning_accepted", float(tuning.accepted), 1.0, ">=")
        c = c.with_kappa(tuning.kappa)
        batch = sample_inits(plant, pair.m, cfg.n_inits, rng)
        runs = simulate_closed_loop(plant, c, batch, cfg.sim)
        mets = [compute_metrics(r, synth.attractor, cfg.sim.tail_frac) for r in runs]
        report.add("closed_loop_bounded", sum(not m.bounded for m in mets), 0,
                   detail=f"unbounded runs out of {len(mets)}")
        report.add("closed_loop_tail_e", max(m.tail_sup_e for m in mets), cfg.target_tail)
        ratio = gain_sweep_ratio(plant, c, batch[:cfg.sweep_inits], cfg.sim)
        report.add("gain_sweep_ratio", ratio, (cfg.ratio_low, cfg.ratio_high), "in")
    guarded(["closed_loop_bounded", "closed_loop_tail_e", "gain_sweep_ratio", "tuning_accepted"],
            closed_loop)

    if cfg.iss_amplitudes:
        def iss():
            rows = estimate_iss_gain(plant, synth.attractor, cfg.iss_amplitudes, cfg.iss_omega,
                                     cfg.iss_T, escape_radius=synth.sat.R2)
            report.add("iss_monotone", float(iss_monotone(rows)), 1.0, ">=")
        guarded(["iss_monotone"], iss)
    return report


def gain_sweep_ratio(plant, c: Controller, inits, sim: SimulationConfig) -> float:
    """Worst tail sup of ``|chi|`` at ``2 kappa`` divided by the one at ``kappa``."""
    tails = []
    for k in (c.kappa, 2 * c.kappa):
        runs = simulate_closed_loop(plant, c.with_kappa(k), inits, sim)
        tails.append(max(compute_metrics(r, tail_frac=sim.tail_frac).tail_sup_chi for r in runs))
    return tails[1] / tails[0] if tails[0] > 0 else math.nan
