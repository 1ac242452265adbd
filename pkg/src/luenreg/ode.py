"""Explicit Runge-Kutta integration with Hermite dense output.

Fields have the signature ``field(t, x) -> dx`` where ``x`` has shape
``(batch, dim)``. `flow` integrates a single initial state, `flow_batch`
integrates many at once with a shared step size (each member keeps its own
trajectory and termination status).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "IntegratorConfig", "Trajectory", "flow", "flow_batch",
    "SaturationProfile", "build_saturated_field", "saturation_weight",
    "estimate_orbit_radius", "AssumptionViolation", "write_trajectory_csv",
]

Field = Callable[[float, np.ndarray], np.ndarray]

COMPLETED = "completed"
DIVERGED = "diverged"
STEP_LIMIT = "step-limit"


class AssumptionViolation(RuntimeError):
    """A trajectory that should stay bounded diverged numerically."""


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45"
    t_span: tuple[float, float] = (0.0, 1.0)
    step: float = 1e-2
    rtol: float = 1e-8
    atol: float = 1e-10
    max_step: float = math.inf
    max_step_count: int = 10_000_000
    divergence_bound: float = 1e6

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.rtol <= 0 or self.atol <= 0 or self.step <= 0:
            raise ValueError("tolerances and step must be positive")
        if self.divergence_bound <= 0:
            raise ValueError("divergence_bound must be positive")

    def with_span(self, t0: float, t1: float, **kw) -> "IntegratorConfig":
        return replace(self, t_span=(float(t0), float(t1)), **kw)


@dataclass
class Trajectory:
    """Accepted integration steps with cubic Hermite interpolation between them.

    ``t`` is strictly increasing, also for backward integrations.
    """

    t: np.ndarray
    x: np.ndarray
    dx: np.ndarray
    status: str = COMPLETED

    def __len__(self) -> int:
        return len(self.t)

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    def __call__(self, t) -> np.ndarray:
        """Dense output at time(s) `t` inside the integrated span."""
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        if len(self.t) == 1:
            out = np.repeat(self.x[:1], len(tt), axis=0)
            return out[0] if scalar else out
        i = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, len(self.t) - 2)
        t0, t1 = self.t[i], self.t[i + 1]
        h = (t1 - t0)[:, None]
        s = ((tt - t0) / (t1 - t0))[:, None]
        s2, s3 = s * s, s * s * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        out = (h00 * self.x[i] + h10 * h * self.dx[i]
               + h01 * self.x[i + 1] + h11 * h * self.dx[i + 1])
        return out[0] if scalar else out

    def resample(self, times) -> np.ndarray:
        return self(np.asarray(times, float))


# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _rk45_step(fun, t, y, f0, h):
    k = [f0]
    for s in range(1, 7):
        dy = sum(a * kj for a, kj in zip(_A[s], k) if a != 0.0)
        k.append(fun(t + _C[s] * h, y + h * dy))
    y_new = y + h * sum(b * kj for b, kj in zip(_B, k) if b != 0.0)
    err = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
    return y_new, k[6], err


def _rk4_step(fun, t, y, f0, h):
    k1 = f0
    k2 = fun(t + h / 2, y + h / 2 * k1)
    k3 = fun(t + h / 2, y + h / 2 * k2)
    k4 = fun(t + h, y + h * k3)
    y_new = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y_new, fun(t + h, y_new), None


def _initial_step(fun, t0, y0, f0, direction_span, rtol, atol):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    y1 = y0 + h0 * f0
    f1 = fun(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, direction_span)


def flow_batch(field: Field, x0, cfg: IntegratorConfig) -> list[Trajectory]:
    """Integrate ``x' = field(t, x)`` from each row of `x0` over ``cfg.t_span``.

    A ``t_span`` with ``t1 < t0`` integrates backward in time by reversing
    the field. Members whose norm exceeds ``cfg.divergence_bound`` (or that
    become non-finite) stop with status ``"diverged"`` and keep the part of
    their trajectory computed so far.
    """
    x0 = np.atleast_2d(np.asarray(x0, float))
    t0, t1 = cfg.t_span
    sign = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)

    # integrate in s = |t - t0|, reversing the field for backward time
    if sign > 0:
        def g(s, y):
            return field(t0 + s, y)
    else:
        def g(s, y):
            return -field(t0 - s, y)

    with np.errstate(all="ignore"):
        return _integrate(g, t0, sign, span, x0, cfg)


def _integrate(g, t0, sign, span, x0, cfg):
    batch, dim = x0.shape
    active = np.arange(batch)
    y = x0.copy()
    status = [COMPLETED] * batch
    f = g(0.0, y)
    ok = _row_ok(y, f, cfg.divergence_bound)
    for i in active[~ok]:
        status[i] = DIVERGED
    active, y, f = active[ok], y[ok], f[ok]
    ts: list[float] = [0.0]
    members: list[np.ndarray] = [active.copy()]
    ys: list[np.ndarray] = [y.copy()]
    fs: list[np.ndarray] = [f.copy()]

    s = 0.0
    steps = 0
    adaptive = cfg.method == "rk45"
    if span == 0.0 or len(active) == 0:
        h = 0.0
    elif adaptive:
        h = _initial_step(g, 0.0, y, f, span, cfg.rtol, cfg.atol)
    else:
        h = cfg.step
    h = min(h, cfg.max_step)

    while len(active) and s < span:
        if steps >= cfg.max_step_count:
            for i in active:
                status[i] = STEP_LIMIT
            break
        h = min(h, span - s)
        if span - s - h < 1e-12 * max(1.0, span):
            h = span - s
        if adaptive:
            y_new, f_new, err = _rk45_step(g, s, y, f, h)
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
            en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
            finite = np.isfinite(en)
            enorm = float(np.max(en[finite])) if finite.any() else 0.0
            if not finite.all():
                # non-finite members: shrink unless the step is already tiny
                if h > 1e-12 * max(1.0, abs(s)):
                    h *= 0.25
                    continue
            if enorm > 1.0:
                h *= max(0.2, 0.9 * enorm ** -0.2)
                if h < 1e-14 * max(1.0, abs(s)):
                    for i in active:
                        status[i] = STEP_LIMIT
                    break
                continue
            factor = 5.0 if enorm == 0.0 else min(5.0, 0.9 * enorm ** -0.2)
            h_next = min(h * factor, cfg.max_step)
        else:
            y_new, f_new, _ = _rk4_step(g, s, y, f, h)
            h_next = cfg.step
        s = s + h
        steps += 1
        ok = _row_ok(y_new, f_new, cfg.divergence_bound)
        if not ok.all():
            for i in active[~ok]:
                status[i] = DIVERGED
            active, y_new, f_new = active[ok], y_new[ok], f_new[ok]
        if len(active):
            ts.append(s)
            members.append(active.copy())
            ys.append(y_new.copy())
            fs.append(f_new.copy())
        y, f, h = y_new, f_new, h_next

    return _assemble(ts, members, ys, fs, status, batch, dim, t0, sign)


def _row_ok(y, f, bound):
    return (np.all(np.isfinite(y), axis=1) & np.all(np.isfinite(f), axis=1)
            & (np.linalg.norm(y, axis=1) <= bound))


def _assemble(ts, members, ys, fs, status, batch, dim, t0, sign):
    per_t: list[list[float]] = [[] for _ in range(batch)]
    per_x: list[list[np.ndarray]] = [[] for _ in range(batch)]
    per_f: list[list[np.ndarray]] = [[] for _ in range(batch)]
    for s, idx, y, f in zip(ts, members, ys, fs):
        for row, i in enumerate(idx):
            per_t[i].append(s)
            per_x[i].append(y[row])
            per_f[i].append(f[row])
    out = []
    for i in range(batch):
        if not per_t[i]:
            out.append(Trajectory(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim)), status[i]))
            continue
        s = np.asarray(per_t[i])
        x = np.asarray(per_x[i])
        dx = np.asarray(per_f[i])
        if sign > 0:
            out.append(Trajectory(t0 + s, x, dx, status[i]))
        else:
            # field was reversed; restore physical time and derivative
            out.append(Trajectory((t0 - s)[::-1], x[::-1], -dx[::-1], status[i]))
    return out


def flow(field: Field, x0, cfg: IntegratorConfig) -> Trajectory:
    """Integrate a single initial state; `field` receives ``(1, dim)`` arrays."""
    return flow_batch(field, np.asarray(x0, float)[None, :], cfg)[0]


# ---------------------------------------------------------------------------
# Saturated core flow

@dataclass(frozen=True)
class SaturationProfile:
    """Radii of the radial cutoff: weight 1 inside ``R1``, 0 outside ``R2``."""

    R1: float
    R2: float

    def __post_init__(self):
        if not 0 < self.R1 < self.R2:
            raise ValueError("saturation radii must satisfy 0 < R1 < R2")

    @classmethod
    def from_orbit_radius(cls, R: float) -> "SaturationProfile":
        return cls(R, 1.5 * R)


def saturation_weight(z, sat: SaturationProfile, grad: bool = False):
    """C1 smoothstep cutoff ``a0(z)`` and optionally its gradient."""
    z = np.asarray(z, float)
    r = np.linalg.norm(z, axis=-1)
    u = np.clip((sat.R2 - r) / (sat.R2 - sat.R1), 0.0, 1.0)
    a = u * u * (3.0 - 2.0 * u)
    if not grad:
        return a
    inside = (u > 0.0) & (u < 1.0)
    ds_du = 6.0 * u * (1.0 - u)
    with np.errstate(invalid="ignore", divide="ignore"):
        dr = np.where(r[..., None] > 0, z / r[..., None], 0.0)
    g = np.where(inside[..., None], -ds_du[..., None] / (sat.R2 - sat.R1) * dr, 0.0)
    return a, g


def build_saturated_field(core, sat: SaturationProfile) -> Field:
    """``z -> a0(z) f0(z)``; identical to ``f0`` for ``|z| <= R1``, zero beyond ``R2``."""

    def field(t, z):
        a = saturation_weight(z, sat)
        out = core.f0(z)
        return np.where(a[..., None] == 1.0, out, a[..., None] * out)

    return field


def core_field(core) -> Field:
    def field(t, z):
        return core.f0(z)
    return field


def estimate_orbit_radius(core, Z_samples, T_orbit: float,
                          cfg: IntegratorConfig | None = None,
                          floor: float = 1.0) -> tuple[float, bool]:
    """1.25 times the largest norm reached by ``z' = f0(z)`` from `Z_samples`.

    Returns ``(R, floored)``; ``floored`` is true when the estimate was zero
    and the minimum radius `floor` was used instead.

    Raises
    ------
    AssumptionViolation
        Some sampled trajectory diverged, so the positive orbit of Z is not
        numerically bounded.
    """
    cfg = (cfg or IntegratorConfig()).with_span(0.0, T_orbit)
    trajs = flow_batch(core_field(core), np.asarray(Z_samples, float), cfg)
    sup = 0.0
    for tr in trajs:
        if tr.status != COMPLETED:
            raise AssumptionViolation(
                "attractivity assumption violated numerically: "
                f"trajectory from {tr.x[0]} {tr.status}")
        # include dense points between steps
        tt = np.linspace(tr.t[0], tr.t[-1], 4 * len(tr.t))
        sup = max(sup, float(np.max(np.linalg.norm(tr(tt), axis=1))),
                  float(np.max(np.linalg.norm(tr.x, axis=1))))
    R = 1.25 * sup
    if R <= 0.0:
        return floor, True
    return R, False


def write_trajectory_csv(traj: Trajectory, fh=None, names: Sequence[str] | None = None,
                         extra: dict[str, np.ndarray] | None = None) -> str:
    """Trajectory as CSV with header ``t,s0,s1,...``; 17 significant digits."""
    buf = fh if fh is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = traj.x.shape[1]
    cols = list(names) if names is not None else [f"s{i}" for i in range(dim)]
    extra = extra or {}
    w.writerow(["t"] + cols + list(extra))
    for r in range(len(traj.t)):
        row = [traj.t[r]] + list(traj.x[r]) + [extra[k][r] for k in extra]
        w.writerow([format(float(v), ".17g") for v in row])
    return buf.getvalue() if fh is None else ""
