"""Internal-model synthesis: the Hurwitz pair (F, G), the map tau and its samples.

For the core cascade

    z' = f0(z),    x' = F x - G q0(z)

the graph of

    tau(z) = -int_{-inf}^0 exp(-F s) G q0(zhat(s, z)) ds

over the attractor is forward invariant, where ``zhat`` is the flow of the
saturated field ``a0(z) f0(z)``. The integral is truncated at ``-T_trunc``
with an explicit exponential tail bound.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .ode import (
    COMPLETED, AssumptionViolation, IntegratorConfig, SaturationProfile,
    build_saturated_field, core_field, flow_batch, saturation_weight,
)

__all__ = [
    "ObserverPair", "ControllabilityError", "TauSampleSet",
    "estimate_ell", "sup_abs_q0", "sample_eigenvalues", "realify", "sample_pair",
    "compute_tau", "default_truncation", "sample_attractor", "build_tau_samples",
]

ELL_MIN = 0.1


class ControllabilityError(ValueError):
    """The pair (F, G) failed the Kalman rank test; resample the eigenvalues."""


@dataclass(frozen=True, eq=False)
class ObserverPair:
    """Real ``m = 2(n+1)`` dimensional Hurwitz pair with its complex data."""

    F: np.ndarray
    G: np.ndarray
    eigenvalues: np.ndarray
    gains: np.ndarray
    ell: float

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @cached_property
    def _eig(self):
        mu, V = np.linalg.eig(self.F)
        return mu, V, np.linalg.solve(V, self.G.astype(complex))

    @cached_property
    def C_F(self) -> float:
        """Constant with ``|exp(F t)| <= C_F exp(-ell t)`` for ``t >= 0``."""
        F = self.F
        if np.allclose(F @ F.T, F.T @ F, atol=1e-12 * max(1.0, np.abs(F).max() ** 2)):
            return 1.0
        return float(np.linalg.cond(self._eig[1]))

    def exp_neg_FtG(self, t) -> np.ndarray:
        """``exp(-F t) G`` for an array of times, shape ``(len(t), m)``."""
        mu, V, w = self._eig
        t = np.atleast_1d(np.asarray(t, float))
        return (np.exp(-np.outer(t, mu)) * w) @ V.T

    def expm(self, t: float) -> np.ndarray:
        mu, V, _ = self._eig
        return np.real(V @ np.diag(np.exp(mu * t)) @ np.linalg.inv(V))

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "ell": self.ell,
            "F": self.F.tolist(),
            "G": self.G.tolist(),
            "eigenvalues": [[float(l.real), float(l.imag)] for l in self.eigenvalues],
            "gains": self.gains.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObserverPair":
        lam = np.array([complex(a, b) for a, b in d["eigenvalues"]])
        return cls(np.array(d["F"], float), np.array(d["G"], float), lam,
                   np.array(d["gains"], float), float(d["ell"]))


# ---------------------------------------------------------------------------
# Decay margin

def _ball_grid(n: int, R: float, per_axis: int, rng=None) -> np.ndarray:
    if n <= 3:
        axes = [np.linspace(-R, R, per_axis)] * n
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    else:
        rng = rng or np.random.default_rng(0)
        pts = R * (2 * rng.random((per_axis ** 3, n)) - 1)
    return pts[np.linalg.norm(pts, axis=1) <= R * (1 + 1e-12)]


def estimate_ell(core, sat: SaturationProfile, per_axis: int = 61) -> float:
    """1.1 times the largest spectral norm of the Jacobian of ``a0 f0`` on the ``R2`` ball.

    The Jacobian is ``a0 Df0 + f0 (grad a0)^T`` with ``Df0`` symbolic. The
    result is floored at ``ELL_MIN``.
    """
    pts = _ball_grid(core.n, sat.R2, per_axis)
    a, ga = saturation_weight(pts, sat, grad=True)
    J = a[:, None, None] * core.jacobian_f0(pts) + core.f0(pts)[:, :, None] * ga[:, None, :]
    norms = np.linalg.norm(J, ord=2, axis=(1, 2))
    return max(1.1 * float(np.max(norms)), ELL_MIN)


def sup_abs_q0(core, sat: SaturationProfile, per_axis: int = 61) -> float:
    pts = _ball_grid(core.n, sat.R2, per_axis)
    return float(np.max(np.abs(core.q0(pts))))


# ---------------------------------------------------------------------------
# Eigenvalue selection

def sample_eigenvalues(n: int, ell: float, seed: int, margin: float = 0.5,
                       min_separation: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n + 1`` distinct complex eigenvalues with real part below ``-ell``.

    Real parts are uniform on ``[-3 (ell + margin), -(ell + margin)]`` and
    imaginary parts uniform on ``[0.2, 2] (ell + margin)``. All gains are 1.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    c = ell + margin
    while True:
        lam = -c * rng.uniform(1.0, 3.0, n + 1) + 1j * c * rng.uniform(0.2, 2.0, n + 1)
        sep = np.abs(lam[:, None] - lam[None, :])
        np.fill_diagonal(sep, np.inf)
        if sep.min() >= min_separation:
            return lam, np.ones(n + 1)


def realify(eigenvalues, gains, ell: float | None = None,
            threshold: float = 1e-8) -> ObserverPair:
    """Real block-diagonal form of ``F_c = diag(lambda_i)``, ``G_c = (g_i)``.

    Each ``lambda = a + i b`` becomes ``[[a, b], [-b, a]]`` and each gain
    ``g`` becomes ``[g, 0]``.

    Raises
    ------
    ControllabilityError
        The smallest singular value of the (scale-normalised) Kalman matrix is
        below `threshold`.
    """
    lam = np.asarray(eigenvalues, complex)
    g = np.asarray(gains, float)
    if np.any(lam.imag == 0):
        raise ValueError("eigenvalues must have nonzero imaginary part")
    if np.any(g == 0):
        raise ValueError("gains must be nonzero")
    if len(set(lam.tolist())) != len(lam):
        raise ValueError("eigenvalues must be distinct")
    m = 2 * len(lam)
    F = np.zeros((m, m))
    G = np.zeros(m)
    for i, (l, gi) in enumerate(zip(lam, g)):
        a, b = l.real, l.imag
        F[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[a, b], [-b, a]]
        G[2 * i] = gi
    if ell is None:
        ell = float(-np.max(lam.real))
    s = controllability_margin(F, G)
    if s < threshold:
        raise ControllabilityError(f"Kalman matrix singular value {s:.3g} < {threshold:g}")
    return ObserverPair(F, G, lam, g, float(ell))


def controllability_margin(F, G) -> float:
    """Smallest singular value of the Kalman matrix of ``(F/|F|, G/|G|)``."""
    m = F.shape[0]
    Fn = F / np.linalg.norm(F, 2)
    col = G / np.linalg.norm(G)
    cols = []
    for _ in range(m):
        cols.append(col)
        col = Fn @ col
    return float(np.linalg.svd(np.column_stack(cols), compute_uv=False)[-1])


def sample_pair(n: int, ell: float, seed: int, margin: float = 0.5,
                max_tries: int = 100) -> ObserverPair:
    """Sample eigenvalues and realify, resampling on a controllability failure."""
    for k in range(max_tries):
        lam, g = sample_eigenvalues(n, ell, seed + 7919 * k, margin)
        try:
            return realify(lam, g, ell)
        except ControllabilityError:
            continue
    raise ControllabilityError(f"no controllable pair after {max_tries} draws")


# ---------------------------------------------------------------------------
# tau

def truncation_bound(pair: ObserverPair, B_q: float, T_trunc: float) -> float:
    """Bound on the neglected tail ``int_{-inf}^{-T}`` of the tau integral."""
    return B_q * float(np.linalg.norm(pair.G)) * pair.C_F * math.exp(-pair.ell * T_trunc) / pair.ell


def default_truncation(pair: ObserverPair, B_q: float, tol: float = 1e-8) -> float:
    """Smallest horizon whose tail bound is `tol` (at least ``1/ell``)."""
    arg = B_q * float(np.linalg.norm(pair.G)) * pair.C_F / (pair.ell * tol)
    if arg <= 1.0:
        return 1.0 / pair.ell
    return max(math.log(arg) / pair.ell, 1.0 / pair.ell)


def _tau_field(core, pair: ObserverPair, sat: SaturationProfile | None):
    n = core.n
    zfield = build_saturated_field(core, sat) if sat is not None else core_field(core)
    mu, V, w = pair._eig
    VT = V.T

    def field(t, s):
        z = s[:, :n]
        dz = zfield(t, z)
        kern = np.real((np.exp(-mu * t) * w) @ VT)
        dacc = core.q0(z)[:, None] * kern[None, :]
        return np.concatenate([dz, dacc], axis=1)

    return field


def compute_tau(z, pair: ObserverPair, core, sat: SaturationProfile | None,
                T_trunc: float, cfg: IntegratorConfig | None = None) -> np.ndarray:
    """Truncated ``tau`` at one point ``(n,)`` or many points ``(N, n)``.

    The backward saturated flow is augmented with ``m`` accumulator states
    ``acc(t) = -int_t^0 exp(-F s) G q0(zhat(s)) ds`` and integrated from
    ``t = 0`` to ``t = -T_trunc``.
    """
    if T_trunc <= 0:
        raise ValueError("T_trunc must be positive")
    z = np.asarray(z, float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    cfg = cfg or IntegratorConfig(rtol=1e-10, atol=1e-13)
    x0 = np.concatenate([Z, np.zeros((len(Z), pair.m))], axis=1)
    trajs = flow_batch(_tau_field(core, pair, sat), x0, cfg.with_span(0.0, -T_trunc))
    out = np.empty((len(Z), pair.m))
    for i, tr in enumerate(trajs):
        if tr.status != COMPLETED:
            raise RuntimeError(f"tau integration {tr.status} from z={Z[i]}")
        out[i] = tr.x[0, core.n:]   # trajectory is stored in ascending time
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Attractor samples

def _dedup(points: np.ndarray, tol: float) -> np.ndarray:
    """Indices kept by a greedy pass that drops points within `tol` of a kept one."""
    if tol <= 0 or len(points) == 0:
        return np.arange(len(points))
    tree = cKDTree(points)
    kept = np.zeros(len(points), bool)
    for i in range(len(points)):
        near = tree.query_ball_point(points[i], tol)
        if not any(kept[j] for j in near if j != i):
            kept[i] = True
    return np.flatnonzero(kept)


def sample_attractor(core, Z_samples, burn_in: float, n_keep: int, mesh_tol: float,
                     window: float = 10.0, cfg: IntegratorConfig | None = None,
                     return_dense: bool = False):
    """Points near the attractor: states of ``z' = f0(z)`` after `burn_in`.

    Each trajectory contributes states at uniform times over
    ``[burn_in, burn_in + window]``; points are interleaved across
    trajectories, deduplicated at `mesh_tol` and capped at `n_keep`.
    With `return_dense` the states on a 20 times finer time grid are
    returned as well, shape ``(paths, times, n)``, for measuring how well
    the samples cover the paths.
    """
    if burn_in <= 0:
        raise ValueError("burn_in must be positive")
    Zs = np.atleast_2d(np.asarray(Z_samples, float))
    cfg = (cfg or IntegratorConfig(rtol=1e-10, atol=1e-12)).with_span(0.0, burn_in + window)
    trajs = flow_batch(core_field(core), Zs, cfg)
    per = max(1, math.ceil(n_keep / len(Zs)))
    times = burn_in + window * np.arange(per) / per
    fine = burn_in + window * np.arange(20 * per + 1) / (20 * per)
    blocks, dense = [], []
    for tr in trajs:
        if tr.status != COMPLETED:
            raise AssumptionViolation(
                "attractivity assumption violated numerically: "
                f"trajectory from {tr.x[0]} {tr.status}")
        blocks.append(tr(times))
        if return_dense:
            dense.append(tr(fine))
    pts = np.stack(blocks, axis=1).reshape(-1, core.n)   # time-major interleave
    pts = pts[_dedup(pts, mesh_tol)][:n_keep]
    if return_dense:
        return pts, np.stack(dense)
    return pts


@dataclass(frozen=True, eq=False)
class TauSampleSet:
    """Records ``(z_i, x_i = tau(z_i), y_i = -q0(z_i))``."""

    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    T_trunc: float = math.nan
    truncation_bound: float = math.nan
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.z) == len(self.x) == len(self.y)):
            raise ValueError("sample arrays differ in length")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite tau values")

    def __len__(self) -> int:
        return len(self.y)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n, m = self.z.shape[1], self.x.shape[1]
        w.writerow([f"z{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(m)] + ["y"])
        for zi, xi, yi in zip(self.z, self.x, self.y):
            w.writerow([format(float(v), ".17g") for v in (*zi, *xi, yi)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, **kw) -> "TauSampleSet":
        rows = list(csv.reader(io.StringIO(text)))
        header, data = rows[0], np.array(rows[1:], float).reshape(-1, len(rows[0]))
        n = sum(h.startswith("z") for h in header)
        m = sum(h.startswith("x") for h in header)
        return cls(data[:, :n], data[:, n:n + m], data[:, -1], **kw)


def build_tau_samples(core, pair: ObserverPair, sat: SaturationProfile | None, z_samples,
                      T_trunc: float, cfg: IntegratorConfig | None = None,
                      B_q: float | None = None) -> TauSampleSet:
    z = np.atleast_2d(np.asarray(z_samples, float))
    if len(z) == 0:
        raise ValueError("no attractor samples")
    x = compute_tau(z, pair, core, sat, T_trunc, cfg)
    y = -core.q0(z)
    bound = truncation_bound(pair, B_q, T_trunc) if B_q is not None else math.nan
    return TauSampleSet(z, x, np.asarray(y, float), T_trunc, bound)
