"""Partial-injectivity diagnostic and the output map gamma of the internal model.

The diagnostic works on pairwise distances of the tau samples. With
``d_ij = |x_i - x_j|`` and ``D_ij = |y_i - y_j|``,

    phi(s) = max {D_ij : d_ij <= s},    rho(s) = (1/s) int_s^{2s} phi + s.

The map ``tau`` separates what ``q0`` needs when ``phi(s) -> 0`` as ``s -> 0``.
With finitely many samples this is checked at the sampling resolution.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.integrate import trapezoid
from scipy.spatial.distance import pdist

__all__ = [
    "InjectivityReport", "GammaMap", "injectivity_diagnostic", "fit_gamma",
    "eval_gamma", "covering_radius", "path_covering_radius",
]

MCSHANE = "mcshane"
NEAREST = "nearest"


@dataclass(frozen=True, eq=False)
class InjectivityReport:
    s: np.ndarray
    phi: np.ndarray
    rho: np.ndarray
    lipschitz: float
    s_ref: float
    phi_ref: float
    y_range: float
    tol: float
    passed: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "phi", "rho"])
        for row in zip(self.s, self.phi, self.rho):
            w.writerow([format(float(v), ".17g") for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "lipschitz": self.lipschitz,
            "s_ref": self.s_ref,
            "phi_ref": self.phi_ref,
            "phi_min_grid": float(self.phi[0]) if len(self.phi) else 0.0,
            "y_range": self.y_range,
            "tol": self.tol,
        }


def _pairs(x, y):
    d = pdist(np.asarray(x, float))
    D = pdist(np.asarray(y, float).reshape(-1, 1))
    return d, D


def injectivity_diagnostic(samples, grid_size: int = 64, tol: float = 0.25,
                           eps_d: float = 1e-9, nn_quantile: float = 0.9,
                           sub_points: int = 17) -> InjectivityReport:
    """Empirical modulus of ``y`` as a function of ``x`` over the sample pairs.

    Parameters
    ----------
    samples : TauSampleSet
    grid_size : int
        Number of log-spaced points between the smallest positive and the
        largest pairwise ``|x_i - x_j|``.
    tol : float
        The diagnostic passes when ``phi`` at the sampling resolution, and at
        the smallest grid point, is at most ``tol`` times the range of ``y``.
    eps_d : float
        Distance floor in the Lipschitz estimate.
    nn_quantile : float
        Quantile of the nearest-neighbour distances in x used as the
        sampling resolution ``s_ref``.
    """
    x = np.asarray(samples.x, float)
    y = np.asarray(samples.y, float)
    if len(y) < 2:
        raise ValueError("injectivity diagnostic needs at least two samples")
    d, D = _pairs(x, y)
    order = np.argsort(d, kind="stable")
    d_sorted = d[order]
    phi_sorted = np.maximum.accumulate(D[order])

    def phi_at(s):
        idx = np.searchsorted(d_sorted, s, side="right") - 1
        return np.where(idx >= 0, phi_sorted[np.maximum(idx, 0)], 0.0)

    pos = d[d > 0]
    s_lo = float(pos.min()) if len(pos) else eps_d
    s_hi = float(pos.max()) if len(pos) else eps_d
    s = np.geomspace(s_lo, max(s_hi, s_lo), grid_size) if s_hi > s_lo else np.full(1, s_lo)
    phi = phi_at(s)
    u = np.linspace(1.0, 2.0, sub_points)
    rho = trapezoid(phi_at(s[:, None] * u[None, :]), u, axis=1) + s
    # the + s term can fall below one ulp of phi; keep rho strictly increasing
    for k in range(1, len(rho)):
        if rho[k] <= rho[k - 1]:
            rho[k] = np.nextafter(rho[k - 1], np.inf)

    lip = float(np.max(D / np.maximum(d, eps_d)))
    nn = cKDTree(x).query(x, k=2)[0][:, 1]
    s_ref = float(np.quantile(nn, nn_quantile))
    phi_ref = float(phi_at(s_ref))
    y_range = float(np.ptp(y))
    limit = tol * y_range + 1e-12
    passed = bool(phi_ref <= limit and phi[0] <= limit)
    return InjectivityReport(s, phi, rho, lip, s_ref, phi_ref, y_range, tol, passed)


def covering_radius(points, region) -> float:
    """Largest distance from a point of `region` to the nearest of `points`."""
    return float(np.max(cKDTree(np.asarray(points, float)).query(np.asarray(region, float))[0]))


def path_covering_radius(points, paths) -> float:
    """Upper bound on the distance from any point of the sampled `paths` to `points`.

    `paths` has shape ``(k, t, n)``. Distance to `points` is 1-Lipschitz, so on
    a chord of length ``l`` between grid states at distances ``d0`` and ``d1``
    it is at most ``(d0 + d1 + l) / 2``.
    """
    paths = np.asarray(paths, float)
    k, t, n = paths.shape
    d = cKDTree(np.asarray(points, float)).query(paths.reshape(-1, n))[0].reshape(k, t)
    if t < 2:
        return float(d.max())
    chord = np.linalg.norm(np.diff(paths, axis=1), axis=2)
    return float(np.max((d[:, :-1] + d[:, 1:] + chord) / 2))


@dataclass(frozen=True, eq=False)
class GammaMap:
    """Extension of the sampled relation ``x_i -> y_i`` to all of R^m.

    ``mcshane`` is ``min_i (y_i + L |x - x_i|)``: L-Lipschitz and exact at
    samples whenever the data are L-Lipschitz. ``nearest`` returns the value
    at the closest sample and is piecewise constant.
    """

    x: np.ndarray
    y: np.ndarray
    mode: str
    lipschitz: float

    def __post_init__(self):
        if self.mode not in (MCSHANE, NEAREST):
            raise ValueError(f"unknown gamma mode {self.mode!r}")

    def __call__(self, x) -> np.ndarray:
        return eval_gamma(self, x)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "lipschitz": self.lipschitz,
            "x": self.x.tolist(),
            "y": self.y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GammaMap":
        return cls(np.array(d["x"], float), np.array(d["y"], float), d["mode"], float(d["lipschitz"]))


def fit_gamma(samples, mode: str | None = None, report: InjectivityReport | None = None,
              eps_d: float = 1e-9) -> GammaMap:
    """Fit ``gamma`` to the tau samples.

    With ``mode=None`` the McShane form is used unless all ``y_i`` agree, in
    which case the nearest-neighbour form gives the constant exactly.
    """
    x = np.asarray(samples.x, float)
    y = np.asarray(samples.y, float)
    if len(y) == 0:
        raise ValueError("cannot fit gamma to an empty sample set")
    if report is not None and not report.passed:
        warnings.warn("injectivity diagnostic failed; gamma may not reproduce -q0", stacklevel=2)
    if mode is None:
        mode = NEAREST if np.ptp(y) == 0 else MCSHANE
    if len(y) > 1:
        d, D = _pairs(x, y)
        lip = float(np.max(D / np.maximum(d, eps_d)))
    else:
        lip = 0.0
    # widen slightly so rounding cannot break exactness at the samples
    return GammaMap(x, y, mode, lip * (1.0 + 1e-9))


def eval_gamma(g: GammaMap, x, chunk: int = 256) -> np.ndarray:
    """``gamma`` at one point ``(m,)`` or many points ``(..., m)``."""
    x = np.asarray(x, float)
    flat = x.reshape(-1, g.x.shape[1])
    out = np.empty(len(flat))
    for a in range(0, len(flat), chunk):
        q = flat[a:a + chunk]
        diff = q[:, None, :] - g.x[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        if g.mode == MCSHANE:
            out[a:a + chunk] = np.min(g.y[None, :] + g.lipschitz * dist, axis=1)
        else:
            out[a:a + chunk] = g.y[np.argmin(dist, axis=1)]
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else out[0]
