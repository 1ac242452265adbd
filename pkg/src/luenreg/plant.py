"""Plant description, initial-condition sets and the derived core fields.

The plant is

    z' = f(z, zeta),   zeta' = q(z, zeta) + u,   e = h(z, zeta),   y = k(z, zeta)

with a stabilising virtual feedback ``zeta = alpha(z)`` and an output map
``phi`` recovering ``chi = zeta - alpha(z)`` from ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import expr as ex

__all__ = [
    "Box", "Ball", "Interval", "PlantModel", "CoreFields",
    "derive_core", "to_transformed", "from_transformed", "eval_measured_chi",
    "consistency_residual", "zero_output_residual",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lower <= z <= upper``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("box bounds differ in dimension")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("box lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def radius(self) -> float:
        """Largest Euclidean norm of a point of the box."""
        corner = np.maximum(np.abs(self.lower), np.abs(self.upper))
        return float(np.linalg.norm(corner))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (hi - lo) * rng.random((count, self.dim))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lower, float), np.asarray(self.upper, float)


@dataclass(frozen=True)
class Ball:
    """Euclidean ball, or annulus when ``inner_radius > 0``."""

    center: tuple[float, ...]
    radius: float
    inner_radius: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.inner_radius <= self.radius:
            raise ValueError("ball radii must satisfy 0 <= inner_radius <= radius")

    @property
    def dim(self) -> int:
        return len(self.center)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        # uniform in volume between the two radii
        d = self.dim
        v = rng.standard_normal((count, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        lo, hi = self.inner_radius ** d, self.radius ** d
        r = (lo + (hi - lo) * rng.random(count)) ** (1.0 / d)
        return np.asarray(self.center) + v * r[:, None]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("interval lower bound exceeds upper bound")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random(count)


@dataclass(frozen=True, eq=False)
class PlantModel:
    """User plant with the data of the stabilisability assumption.

    Expressions in ``f``, ``q``, ``h`` and ``k`` are over ``z1..zn, zeta``;
    ``alpha`` is over ``z1..zn``; ``phi`` is over ``y1..yp``.
    """

    n: int
    p: int
    f: tuple[ex.Expr, ...]
    q: ex.Expr
    h: ex.Expr
    k: tuple[ex.Expr, ...]
    alpha: ex.Expr
    phi: ex.Expr
    Z: Box | Ball
    Xi: Interval
    name: str = "plant"
    attraction_rate: float = 1.0

    def __post_init__(self):
        if len(self.f) != self.n:
            raise ValueError(f"f has {len(self.f)} components, expected n={self.n}")
        if len(self.k) != self.p:
            raise ValueError(f"k has {len(self.k)} components, expected p={self.p}")
        if self.Z.dim != self.n:
            raise ValueError(f"Z has dimension {self.Z.dim}, expected n={self.n}")
        for label, exprs, allowed in (
            ("f", self.f, self.zeta_vars),
            ("q", (self.q,), self.zeta_vars),
            ("h", (self.h,), self.zeta_vars),
            ("k", self.k, self.zeta_vars),
            ("alpha", (self.alpha,), self.z_vars),
            ("phi", (self.phi,), self.y_vars),
        ):
            for e in exprs:
                extra = ex.free_vars(e) - set(allowed)
                if extra:
                    raise ValueError(f"{label} uses undeclared variables {sorted(extra)}")

    @classmethod
    def from_strings(cls, n: int, p: int, f: Sequence[str], q: str, h: str,
                     k: Sequence[str], alpha: str, phi: str, Z, Xi, **kw) -> "PlantModel":
        zv = tuple(f"z{i + 1}" for i in range(n))
        zz = zv + ("zeta",)
        yv = tuple(f"y{j + 1}" for j in range(p))
        return cls(
            n=n, p=p,
            f=tuple(ex.parse(s, zz) for s in f),
            q=ex.parse(q, zz), h=ex.parse(h, zz),
            k=tuple(ex.parse(s, zz) for s in k),
            alpha=ex.parse(alpha, zv), phi=ex.parse(phi, yv),
            Z=Z, Xi=Xi, **kw)

    @property
    def z_vars(self) -> tuple[str, ...]:
        return tuple(f"z{i + 1}" for i in range(self.n))

    @property
    def zeta_vars(self) -> tuple[str, ...]:
        return self.z_vars + ("zeta",)

    @property
    def y_vars(self) -> tuple[str, ...]:
        return tuple(f"y{j + 1}" for j in range(self.p))

    # compiled callables, all vectorised over leading axes -----------------

    @cached_property
    def _f(self):
        return ex.compile_vector(self.f, self.zeta_vars)

    @cached_property
    def _q(self):
        return ex.compile_expr(self.q, self.zeta_vars)

    @cached_property
    def _h(self):
        return ex.compile_expr(self.h, self.zeta_vars)

    @cached_property
    def _k(self):
        return ex.compile_vector(self.k, self.zeta_vars)

    @cached_property
    def _alpha(self):
        return ex.compile_expr(self.alpha, self.z_vars)

    @cached_property
    def _phi(self):
        return ex.compile_expr(self.phi, self.y_vars)

    def f_eval(self, z, zeta):
        z = np.asarray(z, float)
        return _vec(self._f(*np.moveaxis(z, -1, 0), zeta),
                    _batch(z, zeta), self.n)

    def q_eval(self, z, zeta):
        z = np.asarray(z, float)
        return _bcast(self._q(*np.moveaxis(z, -1, 0), zeta), _batch(z, zeta))

    def h_eval(self, z, zeta):
        z = np.asarray(z, float)
        return _bcast(self._h(*np.moveaxis(z, -1, 0), zeta), _batch(z, zeta))

    def k_eval(self, z, zeta):
        z = np.asarray(z, float)
        return _vec(self._k(*np.moveaxis(z, -1, 0), zeta),
                    _batch(z, zeta), self.p)

    def alpha_eval(self, z):
        z = np.asarray(z, float)
        return _bcast(self._alpha(*np.moveaxis(z, -1, 0)), z.shape[:-1])

    def phi_eval(self, y):
        y = np.asarray(y, float)
        return _bcast(self._phi(*np.moveaxis(y, -1, 0)), y.shape[:-1])

    def sample_box(self, rng: np.random.Generator, count: int, inflate: float = 1.5):
        """Samples ``(z, zeta)`` from a box containing ``Z x Xi``."""
        lo, hi = self.Z.bounding_box()
        c, r = (lo + hi) / 2, (hi - lo) / 2 * inflate + 1e-3
        z = c + r * (2 * rng.random((count, self.n)) - 1)
        xc, xr = (self.Xi.lower + self.Xi.upper) / 2, (self.Xi.upper - self.Xi.lower) / 2
        zeta = xc + (xr * inflate + 1e-3) * (2 * rng.random(count) - 1)
        return z, zeta


def _bcast(v, shape):
    """Constant expressions compile to scalars; give them the batch shape."""
    v = np.asarray(v, float)
    if v.shape != tuple(shape):
        v = np.broadcast_to(v, tuple(shape)).copy()
    return v


def _batch(z, s):
    return np.broadcast_shapes(z.shape[:-1], np.shape(s))


def _vec(v, shape, n):
    return _bcast(v, tuple(shape) + (n,))


@dataclass(frozen=True, eq=False)
class CoreFields:
    """Fields of the core subsystem obtained by closing ``zeta = alpha(z)``.

    ``f0(z) = f(z, alpha(z))`` and
    ``q0(z) = q(z, alpha(z)) - (d alpha/dz) f(z, alpha(z))``; ``f1`` and ``q1``
    collect the remainders so that the transformed closed loop reads
    ``z' = f0 + f1``, ``chi' = q0 + q1 + u``.
    """

    plant: PlantModel
    f0_exprs: tuple[ex.Expr, ...]
    q0_expr: ex.Expr
    f1_exprs: tuple[ex.Expr, ...]
    q1_expr: ex.Expr
    dalpha: tuple[ex.Expr, ...]
    jac_f0: tuple[tuple[ex.Expr, ...], ...] | None = field(default=None)

    @property
    def n(self) -> int:
        return self.plant.n

    @cached_property
    def _f0(self):
        return ex.compile_vector(self.f0_exprs, self.plant.z_vars)

    @cached_property
    def _q0(self):
        return ex.compile_expr(self.q0_expr, self.plant.z_vars)

    @cached_property
    def _f1(self):
        return ex.compile_vector(self.f1_exprs, self.plant.z_vars + ("chi",))

    @cached_property
    def _q1(self):
        return ex.compile_expr(self.q1_expr, self.plant.z_vars + ("chi",))

    @cached_property
    def _jac(self):
        if self.jac_f0 is None:
            raise ex.DiffError("Jacobian of f0 unavailable")
        flat = [e for row in self.jac_f0 for e in row]
        return ex.compile_vector(flat, self.plant.z_vars)

    def f0(self, z):
        z = np.asarray(z, float)
        return _vec(self._f0(*np.moveaxis(z, -1, 0)), z.shape[:-1], self.n)

    def q0(self, z):
        z = np.asarray(z, float)
        return _bcast(self._q0(*np.moveaxis(z, -1, 0)), z.shape[:-1])

    def f1(self, z, chi):
        z = np.asarray(z, float)
        return _vec(self._f1(*np.moveaxis(z, -1, 0), chi),
                    _batch(z, chi), self.n)

    def q1(self, z, chi):
        z = np.asarray(z, float)
        return _bcast(self._q1(*np.moveaxis(z, -1, 0), chi), _batch(z, chi))

    def jacobian_f0(self, z):
        """Jacobian of ``f0``, shape ``(..., n, n)``."""
        z = np.asarray(z, float)
        flat = _vec(self._jac(*np.moveaxis(z, -1, 0)), z.shape[:-1], self.n * self.n)
        return flat.reshape(z.shape[:-1] + (self.n, self.n))


def derive_core(plant: PlantModel) -> CoreFields:
    """Build ``f0, q0, f1, q1`` symbolically from the plant.

    Raises `expr.DiffError` when ``alpha`` (or ``f0`` for the Jacobian) is
    not differentiable.
    """
    zv = plant.z_vars
    chi = ex.Var("chi")
    at_alpha = {"zeta": plant.alpha}
    at_shift = {"zeta": ex.Add(plant.alpha, chi)}
    f0 = tuple(ex.substitute(fi, at_alpha) for fi in plant.f)
    dalpha = tuple(ex.diff(plant.alpha, v) for v in zv)

    def lie_alpha(fields):
        acc: ex.Expr = ex.ZERO
        for da, fi in zip(dalpha, fields):
            acc = ex._add(acc, ex._mul(da, fi))
        return acc

    q_at = ex.substitute(plant.q, at_alpha)
    q0 = ex._sub(q_at, lie_alpha(f0))
    f_shift = tuple(ex.substitute(fi, at_shift) for fi in plant.f)
    f1 = tuple(ex._sub(a, b) for a, b in zip(f_shift, f0))
    q1 = ex._sub(ex._sub(ex.substitute(plant.q, at_shift), q_at), lie_alpha(f1))
    try:
        jac = tuple(tuple(ex.diff(fi, v) for v in zv) for fi in f0)
    except ex.DiffError:
        jac = None
    return CoreFields(plant, f0, q0, f1, q1, dalpha, jac)


def to_transformed(plant: PlantModel, G, z, zeta, eta):
    """``(z, zeta, eta) -> (z, chi, x)`` with ``chi = zeta - alpha(z)``, ``x = eta - G chi``."""
    z = np.asarray(z, float)
    chi = np.asarray(zeta, float) - plant.alpha_eval(z)
    x = np.asarray(eta, float) - np.multiply.outer(chi, np.asarray(G, float))
    return z, chi, x


def from_transformed(plant: PlantModel, G, z, chi, x):
    """Inverse of `to_transformed`."""
    z = np.asarray(z, float)
    chi = np.asarray(chi, float)
    zeta = chi + plant.alpha_eval(z)
    eta = np.asarray(x, float) + np.multiply.outer(chi, np.asarray(G, float))
    return z, zeta, eta


def eval_measured_chi(plant: PlantModel, z, zeta):
    """``phi(k(z, zeta))``, which equals ``zeta - alpha(z)`` for a valid plant."""
    return plant.phi_eval(plant.k_eval(z, zeta))


def consistency_residual(plant: PlantModel, rng: np.random.Generator, count: int = 1000) -> float:
    """Max of ``|phi(k(z, zeta)) - (zeta - alpha(z))|`` over a box around ``Z x Xi``."""
    z, zeta = plant.sample_box(rng, count)
    with np.errstate(all="ignore"):
        r = eval_measured_chi(plant, z, zeta) - (zeta - plant.alpha_eval(z))
    r = np.abs(r)
    return float(np.max(r)) if np.all(np.isfinite(r)) else float("inf")


def zero_output_residual(plant: PlantModel, z_samples) -> float:
    """Max of ``|h(z, alpha(z))|`` over attractor samples."""
    z = np.asarray(z_samples, float)
    return float(np.max(np.abs(plant.h_eval(z, plant.alpha_eval(z)))))
