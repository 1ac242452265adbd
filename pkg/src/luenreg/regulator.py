"""Internal-model regulator ``eta' = F eta + G u``, ``u = gamma(eta) + v`` and gain tuning."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gamma import GammaMap
from .observer import ObserverPair

__all__ = ["Controller", "controller_rhs", "TuningResult", "autotune_kappa"]

LINEAR = "linear"
SATURATED = "saturated"


@dataclass(frozen=True, eq=False)
class Controller:
    """Regulator data; ``v = -kappa phi(y)``, clipped to ``[-M, M]`` before scaling when saturated."""

    pair: ObserverPair
    gamma: GammaMap | None
    kappa: float
    phi: object
    mode: str = LINEAR
    sat_level: float = math.inf

    def __post_init__(self):
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be positive and finite, got {self.kappa}")
        if self.mode not in (LINEAR, SATURATED):
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if self.mode == SATURATED and not self.sat_level > 0:
            raise ValueError("saturated mode needs a positive saturation level")
        if self.gamma is not None and self.gamma.x.shape[1] != self.pair.m:
            raise ValueError("gamma and the observer pair disagree on m")

    @property
    def m(self) -> int:
        return self.pair.m

    def with_kappa(self, kappa: float) -> "Controller":
        return replace(self, kappa=float(kappa))

    def saturated(self, level: float) -> "Controller":
        return replace(self, mode=SATURATED, sat_level=float(level))

    def gamma_eval(self, eta) -> np.ndarray:
        eta = np.asarray(eta, float)
        if self.gamma is None:
            return np.zeros(eta.shape[:-1])
        return self.gamma(eta)

    def v_eval(self, chi) -> np.ndarray:
        chi = np.asarray(chi, float)
        if self.mode == SATURATED:
            chi = np.clip(chi, -self.sat_level, self.sat_level)
        return -self.kappa * chi


def controller_rhs(c: Controller, eta, y):
    """``(eta', u)`` for controller states ``(..., m)`` and outputs ``(..., p)``."""
    eta = np.asarray(eta, float)
    chi = c.phi(np.asarray(y, float))
    u = c.gamma_eval(eta) + c.v_eval(chi)
    eta_dot = eta @ c.pair.F.T + np.multiply.outer(u, c.pair.G)
    return eta_dot, u


@dataclass
class TuningResult:
    kappa: float
    accepted: bool
    trace: list[dict] = field(default_factory=list)
    chi_max: float = 0.0

    @property
    def best(self) -> dict:
        bounded = [r for r in self.trace if r["bounded"]]
        pool = bounded or self.trace
        return min(pool, key=lambda r: r["tail_sup_chi"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kappa", "tail_sup_chi", "tail_sup_e", "bounded_flag"])
        for r in self.trace:
            w.writerow([format(r["kappa"], ".17g"), format(r["tail_sup_chi"], ".17g"),
                        format(r["tail_sup_e"], ".17g"), int(r["bounded"])])
        return buf.getvalue()


def autotune_kappa(plant, c: Controller, sim_cfg, kappa0: float, kappa_max: float,
                   target_tail: float, inits) -> TuningResult:
    """Double ``kappa`` from `kappa0` until the tail of ``|chi|`` meets `target_tail`.

    Every candidate is simulated from all `inits` (rows of ``(z, zeta, eta)``)
    over ``sim_cfg``. The first candidate whose runs all stay bounded and
    whose worst tail sup of ``|chi|`` is at most `target_tail` is accepted.
    If ``kappa_max`` is passed without acceptance the result has
    ``accepted=False`` and ``kappa`` set to the best candidate seen.
    """
    from .validate import compute_metrics, simulate_closed_loop

    if not kappa0 > 0:
        raise ValueError("kappa0 must be positive")
    if kappa_max < kappa0:
        raise ValueError("kappa_max must be at least kappa0")
    result = TuningResult(kappa=kappa0, accepted=False)
    kappa = float(kappa0)
    while kappa <= kappa_max * (1 + 1e-12):
        runs = simulate_closed_loop(plant, c.with_kappa(kappa), inits, sim_cfg)
        mets = [compute_metrics(r, tail_frac=sim_cfg.tail_frac) for r in runs]
        bounded = all(mt.bounded for mt in mets)
        chi_tail = max(mt.tail_sup_chi for mt in mets)
        e_tail = max(mt.tail_sup_e for mt in mets)
        result.chi_max = max(result.chi_max, max(mt.sup_chi for mt in mets))
        result.trace.append({"kappa": kappa, "tail_sup_chi": chi_tail,
                             "tail_sup_e": e_tail, "bounded": bounded})
        if bounded and chi_tail <= target_tail:
            result.kappa, result.accepted = kappa, True
            return result
        kappa *= 2.0
    result.kappa = result.best["kappa"]
    return result
