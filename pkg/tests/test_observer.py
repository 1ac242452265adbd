import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.spatial import cKDTree

from luenreg.observer import (
    ControllabilityError, ObserverPair, TauSampleSet, build_tau_samples, compute_tau,
    controllability_margin, default_truncation, estimate_ell, realify, sample_attractor,
    sample_eigenvalues, sample_pair, sup_abs_q0, truncation_bound,
)
from luenreg.ode import AssumptionViolation, IntegratorConfig, SaturationProfile, build_saturated_field
from luenreg.plant import Ball, Interval, PlantModel, derive_core

from conftest import Q_ROW_LINEAR, sylvester_T, zero_plant

TAU_CFG = IntegratorConfig(rtol=1e-10, atol=1e-13)


# ---------------------------------------------------------------------------
# decay margin

def test_ell_rotation_at_least_norm_of_S(linear_core):
    assert estimate_ell(linear_core, SaturationProfile(1.0, 1.5)) >= 1.1


def test_ell_zero_field_floor():
    assert estimate_ell(derive_core(zero_plant()), SaturationProfile(1.0, 1.5)) == 0.1


def test_ell_vdp_bounds_finite_difference_jacobian(vdp_core):
    sat = SaturationProfile(3.0, 4.5)
    ell = estimate_ell(vdp_core, sat)
    field = build_saturated_field(vdp_core, sat)
    g = np.linspace(-sat.R2, sat.R2, 61)
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    pts = pts[np.linalg.norm(pts, axis=1) <= sat.R2]
    h = 1e-6
    cols = [(field(0, pts + h * e) - field(0, pts - h * e)) / (2 * h) for e in np.eye(2)]
    J = np.stack(cols, axis=-1)
    fd_max = np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))
    assert math.isfinite(ell)
    assert ell >= 1.1 * fd_max * (1 - 1e-5)
    assert ell <= 1.1 * fd_max * (1 + 1e-3)


# ---------------------------------------------------------------------------
# eigenvalues and the real pair

@pytest.mark.parametrize("n, m", [(1, 4), (2, 6), (3, 8)])
def test_eigenvalue_count(n, m):
    lam, g = sample_eigenvalues(n, 1.0, seed=0)
    assert len(lam) == n + 1
    assert realify(lam, g).m == m


def test_eigenvalue_ranges_and_determinism():
    ell, margin = 2.0, 0.5
    c = ell + margin
    lam, g = sample_eigenvalues(4, ell, seed=11, margin=margin)
    lam2, _ = sample_eigenvalues(4, ell, seed=11, margin=margin)
    np.testing.assert_array_equal(lam, lam2)
    assert np.all(g == 1.0)
    assert np.all((lam.real >= -3 * c) & (lam.real <= -c))
    assert np.all((lam.imag >= 0.2 * c) & (lam.imag <= 2 * c))
    sep = np.abs(lam[:, None] - lam[None, :]) + np.eye(len(lam))
    assert sep.min() >= 1e-3


def test_realify_block():
    pair = realify([-1 + 1j], [1.0])
    np.testing.assert_array_equal(pair.F, [[-1, 1], [-1, -1]])
    np.testing.assert_array_equal(pair.G, [1, 0])
    mu = np.sort_complex(np.linalg.eigvals(pair.F))
    np.testing.assert_allclose(mu, [-1 - 1j, -1 + 1j], atol=1e-10)


def test_realify_spectrum_is_conjugate_multiset():
    lam, g = sample_eigenvalues(3, 1.5, seed=4)
    pair = realify(lam, g)
    expected = np.sort_complex(np.concatenate([lam, lam.conj()]))
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(pair.F)), expected, atol=1e-10)
    assert np.max(np.linalg.eigvals(pair.F).real) <= -1.5


def test_kalman_rank_n1():
    lam, g = sample_eigenvalues(1, 1.0, seed=2)
    pair = realify(lam, g)
    K = np.column_stack([np.linalg.matrix_power(pair.F, k) @ pair.G for k in range(4)])
    assert np.linalg.matrix_rank(K) == 4
    assert controllability_margin(pair.F, pair.G) >= 1e-8


def test_realify_rejects_bad_input():
    with pytest.raises(ValueError):
        realify([-1.0 + 0j], [1.0])
    with pytest.raises(ValueError):
        realify([-1 + 1j], [0.0])
    with pytest.raises(ValueError):
        realify([-1 + 1j, -1 + 1j], [1.0, 1.0])


def test_realify_flags_near_uncontrollable_pair():
    with pytest.raises(ControllabilityError):
        realify([-1 + 1j, -1 + 1j + 1e-12], [1.0, 1.0])


def test_pair_serialisation_round_trip():
    pair = sample_pair(2, 1.0, seed=3)
    back = ObserverPair.from_dict(pair.to_dict())
    np.testing.assert_array_equal(back.F, pair.F)
    np.testing.assert_array_equal(back.G, pair.G)
    np.testing.assert_array_equal(back.eigenvalues, pair.eigenvalues)
    assert back.ell == pair.ell


def test_expm_helpers_match_scipy():
    pair = sample_pair(2, 1.0, seed=5)
    for t in (0.0, 0.3, 2.0):
        np.testing.assert_allclose(pair.expm(t), expm(pair.F * t), atol=1e-12)
        np.testing.assert_allclose(pair.exp_neg_FtG([t])[0], expm(-pair.F * t) @ pair.G,
                                   rtol=1e-10, atol=1e-12)


def test_block_diagonal_pair_is_normal():
    # 2x2 blocks a I + b J are normal, so exp(Ft) decays with constant 1
    pair = sample_pair(2, 1.0, seed=0)
    assert pair.C_F == 1.0
    for t in np.linspace(0, 5, 11):
        assert np.linalg.norm(expm(pair.F * t), 2) <= math.exp(-pair.ell * t) + 1e-12


# ---------------------------------------------------------------------------
# tau

def test_tau_zero_for_zero_q0():
    core = derive_core(zero_plant())
    pair = sample_pair(2, 0.1, seed=0)
    z = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    np.testing.assert_array_equal(compute_tau(z, pair, core, SaturationProfile(1, 1.5), 5.0), 0.0)


def test_tau_sylvester_oracle(linear_synth, linear_T):
    s = linear_synth
    z = s.attractor[:50]
    x = compute_tau(z, s.pair, s.core, s.sat, 30.0 / s.pair.ell, TAU_CFG)
    ref = z @ linear_T.T
    rel = np.linalg.norm(x - ref, axis=1) / np.linalg.norm(ref, axis=1)
    assert rel.max() <= 1e-6


def test_tau_single_point_shape(linear_synth):
    s = linear_synth
    x = compute_tau(s.attractor[0], s.pair, s.core, s.sat, s.T_trunc)
    assert x.shape == (s.pair.m,)
    np.testing.assert_allclose(x, s.tau_samples.x[0], rtol=1e-9, atol=1e-12)


def test_tau_rejects_nonpositive_horizon(linear_synth):
    s = linear_synth
    with pytest.raises(ValueError):
        compute_tau(s.attractor[0], s.pair, s.core, s.sat, 0.0)


@pytest.mark.parametrize("fixture", ["linear_synth", "vdp_synth"])
def test_truncation_doubling_within_bound(fixture, request):
    s = request.getfixturevalue(fixture)
    z = s.attractor[::50]
    T = 1.0 / s.pair.ell
    x1 = compute_tau(z, s.pair, s.core, s.sat, T, TAU_CFG)
    x2 = compute_tau(z, s.pair, s.core, s.sat, 2 * T, TAU_CFG)
    drift = np.max(np.linalg.norm(x2 - x1, axis=1))
    assert drift <= truncation_bound(s.pair, s.B_q, T)


def test_truncation_bound_monotone(vdp_synth):
    s = vdp_synth
    b0 = truncation_bound(s.pair, s.B_q, 1.0)
    for dT in (0.1, 0.5, 2.0):
        assert truncation_bound(s.pair, s.B_q, 1.0 + dT) / b0 == pytest.approx(
            math.exp(-s.pair.ell * dT), rel=1e-12)


def test_default_truncation_meets_tolerance(vdp_synth):
    s = vdp_synth
    T = default_truncation(s.pair, s.B_q, 1e-8)
    assert truncation_bound(s.pair, s.B_q, T) == pytest.approx(1e-8, rel=1e-9)
    assert default_truncation(s.pair, 0.0) == 1.0 / s.pair.ell


# ---------------------------------------------------------------------------
# attractor samples

def _vdp_rhs(t, z):
    return [z[1], -z[0] + (1 - z[0] ** 2) * z[1]]


@pytest.fixture(scope="module")
def vdp_cycle():
    """Dense reference limit cycle, its period and a point on it."""
    sol = solve_ivp(_vdp_rhs, (0, 200), [2.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-12,
                    dense_output=True, events=lambda t, z: z[1])
    # upward crossings of z2 = 0 with z1 < 0 recur once per period
    ups = [t for t, z in zip(sol.t_events[0], sol.y_events[0]) if z[0] < 0]
    period = ups[-1] - ups[-2]
    pts = sol.sol(np.linspace(200 - 2 * period, 200, 400001)).T
    return pts, period, sol.sol(200.0)


def test_vdp_samples_on_reference_cycle(vdp_synth, vdp_cycle):
    pts, period, _ = vdp_cycle
    assert period == pytest.approx(6.6633, abs=1e-3)
    d = cKDTree(pts).query(vdp_synth.attractor)[0]
    assert d.max() <= 1e-3


def test_rotation_samples_keep_their_norm(linear_cfg, linear_core):
    Zs = linear_cfg.plant.Z.sample(np.random.default_rng(0), 20)
    pts = sample_attractor(linear_core, Zs, 5.0, 500, 1e-3)
    assert np.linalg.norm(pts, axis=1).max() <= np.linalg.norm(Zs, axis=1).max() + 1e-9


def test_fixed_point_samples():
    plant = PlantModel.from_strings(2, 1, ["-z1", "-z2"], "0", "zeta", ["zeta"], "0", "y1",
                                    Ball([0, 0], 1.0), Interval(-1, 1))
    Zs = plant.Z.sample(np.random.default_rng(0), 10)
    pts = sample_attractor(derive_core(plant), Zs, 20.0, 100, 1e-12)
    assert np.linalg.norm(pts, axis=1).max() <= 1e-6


def test_attractor_samples_deduplicated(vdp_synth):
    pts = vdp_synth.attractor
    mesh = 1e-3 * vdp_synth.sat.R1
    assert len(pts) <= vdp_synth.settings.n_keep
    assert len(cKDTree(pts).query_pairs(mesh)) == 0


def test_attractor_divergence_raises():
    plant = PlantModel.from_strings(1, 1, ["z1^2"], "0", "zeta", ["zeta"], "0", "y1",
                                    Ball([0.0], 2.0, 1.0), Interval(-1, 1))
    with pytest.raises(AssumptionViolation):
        sample_attractor(derive_core(plant), np.array([[1.5]]), 5.0, 10, 1e-3)


# ---------------------------------------------------------------------------
# tau samples

def test_tau_samples_zero_plant():
    core = derive_core(zero_plant())
    pair = sample_pair(2, 0.1, seed=0)
    z = np.random.default_rng(1).uniform(-1, 1, (20, 2))
    ts = build_tau_samples(core, pair, SaturationProfile(1, 1.5), z, 5.0)
    np.testing.assert_array_equal(ts.x, 0.0)
    np.testing.assert_array_equal(ts.y, 0.0)


def test_tau_samples_on_linear_graph(linear_synth, linear_T):
    ts = linear_synth.tau_samples
    K = -Q_ROW_LINEAR @ np.linalg.pinv(linear_T)
    # x lies in range(T) and y = K x there
    P = linear_T @ np.linalg.pinv(linear_T)
    assert np.max(np.abs(ts.x - ts.x @ P.T)) <= 1e-6
    assert np.max(np.abs(ts.y - ts.x @ K)) <= 1e-6
    np.testing.assert_array_equal(ts.y, -linear_synth.core.q0(ts.z))


def test_tau_samples_meta(vdp_synth):
    ts = vdp_synth.tau_samples
    assert ts.T_trunc == vdp_synth.T_trunc
    assert ts.truncation_bound == pytest.approx(1e-8, rel=1e-6)
    assert len(ts) == len(vdp_synth.attractor) >= 100


def test_tau_samples_csv_round_trip(vdp_synth):
    ts = vdp_synth.tau_samples
    text = ts.to_csv()
    assert text.splitlines()[0] == "z1,z2,x1,x2,x3,x4,x5,x6,y"
    back = TauSampleSet.from_csv(text)
    np.testing.assert_array_equal(back.z, ts.z)
    np.testing.assert_array_equal(back.x, ts.x)
    np.testing.assert_array_equal(back.y, ts.y)


def test_tau_samples_reject_empty(linear_synth):
    s = linear_synth
    with pytest.raises(ValueError):
        build_tau_samples(s.core, s.pair, s.sat, np.empty((0, 2)), 1.0)


# ---------------------------------------------------------------------------
# invariant cycle

def test_tau_on_cycle_matches_periodic_quadrature(vdp_synth, vdp_cycle):
    """On the limit cycle the saturated integral equals the unsaturated one.

    For a P-periodic orbit the improper integral folds into one period:
    ``tau(z*) = -(I - exp(F P))^{-1} int_{-P}^0 exp(-F s) G q0(z*(s)) ds``.
    """
    s = vdp_synth
    _, period, z_star = vdp_cycle
    F, G = s.pair.F, s.pair.G
    m = len(G)

    def rhs(t, w):
        z = w[:2]
        return np.concatenate([_vdp_rhs(t, z), expm(-F * t) @ G * z[0] ** 2])

    sol = solve_ivp(rhs, (0, -period), np.concatenate([z_star, np.zeros(m)]),
                    method="DOP853", rtol=1e-12, atol=1e-14)
    one_period = -sol.y[2:, -1]          # int_{-P}^0
    oracle = -np.linalg.solve(np.eye(m) - expm(F * period), one_period)
    x = s.tau(z_star)
    assert np.max(np.abs(x - oracle)) <= 1e-5
