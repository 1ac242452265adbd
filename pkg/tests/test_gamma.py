import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from luenreg.gamma import (
    GammaMap, covering_radius, eval_gamma, fit_gamma, injectivity_diagnostic,
    path_covering_radius,
)
from luenreg.observer import TauSampleSet

from conftest import Q_ROW_LINEAR


def sample_set(x, y):
    x = np.asarray(x, float)
    return TauSampleSet(np.zeros((len(x), 1)), x, np.asarray(y, float))


# ---------------------------------------------------------------------------
# injectivity diagnostic

def test_constant_data_pass():
    rng = np.random.default_rng(0)
    rep = injectivity_diagnostic(sample_set(rng.normal(size=(50, 4)), np.full(50, 3.0)))
    assert rep.passed
    np.testing.assert_array_equal(rep.phi, 0.0)
    np.testing.assert_allclose(rep.rho, rep.s, rtol=1e-15)


def test_linear_data_phi_below_linear_bound(linear_synth, linear_T):
    rep = linear_synth.injectivity
    L = np.linalg.norm(Q_ROW_LINEAR @ np.linalg.pinv(linear_T))
    assert rep.passed
    assert np.all(rep.phi <= (L + 1e-6) * rep.s + 1e-9)


def test_duplicate_x_with_different_y_fails():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 3))
    y = x[:, 0].copy()
    x[1] = x[0]
    y[1] = y[0] + 5.0
    rep = injectivity_diagnostic(sample_set(x, y))
    assert not rep.passed
    assert rep.phi[0] >= 5.0
    assert rep.lipschitz >= 5.0 / 1e-9


def test_needs_two_samples():
    with pytest.raises(ValueError):
        injectivity_diagnostic(sample_set([[0.0]], [1.0]))


def test_grid_is_log_spaced_over_pair_distances():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 2))
    rep = injectivity_diagnostic(sample_set(x, x[:, 1]), grid_size=16)
    from scipy.spatial.distance import pdist
    d = pdist(x)
    assert len(rep.s) == 16
    assert rep.s[0] == pytest.approx(d.min()) and rep.s[-1] == pytest.approx(d.max())
    np.testing.assert_allclose(np.diff(np.log(rep.s)), np.log(rep.s[1] / rep.s[0]), rtol=1e-9)


def test_phi_matches_brute_force():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(25, 2))
    y = np.sin(3 * x[:, 0])
    rep = injectivity_diagnostic(sample_set(x, y), grid_size=20)
    for s, phi in zip(rep.s, rep.phi):
        brute = max((abs(y[i] - y[j]) for i in range(25) for j in range(i + 1, 25)
                     if np.linalg.norm(x[i] - x[j]) <= s), default=0.0)
        assert phi == brute


@given(arrays(float, (12, 2), elements=st.floats(-5, 5)),
       arrays(float, 12, elements=st.floats(-5, 5)))
@settings(max_examples=100, deadline=None)
def test_report_invariants(x, y):
    rep = injectivity_diagnostic(sample_set(x, y), grid_size=24)
    assert np.all(np.diff(rep.phi) >= 0)
    assert np.all(np.diff(rep.rho) > 0) or len(rep.rho) == 1
    assert np.all(rep.rho >= rep.phi)


def test_report_csv(vdp_synth):
    text = vdp_synth.injectivity.to_csv()
    rows = text.splitlines()
    assert rows[0] == "s,phi,rho"
    assert len(rows) == 1 + len(vdp_synth.injectivity.s)


# ---------------------------------------------------------------------------
# gamma

@pytest.mark.parametrize("fixture", ["linear_synth", "vdp_synth"])
def test_gamma_exact_at_samples(fixture, request):
    s = request.getfixturevalue(fixture)
    g = s.gamma
    assert g.mode == "mcshane"
    np.testing.assert_array_equal(eval_gamma(g, s.tau_samples.x), s.tau_samples.y)


def test_gamma_lipschitz_sweep(vdp_synth):
    g = vdp_synth.gamma
    rng = np.random.default_rng(4)
    lo, hi = g.x.min(axis=0), g.x.max(axis=0)
    span = hi - lo
    a = rng.uniform(lo - span, hi + span, (1000, g.x.shape[1]))
    b = rng.uniform(lo - span, hi + span, (1000, g.x.shape[1]))
    lhs = np.abs(eval_gamma(g, a) - eval_gamma(g, b))
    assert np.all(lhs <= g.lipschitz * np.linalg.norm(a - b, axis=1) * (1 + 1e-12) + 1e-12)


def test_gamma_far_field_finite(vdp_synth):
    g = vdp_synth.gamma
    far = np.full((3, g.x.shape[1]), 1e6) * np.array([[1.0], [-1.0], [1e3]])
    vals = eval_gamma(g, far)
    assert np.all(np.isfinite(vals))
    assert np.all(vals >= g.y.min())
    d = np.linalg.norm(far[:, None, :] - g.x[None], axis=-1).min(axis=1)
    assert np.all(vals <= g.y.max() + g.lipschitz * d * (1 + 1e-12))


def test_constant_data_switch_to_nearest():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 4))
    g = fit_gamma(sample_set(x, np.zeros(30)))
    assert g.mode == "nearest"
    np.testing.assert_array_equal(eval_gamma(g, rng.normal(size=(100, 4)) * 10), 0.0)


def test_mcshane_on_constant_zero_is_zero_only_at_samples():
    x = np.eye(3)
    g = fit_gamma(sample_set(x, np.zeros(3)), mode="mcshane")
    assert g.lipschitz == 0.0
    np.testing.assert_array_equal(eval_gamma(g, x), 0.0)


def test_nearest_mode_piecewise_constant():
    x = np.array([[0.0], [1.0]])
    g = fit_gamma(sample_set(x, [2.0, 5.0]), mode="nearest")
    np.testing.assert_array_equal(eval_gamma(g, np.array([[-3.0], [0.4], [0.6], [9.0]])),
                                  [2.0, 2.0, 5.0, 5.0])


def test_mcshane_formula():
    x = np.array([[0.0], [1.0]])
    g = fit_gamma(sample_set(x, [0.0, 2.0]), mode="mcshane")
    assert g.lipschitz == pytest.approx(2.0)
    q = np.array([[-1.0], [0.5], [3.0]])
    np.testing.assert_allclose(eval_gamma(g, q), [2.0, 1.0, 6.0], rtol=1e-8)


def test_fit_gamma_empty_rejected():
    with pytest.raises(ValueError):
        fit_gamma(sample_set(np.empty((0, 2)), []))


def test_fit_gamma_warns_on_failed_report():
    x = np.array([[0.0], [0.0], [1.0]])
    ss = sample_set(x, [0.0, 1.0, 0.0])
    rep = injectivity_diagnostic(ss)
    assert not rep.passed
    with pytest.warns(UserWarning, match="injectivity"):
        fit_gamma(ss, report=rep)


def test_fit_gamma_silent_on_passed_report(linear_synth):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_gamma(linear_synth.tau_samples, report=linear_synth.injectivity)


def test_gamma_evaluation_shapes(vdp_synth):
    g = vdp_synth.gamma
    x = vdp_synth.tau_samples.x
    assert np.ndim(eval_gamma(g, x[0])) == 0
    assert eval_gamma(g, x[:6].reshape(2, 3, -1)).shape == (2, 3)
    assert g(x[:4]).shape == (4,)


def test_gamma_dict_round_trip(vdp_synth):
    g = vdp_synth.gamma
    back = GammaMap.from_dict(g.to_dict())
    q = np.random.default_rng(6).normal(size=(20, g.x.shape[1])) * 0.1
    np.testing.assert_array_equal(eval_gamma(back, q), eval_gamma(g, q))


def test_unknown_mode():
    with pytest.raises(ValueError):
        GammaMap(np.zeros((1, 2)), np.zeros(1), "spline", 1.0)


def test_covering_radius():
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    region = np.array([[0.5, 0.0], [0.0, 2.0], [1.0, 0.1]])
    assert covering_radius(pts, region) == pytest.approx(2.0)


def test_path_covering_radius_exact_on_segment():
    pts = np.array([[0.0, 0.0], [2.0, 0.0]])
    path = np.array([[[0.0, 0.0], [2.0, 0.0]]])
    assert path_covering_radius(pts, path) == pytest.approx(1.0)
    assert covering_radius(pts, path[0]) == 0.0


def test_path_covering_radius_bounds_fine_circle():
    a = np.array([0.0, 1.1, 2.0, 3.5, 5.0])
    pts = np.c_[np.cos(a), np.sin(a)]
    th = np.linspace(0, 2 * np.pi, 17)
    coarse = np.c_[np.cos(th), np.sin(th)][None]
    fine_th = np.linspace(0, 2 * np.pi, 20001)
    truth = covering_radius(pts, np.c_[np.cos(fine_th), np.sin(fine_th)])
    bound = path_covering_radius(pts, coarse)
    assert covering_radius(pts, coarse[0]) < truth <= bound <= truth * 1.05
