import numpy as np
import pytest

from luenreg import expr as ex
from luenreg.plant import (
    Ball, Box, Interval, PlantModel, consistency_residual, derive_core, eval_measured_chi,
    from_transformed, to_transformed, zero_output_residual,
)

from conftest import zero_plant


def test_linear_q0_is_minus_c_S_z(linear_core):
    assert linear_core.q0(np.array([1.0, 2.0])) == pytest.approx(-2.0)


def test_vdp_q0_is_z1_squared(vdp_core):
    assert vdp_core.q0(np.array([2.0, -0.3])) == pytest.approx(4.0)


def test_zero_q_and_alpha_give_zero_q0():
    core = derive_core(zero_plant())
    z = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_array_equal(core.q0(z), 0.0)


def test_q0_against_hand_formula():
    # q0 = q(z, alpha) - grad(alpha) . f(z, alpha)
    plant = PlantModel.from_strings(
        2, 1, ["z2 + zeta", "-sin(z1) + zeta^2"], "z1*zeta", "zeta - z1*z2", ["zeta - z1*z2"],
        "z1*z2", "y1", Box([-1, -1], [1, 1]), Interval(-1, 1))
    core = derive_core(plant)
    rng = np.random.default_rng(3)
    for z1, z2 in rng.uniform(-1, 1, (10, 2)):
        a = z1 * z2
        f = np.array([z2 + a, -np.sin(z1) + a ** 2])
        expected = z1 * a - (z2 * f[0] + z1 * f[1])
        assert core.q0(np.array([z1, z2])) == pytest.approx(expected, rel=1e-13, abs=1e-13)


@pytest.mark.parametrize("fixture", ["linear_core", "vdp_core"])
def test_f1_q1_vanish_at_chi_zero(fixture, request):
    core = request.getfixturevalue(fixture)
    z = np.random.default_rng(1).uniform(-3, 3, (100, 2))
    assert np.all(core.f1(z, 0.0) == 0.0)
    assert np.all(core.q1(z, 0.0) == 0.0)


@pytest.mark.parametrize("fixture", ["linear_cfg", "vdp_cfg"])
def test_f1_lipschitz_in_chi(fixture, request):
    plant = request.getfixturevalue(fixture).plant
    core = derive_core(plant)
    rng = np.random.default_rng(2)
    z, zeta = plant.sample_box(rng, 500)
    # L from the symbolic zeta-derivative of f over the sampled box
    dfz = ex.compile_vector([ex.diff(fi, "zeta") for fi in plant.f], plant.zeta_vars)
    probe = np.stack(np.broadcast_arrays(*dfz(*z.T, zeta)), axis=-1)
    L = float(np.max(np.linalg.norm(probe, axis=-1))) + 1e-12
    chi = zeta - plant.alpha_eval(z)
    for scale in (1.0, 0.1, 1e-3):
        lhs = np.linalg.norm(core.f1(z, scale * chi), axis=-1)
        assert np.all(lhs <= L * np.abs(scale * chi) * (1 + 1e-9) + 1e-15)


def test_transform_zero_at_alpha(linear_cfg):
    plant = linear_cfg.plant
    z = np.array([0.3, -0.4])
    _, chi, x = to_transformed(plant, np.ones(6), z, plant.alpha_eval(z), np.zeros(6))
    assert chi == 0.0
    np.testing.assert_array_equal(x, 0.0)


def test_transform_linear_example(linear_cfg):
    _, chi, _ = to_transformed(linear_cfg.plant, np.ones(6), np.array([1.0, 0.0]), 2.0, np.zeros(6))
    assert chi == 1.0


def test_transform_round_trip(vdp_cfg):
    plant = vdp_cfg.plant
    rng = np.random.default_rng(4)
    G = rng.normal(size=6)
    z = rng.normal(size=(100, 2))
    chi = rng.normal(size=100)
    x = rng.normal(size=(100, 6))
    z2, zeta, eta = from_transformed(plant, G, z, chi, x)
    z3, chi3, x3 = to_transformed(plant, G, z2, zeta, eta)
    np.testing.assert_array_equal(z3, z)
    np.testing.assert_allclose(chi3, chi, rtol=0, atol=1e-15)
    np.testing.assert_allclose(x3, x, rtol=0, atol=4e-15)


def test_transform_round_trip_exact_for_alpha_zero(vdp_cfg):
    # alpha = 0 makes both maps pure additions of G chi
    plant = vdp_cfg.plant
    z = np.array([[0.5, 1.0]])
    G = np.array([1.0, 0, 1.0, 0, 1.0, 0])
    args = to_transformed(plant, G, *from_transformed(plant, G, z, np.array([0.25]),
                                                       np.full((1, 6), 0.5)))
    assert args[1][0] == 0.25
    np.testing.assert_array_equal(args[2], 0.5)


def test_measured_chi_zero_on_alpha(linear_cfg):
    plant = linear_cfg.plant
    z = np.random.default_rng(5).normal(size=(10, 2))
    np.testing.assert_allclose(eval_measured_chi(plant, z, plant.alpha_eval(z)), 0.0, atol=0)


def test_measured_chi_identity_output(linear_cfg):
    plant = linear_cfg.plant
    assert eval_measured_chi(plant, np.array([0.4, 9.0]), 1.5) == pytest.approx(1.1)


@pytest.mark.parametrize("fixture", ["linear_cfg", "vdp_cfg", "adversarial_cfg"])
def test_consistency_residual_benchmarks(fixture, request):
    plant = request.getfixturevalue(fixture).plant
    assert consistency_residual(plant, np.random.default_rng(0), 1000) <= 1e-9


def test_consistency_residual_detects_violation():
    plant = PlantModel.from_strings(2, 1, ["z2", "-z1"], "0", "zeta", ["2*zeta"], "0", "y1",
                                    Ball([0, 0], 1.0), Interval(-1, 1))
    assert consistency_residual(plant, np.random.default_rng(0), 1000) > 0.1


def test_zero_output_on_attractor(vdp_synth, linear_synth):
    assert zero_output_residual(vdp_synth.plant, vdp_synth.attractor) == 0.0
    assert zero_output_residual(linear_synth.plant, linear_synth.attractor) == 0.0


def test_plant_rejects_undeclared_variable():
    with pytest.raises(ValueError, match="undeclared"):
        PlantModel(n=1, p=1, f=(ex.parse("z1 + z2", ["z1", "z2"]),), q=ex.ZERO, h=ex.ZERO,
                   k=(ex.Var("zeta"),), alpha=ex.ZERO, phi=ex.Var("y1"),
                   Z=Box([-1], [1]), Xi=Interval(-1, 1))


def test_plant_dimension_checks():
    with pytest.raises(ValueError, match="f has"):
        PlantModel.from_strings(2, 1, ["z2"], "0", "0", ["zeta"], "0", "y1",
                                Ball([0, 0], 1.0), Interval(-1, 1))


def test_set_sampling_stays_inside():
    rng = np.random.default_rng(0)
    ann = Ball([1.0, -1.0], 2.0, 0.5)
    r = np.linalg.norm(ann.sample(rng, 2000) - [1.0, -1.0], axis=1)
    assert r.min() >= 0.5 and r.max() <= 2.0
    box = Box([-1, 0], [0, 3])
    pts = box.sample(rng, 2000)
    assert np.all((pts >= [-1, 0]) & (pts <= [0, 3]))
    xi = Interval(-0.5, 0.25).sample(rng, 1000)
    assert xi.min() >= -0.5 and xi.max() <= 0.25
