import math

import numpy as np
import pytest
from scipy.integrate import quad

from doprec.constants import H_PLANCK
from doprec.device import (
    AmplitudeNoise,
    DeviceGeometry,
    DopingSpec,
    LaserParams,
    WavelengthWarp,
    default_laser,
    doping_eval,
    electroneutral_potential,
    intrinsic_density,
    intrinsic_level,
    kappa,
    laser_shape,
    silicon,
    thermal_voltage,
)
from oracles import natural_spline_eval

# frozen 40-digit reference values for the silicon defaults
UT_GOLDEN = 0.025851999786435532
NI_GOLDEN = 6.6758987197147986e9
PSI_I_GOLDEN = 0.5471981064574926
PSI0_1E16_GOLDEN = 0.9148029910499392


def test_thermal_voltage_golden():
    assert thermal_voltage(silicon()) == pytest.approx(UT_GOLDEN, rel=1e-14)


def test_intrinsic_density_golden():
    assert intrinsic_density(silicon()) == pytest.approx(NI_GOLDEN, rel=1e-12)


def test_intrinsic_level_golden_and_consistency():
    mat = silicon()
    psi_i = intrinsic_level(mat)
    assert psi_i == pytest.approx(PSI_I_GOLDEN, rel=1e-12)
    # same level expressed from the valence side
    u_t = thermal_voltage(mat)
    alt = mat.E_v + u_t * math.log(mat.N_v / intrinsic_density(mat))
    assert psi_i == pytest.approx(alt, rel=1e-12)


def test_electroneutral_golden():
    psi0 = electroneutral_potential(silicon(), 1e16)
    assert psi0 == pytest.approx(PSI0_1E16_GOLDEN, rel=1e-12)


def test_electroneutral_zero_charge_residual():
    mat = silicon()
    u_t = thermal_voltage(mat)
    n_i = intrinsic_density(mat)
    psi_i = intrinsic_level(mat)
    rng = np.random.default_rng(7)
    C = np.concatenate([
        rng.uniform(-1, 1, 50) * 10.0 ** rng.uniform(10, 18, 50),
        [0.0, 1e16, -1e16],
    ])
    psi0 = electroneutral_potential(mat, C)
    n = n_i * np.exp((psi0 - psi_i) / u_t)
    p = n_i * np.exp((psi_i - psi0) / u_t)
    assert np.all(np.abs(p - n + C) <= 1e-10 * (np.abs(C) + 2.0 * n_i))


def test_kappa_formula_and_golden():
    las = LaserParams(P=1e-3, lambda_L=685e-9, r=0.3, sigma_L=20.0, d_A=4.5)
    assert kappa(las) == pytest.approx(1e-3 * 685e-9 * 0.7 / H_PLANCK, rel=1e-15)
    assert kappa(las) == pytest.approx(7.236566911384118e23, rel=1e-12)
    assert kappa(LaserParams(P=0.0, lambda_L=685e-9, r=0.3,
                             sigma_L=20.0, d_A=4.5)) == 0.0


def test_laser_shape_peak_value():
    las = default_laser()
    peak = 1.0 / (2.0 * math.pi * las.sigma_L ** 2 * las.d_A)
    assert laser_shape(las, 0.0, 0.0, 0.0) == pytest.approx(peak, rel=1e-14)


def test_laser_shape_halfspace_normalization():
    # separable profile: the half-space integral is the product of three 1D ones
    las = default_laser()
    gx, _ = quad(lambda x: laser_shape(las, x, 0.0, 0.0)
                 / laser_shape(las, 0.0, 0.0, 0.0), -np.inf, np.inf)
    gy = gx
    gz, _ = quad(lambda z: math.exp(-abs(z) / las.d_A), -np.inf, 0.0)
    total = laser_shape(las, 0.0, 0.0, 0.0) * gx * gy * gz
    assert total == pytest.approx(1.0, abs=1e-6)


def test_doping_eval_matches_term_sum():
    spec = DopingSpec(
        c0=1e16,
        amplitudes=(0.1, 0.0, 0.05, 0.2, 0.07),
        wavelengths_um=(100.0, 50.0, 333.0, 17.0, 900.0),
    )
    x = np.linspace(-1500.0, 1500.0, 301)
    ref = np.full_like(x, 1.0)
    for a, lam in zip(spec.amplitudes, spec.wavelengths_um):
        ref += a * np.sin(2.0 * math.pi * x / lam)
    ref *= spec.c0
    assert np.allclose(doping_eval(spec, x), ref, rtol=1e-12)


def test_doping_eval_uniform():
    spec = DopingSpec(c0=-2e15, amplitudes=(), wavelengths_um=())
    x = np.linspace(-1000, 1000, 17)
    assert np.all(doping_eval(spec, x) == -2e15)


def test_doping_spec_validation():
    with pytest.raises(ValueError):
        DopingSpec(c0=math.nan, amplitudes=(), wavelengths_um=())
    with pytest.raises(ValueError):
        DopingSpec(c0=1e16, amplitudes=(0.5, 0.6), wavelengths_um=(10.0, 20.0))
    with pytest.raises(ValueError):
        DopingSpec(c0=1e16, amplitudes=(0.1,), wavelengths_um=(-5.0,))


def test_warp_fixes_endpoints_and_composes_first():
    half = 1500.0
    k = 0.3 / (2.0 * half)
    # p(x) = k (x + half)(x - half)
    warp = WavelengthWarp(scale=k, half_um=half)
    assert np.array_equal(warp(np.array([-half, half])), [-half, half])
    assert warp.coeffs == (k, 0.0, -k * half * half)
    spec = DopingSpec(c0=1e16, amplitudes=(0.1,), wavelengths_um=(200.0,),
                      warp=warp)
    x = np.linspace(-half, half, 64)
    t = warp(x)
    ref = 1e16 * (1.0 + 0.1 * np.sin(2.0 * math.pi * t / 200.0))
    assert np.allclose(doping_eval(spec, x), ref, rtol=1e-14)


def test_amplitude_noise_matches_independent_spline():
    rng = np.random.default_rng(3)
    knots = np.linspace(-1500.0, 1500.0, 33)
    vals = rng.normal(0.0, 2e14, knots.size)
    noise = AmplitudeNoise(knots_um=knots, values=vals)
    x = rng.uniform(-1500.0, 1500.0, 200)
    ref = natural_spline_eval(knots, vals, x)
    assert np.allclose(noise(x), ref, rtol=1e-10, atol=1e-10 * 2e14)
    spec = DopingSpec(c0=1e16, amplitudes=(0.1,), wavelengths_um=(300.0,),
                      amp_noise=noise)
    want = 1e16 * (1.0 + 0.1 * np.sin(2.0 * math.pi * x / 300.0)) + ref
    assert np.allclose(doping_eval(spec, x), want, rtol=1e-12)


def test_geometry_probe_positions():
    geom = DeviceGeometry(n=96)
    pos = geom.probe_positions_um()
    assert pos.shape == (96,)
    assert pos[0] == 0.0
    assert pos[-1] == pytest.approx(200.0)
    assert np.all(np.diff(pos) > 0)


def test_geometry_validation():
    with pytest.raises(ValueError):
        DeviceGeometry(length=-1.0)
    with pytest.raises(ValueError):
        DeviceGeometry(probe_length=5.0)
    with pytest.raises(ValueError):
        DeviceGeometry(n=1)
