"""Tests for synthetic dataset generation, noise transforms, and the binary
dataset format."""

import csv

import numpy as np
import pytest

from doprec import datagen as dg
from doprec.device import (DeviceGeometry, DopingSpec, default_laser,
                           doping_eval, silicon)
from doprec.solver import SolverOptions

from oracles import gram_singular_values, natural_spline_eval

GEOM = DeviceGeometry(n=8)
COARSE = SolverOptions(mesh_nx=96, mesh_nz=4)


def small_dataset(tag="clean", count=3, seed=11, **kwargs):
    return dg.generate_dataset(silicon(), default_laser(), GEOM, count=count,
                               seed=seed, tag=tag, options=COARSE, **kwargs)


# ---------------------------------------------------------------------------
# parameter validation


def test_noise_params_validation():
    dg.NoiseParams()  # defaults valid
    with pytest.raises(ValueError):
        dg.NoiseParams(k_amp=0.0)
    with pytest.raises(ValueError):
        dg.NoiseParams(k_amp=0.11)
    with pytest.raises(ValueError):
        dg.NoiseParams(knot_count=3)
    with pytest.raises(ValueError):
        dg.NoiseParams(warp_degree_probability=1.5)


def test_dataset_validation():
    rec = dg.DatasetRecord(u=np.zeros(4), doping=np.ones(4),
                           spec=DopingSpec(1e16, (), ()))
    with pytest.raises(ValueError):
        dg.Dataset(records=(rec,), positions_um=np.arange(5.0))
    with pytest.raises(ValueError):
        dg.Dataset(records=(), positions_um=np.arange(4.0), tag="dirty")
    with pytest.raises(ValueError):
        dg.Dataset(records=(), positions_um=np.arange(4.0), role="dev")
    with pytest.raises(ValueError):
        dg.DatasetRecord(u=np.zeros(4), doping=np.ones(5),
                         spec=DopingSpec(1e16, (), ()))


# ---------------------------------------------------------------------------
# profile sampling


def test_sample_doping_spec_ranges_and_statistics():
    rng = np.random.default_rng(123)
    draws = 4000
    amps = []
    lams = []
    for _ in range(draws):
        spec = dg.sample_doping_spec(rng)
        assert spec.c0 == 1e16
        assert len(spec.amplitudes) == 5
        assert sum(spec.amplitudes) < 1.0
        amps.extend(spec.amplitudes)
        lams.extend(spec.wavelengths_um)
    amps = np.asarray(amps)
    lams = np.asarray(lams)
    nonzero = amps[amps != 0.0]
    assert np.all((nonzero >= 0.05) & (nonzero < 0.2))
    assert np.all((lams >= 10.0) & (lams <= 1000.0))
    # zero amplitudes appear with probability 0.2 (4 sigma binomial window)
    zero_frac = np.mean(amps == 0.0)
    sigma = np.sqrt(0.2 * 0.8 / amps.size)
    assert abs(zero_frac - 0.2) < 4.0 * sigma
    # log10 of the wavelength is uniform on [1, 3]: mean 2, variance 1/3
    logs = np.log10(lams)
    assert abs(np.mean(logs) - 2.0) < 4.0 * np.sqrt(1.0 / 3.0 / lams.size)


def test_sample_doping_spec_custom_ranges():
    rng = np.random.default_rng(9)
    spec = dg.sample_doping_spec(rng, c0=5e15, term_count=3,
                                 zero_probability=0.0,
                                 amplitude_range=(0.1, 0.3),
                                 wavelength_range_um=(50.0, 100.0))
    assert spec.c0 == 5e15
    assert len(spec.amplitudes) == 3
    assert all(0.1 <= a < 0.3 for a in spec.amplitudes)
    assert all(50.0 <= w <= 100.0 for w in spec.wavelengths_um)
    with pytest.raises(ValueError):
        dg.sample_doping_spec(rng, amplitude_range=(0.0, 0.2))
    with pytest.raises(ValueError):
        dg.sample_doping_spec(rng, wavelength_range_um=(-1.0, 10.0))


def test_clean_profile_mean_tracks_base_level():
    # Sine terms whose wavelength divides the probe window average out
    # exactly; the residual is the discrete-sampling error alone.
    positions = DeviceGeometry().probe_positions_um()
    exact = DopingSpec(1e16, (0.2, 0.15, 0.1), (200.0, 100.0, 50.0))
    mean = float(np.mean(doping_eval(exact, positions)))
    assert abs(mean - 1e16) <= 0.02 * 1e16
    # For random wavelengths at or below the window length the partial
    # trailing period leaves a bounded, systematically positive residue:
    # per term at most alpha * (1 - cos th)/th with th = 2 pi L / lambda.
    rng = np.random.default_rng(42)
    devs = []
    for _ in range(200):
        spec = dg.sample_doping_spec(rng, wavelength_range_um=(10.0, 200.0))
        mean = float(np.mean(doping_eval(spec, positions)))
        devs.append((mean - spec.c0) / spec.c0)
    devs = np.asarray(devs)
    assert np.all(np.abs(devs) < 0.15)
    assert np.median(np.abs(devs)) < 0.04


# ---------------------------------------------------------------------------
# amplitude noise


def test_amplitude_noise_knot_values():
    rng = np.random.default_rng(5)
    spec = dg.sample_doping_spec(rng)
    params = dg.NoiseParams(k_amp=0.03)
    noise = dg.amplitude_noise(spec, GEOM, params, np.random.default_rng(77))

    half = 0.5 * GEOM.length * 1e3
    assert np.array_equal(noise.knots_um,
                          np.linspace(-half, half, params.knot_count))
    # replay the draw: values are k * s_i * (max C - min C over the sample)
    dense = np.linspace(-half, half, 8193)
    profile = doping_eval(spec, dense)
    delta = profile.max() - profile.min()
    s = np.random.default_rng(77).standard_normal(params.knot_count)
    assert np.array_equal(noise.values, 0.03 * s * delta)
    # the spline interpolates its knots
    assert np.allclose(noise(noise.knots_um), noise.values, rtol=1e-12,
                       atol=1e-3 * np.abs(noise.values).max())


def test_amplitude_noise_matches_natural_spline_oracle():
    rng = np.random.default_rng(15)
    spec = dg.sample_doping_spec(rng)
    noise = dg.amplitude_noise(spec, GEOM, dg.NoiseParams(), rng)
    x = np.linspace(noise.knots_um[0], noise.knots_um[-1], 1001)
    expected = natural_spline_eval(noise.knots_um, noise.values, x)
    scale = np.abs(noise.values).max()
    assert np.allclose(noise(x), expected, rtol=0.0, atol=1e-9 * scale)


def test_amplitude_noise_flat_profile_is_silent():
    spec = DopingSpec(1e16, (0.0,), (100.0,))
    noise = dg.amplitude_noise(spec, GEOM, dg.NoiseParams(),
                               np.random.default_rng(1))
    assert np.all(noise.values == 0.0)


# ---------------------------------------------------------------------------
# wavelength warp


def test_wavelength_warp_fixes_endpoints_and_stays_monotone():
    half = 0.5 * GEOM.length * 1e3
    dense = np.linspace(-half, half, 4001)
    rng = np.random.default_rng(31)
    degrees = []
    for _ in range(300):
        warp = dg.wavelength_warp(GEOM, dg.NoiseParams(), rng)
        degrees.append(len(warp.coeffs) - 1)
        assert abs(warp(np.array([-half]))[0] + half) < 1e-9
        assert abs(warp(np.array([half]))[0] - half) < 1e-9
        t = warp(dense)
        assert np.all(np.diff(t) > 0.0)
        assert np.min(warp.derivative(dense)) >= 0.05 - 1e-12
    degrees = np.asarray(degrees)
    # both polynomial degrees occur with probability 1/2
    assert 0.35 < np.mean(degrees == 3) < 0.65


def test_wavelength_warp_degree_probability_extremes():
    rng = np.random.default_rng(8)
    for _ in range(20):
        w2 = dg.wavelength_warp(GEOM, dg.NoiseParams(
            warp_degree_probability=0.0), rng)
        w3 = dg.wavelength_warp(GEOM, dg.NoiseParams(
            warp_degree_probability=1.0), rng)
        assert len(w2.coeffs) == 3
        assert len(w3.coeffs) == 4


def test_warp_preserves_profile_range():
    # t maps the sample onto itself with fixed endpoints, so the warped
    # profile attains the same minimum and maximum values.
    rng = np.random.default_rng(21)
    half = 0.5 * GEOM.length * 1e3
    dense = np.linspace(-half, half, 8193)
    for _ in range(10):
        spec = dg.sample_doping_spec(rng)
        warp = dg.wavelength_warp(GEOM, dg.NoiseParams(), rng)
        warped = dg.DopingSpec(spec.c0, spec.amplitudes, spec.wavelengths_um,
                               warp=warp)
        clean = doping_eval(spec, dense)
        bent = doping_eval(warped, dense)
        span = clean.max() - clean.min()
        assert abs(bent.max() - clean.max()) <= 1e-3 * span
        assert abs(bent.min() - clean.min()) <= 1e-3 * span


def test_apply_noise_composes_warp_then_spline():
    rng = np.random.default_rng(3)
    spec = dg.sample_doping_spec(rng)
    noisy = dg.apply_noise(spec, GEOM, dg.NoiseParams(), rng)
    assert noisy.warp is not None and noisy.amp_noise is not None
    x = np.linspace(-1200.0, 1200.0, 301)
    t = noisy.warp(x)
    expected = doping_eval(spec, t) + noisy.amp_noise(t)
    assert np.allclose(doping_eval(noisy, x), expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# meshing rule


def test_mesh_columns_resolves_finest_wavelength():
    opts = SolverOptions(mesh_nx=384)
    flat = DopingSpec(1e16, (0.0,), (10.0,))
    assert dg.mesh_columns(GEOM, flat, opts) == 384
    coarse = DopingSpec(1e16, (0.1,), (500.0,))
    assert dg.mesh_columns(GEOM, coarse, opts) == 384
    fine = DopingSpec(1e16, (0.1,), (10.0,))
    # 4 nodes per 10 um wavelength over a 3 mm sample
    assert dg.mesh_columns(GEOM, fine, opts) == 1200


def test_mesh_columns_accounts_for_noise_and_warp():
    opts = SolverOptions(mesh_nx=96)
    spec = DopingSpec(1e16, (0.1,), (500.0,))
    noisy = dg.apply_noise(spec, GEOM, dg.NoiseParams(),
                           np.random.default_rng(2))
    # spline noise can oscillate at twice the knot spacing
    spacing = np.min(np.diff(noisy.amp_noise.knots_um))
    length_um = GEOM.length * 1e3
    floor = 4.0 * length_um / (2.0 * spacing)
    cols = dg.mesh_columns(GEOM, noisy, opts)
    assert cols >= int(np.ceil(floor))
    # a warp compresses wavelengths by up to max t'
    stretch = np.max(noisy.warp.derivative(np.linspace(
        -0.5 * length_um, 0.5 * length_um, 8193)))
    assert cols >= int(np.ceil(floor * stretch)) - 1


# ---------------------------------------------------------------------------
# forward sweep and dataset generation


def test_forward_sweep_returns_signal_and_true_doping():
    rng = np.random.default_rng(6)
    spec = dg.sample_doping_spec(rng, wavelength_range_um=(80.0, 300.0))
    u, doping = dg.forward_sweep(silicon(), default_laser(), GEOM, spec,
                                 options=COARSE)
    positions = GEOM.probe_positions_um()
    assert u.shape == positions.shape
    assert np.array_equal(doping, doping_eval(spec, positions))
    assert np.all(np.isfinite(u))
    u2, _ = dg.forward_sweep(silicon(), default_laser(), GEOM, spec,
                             options=COARSE, workers=3)
    assert np.array_equal(u, u2)


def test_generate_dataset_is_reproducible():
    a = small_dataset(tag="noisy")
    b = small_dataset(tag="noisy")
    assert len(a) == len(b) == 3
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.u, rb.u)
        assert np.array_equal(ra.doping, rb.doping)
        assert ra.noise_seed == rb.noise_seed
    c = small_dataset(tag="noisy", seed=12)
    assert not np.array_equal(a.records[0].u, c.records[0].u)


def test_generate_dataset_worker_invariance():
    serial = small_dataset(tag="noisy", count=4)
    parallel = small_dataset(tag="noisy", count=4, workers=2)
    for ra, rb in zip(serial.records, parallel.records):
        assert np.array_equal(ra.u, rb.u)
        assert np.array_equal(ra.doping, rb.doping)
        assert ra.spec.amplitudes == rb.spec.amplitudes


def test_generate_dataset_tags_and_seeds():
    clean = small_dataset(tag="clean")
    assert clean.tag == "clean"
    assert all(rec.noise_seed is None for rec in clean.records)
    assert all(rec.spec.warp is None for rec in clean.records)
    noisy = small_dataset(tag="noisy")
    assert all(rec.noise_seed is not None for rec in noisy.records)
    assert all(rec.spec.warp is not None for rec in noisy.records)
    assert all(np.all(rec.doping > 0.0) for rec in noisy.records)
    # same sub-seed, so the clean profile parameters agree
    assert clean.records[0].spec.amplitudes == noisy.records[0].spec.amplitudes


def test_generate_dataset_rejects_bad_arguments():
    with pytest.raises(ValueError):
        small_dataset(tag="raw")
    with pytest.raises(ValueError):
        small_dataset(role="dev")
    with pytest.raises(ValueError):
        small_dataset(count=-1)


def test_generate_dataset_empty_is_valid():
    ds = small_dataset(count=0)
    assert len(ds) == 0
    assert dg.svd_spectrum(ds).size == 0


def test_generate_dataset_aborts_on_widespread_failure():
    weak = SolverOptions(mesh_nx=96, mesh_nz=4, max_iterations=1)
    with pytest.raises(dg.GenerationError) as info:
        dg.generate_dataset(silicon(), default_laser(), GEOM, count=2,
                            seed=1, options=weak)
    assert "2 of 2" in str(info.value)
    assert "laser spot" in str(info.value)


# ---------------------------------------------------------------------------
# SVD spectrum


def test_svd_spectrum_matches_gram_oracle():
    ds = small_dataset(tag="noisy", count=4)
    for field in ("u", "doping"):
        sigma = dg.svd_spectrum(ds, field=field)
        matrix = dg.as_matrix(ds, field)
        expected = gram_singular_values(matrix)
        assert sigma.shape == (4,)
        assert np.all(np.diff(sigma) <= 0.0)
        assert np.allclose(sigma, expected, rtol=1e-8,
                           atol=1e-8 * expected[0])
    assert dg.svd_spectrum(ds, count=2).shape == (2,)
    with pytest.raises(ValueError):
        dg.as_matrix(ds, "psi")


def test_svd_spectrum_identical_records_has_rank_one():
    ds = small_dataset(count=1)
    rec = ds.records[0]
    stack = dg.Dataset(records=(rec,) * 5, positions_um=ds.positions_um)
    sigma = dg.svd_spectrum(stack)
    assert sigma[0] > 0.0
    assert np.all(sigma[1:] <= 1e-12 * sigma[0])
    assert dg.effective_rank(sigma) == 1


def test_effective_rank_threshold():
    assert dg.effective_rank([1.0, 0.5, 2e-3, 1e-4]) == 3
    assert dg.effective_rank([1.0, 0.5, 2e-3, 1e-4], rel_threshold=1e-2) == 2
    assert dg.effective_rank([]) == 0
    assert dg.effective_rank([0.0, 0.0]) == 0


# ---------------------------------------------------------------------------
# serialization


def test_dataset_file_roundtrip(tmp_path):
    ds = small_dataset(tag="noisy")
    path = tmp_path / "set.dprc"
    dg.save_dataset(ds, path)
    loaded = dg.load_dataset(path, role="test")
    assert loaded.tag == "noisy"
    assert loaded.role == "test"
    assert np.array_equal(loaded.positions_um, ds.positions_um)
    for ra, rb in zip(ds.records, loaded.records):
        assert np.array_equal(ra.u, rb.u)
        assert np.array_equal(ra.doping, rb.doping)
        assert ra.noise_seed == rb.noise_seed
        assert ra.spec.c0 == rb.spec.c0
        assert ra.spec.amplitudes == rb.spec.amplitudes
        assert ra.spec.wavelengths_um == rb.spec.wavelengths_um
    # a second save of the loaded dataset is byte-identical
    path2 = tmp_path / "set2.dprc"
    dg.save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_file_layout(tmp_path):
    ds = small_dataset(count=1)
    path = tmp_path / "one.dprc"
    dg.save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DPRC"
    assert raw[4] == 1                      # version
    n = int.from_bytes(raw[5:9], "little")
    assert n == GEOM.n
    assert int.from_bytes(raw[9:17], "little") == 1   # record count
    assert raw[17] == 0                     # clean tag
    grid = np.frombuffer(raw, "<f8", n, 18)
    assert np.array_equal(grid, ds.positions_um)
    off = 18 + 8 * n
    assert raw[off:off + 16] == b"\x00" * 16          # clean seed block
    assert raw[off + 16] == 5               # sine term count


def test_dataset_file_rejects_corruption(tmp_path):
    ds = small_dataset(count=1)
    path = tmp_path / "ok.dprc"
    dg.save_dataset(ds, path)
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.dprc"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ValueError):
        dg.load_dataset(bad)

    wrong_version = bytearray(raw)
    wrong_version[4] = 9
    bad.write_bytes(bytes(wrong_version))
    with pytest.raises(ValueError):
        dg.load_dataset(bad)

    bad.write_bytes(bytes(raw[:len(raw) // 2]))
    with pytest.raises(ValueError):
        dg.load_dataset(bad)

    bad.write_bytes(bytes(raw) + b"\x00")
    with pytest.raises(ValueError):
        dg.load_dataset(bad)


def test_csv_export_roundtrips_floats(tmp_path):
    ds = small_dataset(tag="noisy", count=2)
    path = tmp_path / "set.csv"
    dg.export_csv(ds, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    assert len(data) == 2
    assert header[0] == "record"
    n = GEOM.n
    for row, rec in zip(data, ds.records):
        cols = {name: value for name, value in zip(header, row)}
        assert int(cols["record"]) in (0, 1)
        assert int(cols["noise_seed"]) == rec.noise_seed
        assert float(cols["c0"]) == rec.spec.c0
        u = np.array([float(cols[f"u_{i}"]) for i in range(n)])
        doping = np.array([float(cols[f"doping_{i}"]) for i in range(n)])
        assert np.array_equal(u, rec.u)
        assert np.array_equal(doping, rec.doping)
