"""Synthetic photovoltage dataset generation.

A dataset pairs simulated photovoltage curves with the doping profiles that
produced them.  Each record starts from a randomly sampled profile

    C(x) = C0 (1 + sum_i alpha_i sin(2 pi x / lambda_i))   [cm^-3]

optionally perturbed by two measurement-noise transforms -- an additive
low-frequency spline through random knot values and a polynomial coordinate
warp that de-tunes the wavelengths -- and is then swept with the device
solver over the n laser spot positions.  Records carry full provenance: the
clean profile parameters and, for noisy records, the RNG seed that replays
the noise draws.

Datasets serialize to a little-endian binary format (magic "DPRC", version 1)
and export to CSV for inspection with external tooling.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .device import (AmplitudeNoise, DeviceGeometry, DopingSpec, LaserParams,
                     MaterialParams, WavelengthWarp, doping_eval)
from .mesh import build_mesh
from .solver import DiscreteSystem, SolverError, SolverOptions, sweep

__all__ = [
    "NoiseParams", "DatasetRecord", "Dataset", "GenerationError",
    "sample_doping_spec", "amplitude_noise", "wavelength_warp", "apply_noise",
    "mesh_columns", "forward_sweep", "generate_dataset", "as_matrix",
    "svd_spectrum", "effective_rank", "save_dataset", "load_dataset",
    "export_csv",
]

logger = logging.getLogger(__name__)

TAGS = ("clean", "noisy")
ROLES = ("train", "test", "validation")

# Dense evaluation grid used for profile ranges and warp slope checks; fine
# enough to resolve the shortest admissible wavelength (10 um over 3 mm).
_DENSE_POINTS = 8193
# A warp is redrawn until t'(x) = 1 + p'(x) keeps at least this slope, which
# enforces strict monotonicity with a safety margin against grid sampling.
_WARP_SLOPE_MARGIN = 0.05

_MAGIC = b"DPRC"
_VERSION = 1
_TAG_CODES = {"clean": 0, "noisy": 1}
_TAG_NAMES = {code: name for name, code in _TAG_CODES.items()}
_HEADER = struct.Struct("<BIQB")


class GenerationError(RuntimeError):
    """Raised when too many records of a dataset fail to simulate."""


@dataclass(frozen=True, slots=True)
class NoiseParams:
    """Controls for the measurement-noise transforms.

    k_amp                    relative amplitude k of the additive spline
                             noise, f_n(x_i) = k s_i (max C - min C) with
                             s_i standard normal; small versus 1
    knot_count               number of equally spaced spline knots across
                             the sample
    warp_degree_probability  probability that the coordinate warp polynomial
                             has degree 3 rather than 2
    """

    k_amp: float = 0.02
    knot_count: int = 129
    warp_degree_probability: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.k_amp <= 0.1:
            raise ValueError("k_amp must lie in (0, 0.1]")
        if self.knot_count < 4:
            raise ValueError("knot_count must be at least 4")
        if not 0.0 <= self.warp_degree_probability <= 1.0:
            raise ValueError("warp_degree_probability must lie in [0, 1]")


@dataclass(frozen=True, slots=True, eq=False)
class DatasetRecord:
    """One (signal, doping) pair.

    u           photovoltage at the laser spot positions [V]
    doping      true doping at the same positions [cm^-3], including any
                noise transforms
    spec        profile parameters the record was generated from; for noisy
                records the attached transforms are regenerable from
                noise_seed
    noise_seed  RNG seed that replays the record's random draws, or None
                for clean records
    """

    u: np.ndarray
    doping: np.ndarray
    spec: DopingSpec
    noise_seed: int | None = None

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float64)
        c = np.asarray(self.doping, dtype=np.float64)
        if u.ndim != 1 or u.shape != c.shape:
            raise ValueError("u and doping must be matching 1D arrays")
        u.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "doping", c)


@dataclass(frozen=True, slots=True, eq=False)
class Dataset:
    """A collection of records sharing one laser spot grid.

    records       the (signal, doping) pairs
    positions_um  laser spot positions [um], shared by every record
    tag           "clean" or "noisy"
    role          "train", "test" or "validation"
    """

    records: tuple[DatasetRecord, ...]
    positions_um: np.ndarray
    tag: str = "clean"
    role: str = "train"

    def __post_init__(self) -> None:
        if self.tag not in TAGS:
            raise ValueError(f"tag must be one of {TAGS}")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        pos = np.asarray(self.positions_um, dtype=np.float64)
        if pos.ndim != 1 or pos.size < 1:
            raise ValueError("positions_um must be a non-empty 1D array")
        recs = tuple(self.records)
        for rec in recs:
            if rec.u.size != pos.size:
                raise ValueError("record length does not match the spot grid")
        pos.flags.writeable = False
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "positions_um", pos)

    def __len__(self) -> int:
        return len(self.records)


def sample_doping_spec(rng: np.random.Generator, c0: float = 1e16,
                       term_count: int = 5, zero_probability: float = 0.2,
                       amplitude_range: tuple[float, float] = (0.05, 0.2),
                       wavelength_range_um: tuple[float, float] = (10.0, 1000.0),
                       ) -> DopingSpec:
    """Draw a random clean doping profile.

    Each of the term_count sine terms gets amplitude 0 with probability
    zero_probability and otherwise uniform in amplitude_range; wavelengths
    are log-uniform in wavelength_range_um.  The base level c0 is fixed.
    Draws repeat in whole if the amplitudes happen to sum to 1 or more.
    """
    lo, hi = amplitude_range
    if not 0.0 < lo <= hi:
        raise ValueError("amplitude_range must be positive and ordered")
    wlo, whi = wavelength_range_um
    if not 0.0 < wlo <= whi:
        raise ValueError("wavelength_range_um must be positive and ordered")
    log_lo, log_hi = math.log10(wlo), math.log10(whi)
    while True:
        amps = []
        lams = []
        for _ in range(term_count):
            if rng.random() < zero_probability:
                amps.append(0.0)
            else:
                amps.append(float(rng.uniform(lo, hi)))
            lams.append(float(10.0 ** rng.uniform(log_lo, log_hi)))
        if sum(amps) < 1.0:
            return DopingSpec(c0=c0, amplitudes=tuple(amps),
                              wavelengths_um=tuple(lams))


def _dense_grid(geom: DeviceGeometry) -> np.ndarray:
    half = 0.5 * geom.length * 1e3
    return np.linspace(-half, half, _DENSE_POINTS)


def amplitude_noise(spec: DopingSpec, geom: DeviceGeometry,
                    params: NoiseParams, rng: np.random.Generator,
                    ) -> AmplitudeNoise:
    """Draw the additive spline noise for a profile.

    knot_count equally spaced knots x_i span the sample; the knot values are
    f_n(x_i) = k_amp s_i Delta_C with s_i ~ N(0, 1) and Delta_C the range
    max C - min C of the clean profile over the sample.  Between knots the
    noise follows the natural cubic spline through these values.
    """
    clean = replace(spec, warp=None, amp_noise=None)
    profile = doping_eval(clean, _dense_grid(geom))
    delta_c = float(np.max(profile) - np.min(profile))
    half = 0.5 * geom.length * 1e3
    knots = np.linspace(-half, half, params.knot_count)
    s = rng.standard_normal(params.knot_count)
    return AmplitudeNoise(knots_um=knots, values=params.k_amp * s * delta_c)


def wavelength_warp(geom: DeviceGeometry, params: NoiseParams,
                    rng: np.random.Generator) -> WavelengthWarp:
    """Draw the coordinate warp t(x) = x + p(x).

    p is a random polynomial of degree 2 (probability
    1 - warp_degree_probability) or 3 that vanishes at both sample ends, so
    t fixes the endpoints.  Coefficients are redrawn until
    t'(x) >= 0.05 across the sample, which guarantees the p'(x) > -1
    monotonicity requirement with margin.

        degree 2:  p(x) = k (x + l/2)(x - l/2),          k ~ U(+-1.2 / l)
        degree 3:  p(x) = k (x + l/2)(x - l/2)(x - a),   a ~ U(-l/2, l/2),
                                                         k ~ U(+-2.4 / l^2)
    """
    ell = geom.length * 1e3
    half = 0.5 * ell
    grid = _dense_grid(geom)
    degree = 3 if rng.random() < params.warp_degree_probability else 2
    while True:
        if degree == 2:
            k = rng.uniform(-1.2 / ell, 1.2 / ell)
            warp = WavelengthWarp(scale=k, half_um=half)
        else:
            a = rng.uniform(-half, half)
            k = rng.uniform(-2.4 / ell ** 2, 2.4 / ell ** 2)
            warp = WavelengthWarp(scale=k, half_um=half, root_um=a)
        if float(np.min(warp.derivative(grid))) >= _WARP_SLOPE_MARGIN:
            return warp


def apply_noise(spec: DopingSpec, geom: DeviceGeometry, params: NoiseParams,
                rng: np.random.Generator) -> DopingSpec:
    """Attach both noise transforms to a clean profile.

    The spline knot values are drawn first, then the warp; the evaluated
    profile becomes Cbar(x) = C(t(x)) + f_n(t(x)).
    """
    amp = amplitude_noise(spec, geom, params, rng)
    warp = wavelength_warp(geom, params, rng)
    return replace(spec, warp=warp, amp_noise=amp)


def mesh_columns(geom: DeviceGeometry, spec: DopingSpec,
                 options: SolverOptions) -> int:
    """Mesh columns needed to resolve a profile's shortest feature.

    Keeps at least 4 nodes per minimum doping wavelength, where the
    candidates are the active sine wavelengths and, for spline noise, twice
    the knot spacing (the shortest oscillation the spline can carry).  A
    warp shrinks local wavelengths by up to max t', so the minimum is
    divided by that factor.  Never returns fewer columns than the
    configured default.
    """
    scales = [w for a, w in zip(spec.amplitudes, spec.wavelengths_um)
              if a != 0.0]
    if spec.amp_noise is not None:
        scales.append(2.0 * float(np.min(np.diff(spec.amp_noise.knots_um))))
    if not scales:
        return options.mesh_nx
    finest = min(scales)
    if spec.warp is not None:
        finest /= float(np.max(spec.warp.derivative(_dense_grid(geom))))
    length_um = geom.length * 1e3
    return max(options.mesh_nx, int(math.ceil(4.0 * length_um / finest)))


def forward_sweep(mat: MaterialParams, laser: LaserParams,
                  geom: DeviceGeometry, spec: DopingSpec,
                  options: SolverOptions | None = None, workers: int = 1,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Simulate one record: photovoltage and true doping on the spot grid.

    Returns (u [V], doping [cm^-3]) at the n laser positions.  The mesh is
    refined per profile via mesh_columns, and the sweep result is
    independent of the worker count.
    """
    opts = options or SolverOptions()
    mesh = build_mesh(geom, nx=mesh_columns(geom, spec, opts),
                      nz=opts.mesh_nz, z_ratio=opts.z_ratio)
    sys_ = DiscreteSystem(mat, laser, geom, spec, mesh, opts)
    positions = geom.probe_positions_um()
    u = sweep(sys_, positions, workers=workers)
    return u, doping_eval(spec, positions)


def _record_seeds(seed: int, count: int) -> list[int]:
    """Per-record 128-bit sub-seeds derived from the master seed."""
    seeds = []
    for child in np.random.SeedSequence(seed).spawn(count):
        state = child.generate_state(4, np.uint32)
        seeds.append(int.from_bytes(state.tobytes(), "little"))
    return seeds


def _build_record(index: int, seed: int, mat: MaterialParams,
                  laser: LaserParams, geom: DeviceGeometry,
                  options: SolverOptions, noise: NoiseParams, tag: str,
                  sampling: dict):
    """Simulate one record; returns (index, record, error message or None)."""
    rng = np.random.default_rng(seed)
    spec = sample_doping_spec(rng, **sampling)
    noise_seed = None
    if tag == "noisy":
        spec = apply_noise(spec, geom, noise, rng)
        noise_seed = seed
    try:
        u, doping = forward_sweep(mat, laser, geom, spec, options)
    except SolverError as exc:
        spot = getattr(exc, "spot_index", None)
        where = "" if spot is None else f", laser spot {spot}"
        return index, None, f"record {index}{where}: {exc}"
    return index, DatasetRecord(u=u, doping=doping, spec=spec,
                                noise_seed=noise_seed), None


def generate_dataset(mat: MaterialParams, laser: LaserParams,
                     geom: DeviceGeometry, count: int, seed: int,
                     tag: str = "clean", role: str = "train",
                     noise: NoiseParams | None = None,
                     options: SolverOptions | None = None,
                     c0: float = 1e16, workers: int = 1,
                     max_failure_fraction: float = 0.01,
                     sampling: dict | None = None) -> Dataset:
    """Generate count records with independent per-record sub-seeds.

    Every record draws its profile (and, for tag "noisy", its noise
    transforms) from its own RNG, so the dataset is reproducible from the
    master seed and independent of the worker count.  Failed solves are
    dropped and logged; the run aborts if more than max_failure_fraction of
    the records fail.  sampling passes extra keyword ranges through to
    sample_doping_spec (c0 is a shorthand for the most common one).
    """
    if tag not in TAGS:
        raise ValueError(f"tag must be one of {TAGS}")
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    if count < 0:
        raise ValueError("count must be non-negative")
    noise = noise or NoiseParams()
    opts = options or SolverOptions()
    if opts.trace is not None:
        opts = replace(opts, trace=None)
    draw = dict(sampling or {})
    draw.setdefault("c0", c0)
    jobs = [(i, s, mat, laser, geom, opts, noise, tag, draw)
            for i, s in enumerate(_record_seeds(seed, count))]

    results: list = [None] * count
    if workers <= 1 or count <= 1:
        for job in jobs:
            i, rec, err = _build_record(*job)
            results[i] = (rec, err)
    else:
        with ProcessPoolExecutor(max_workers=min(workers, count)) as pool:
            for i, rec, err in pool.map(_build_record_star, jobs):
                results[i] = (rec, err)

    failures = [err for rec, err in results if err is not None]
    if len(failures) > max_failure_fraction * count:
        shown = "; ".join(failures[:5])
        raise GenerationError(
            f"{len(failures)} of {count} records failed to simulate: {shown}")
    for err in failures:
        logger.warning("dropped %s", err)
    records = tuple(rec for rec, err in results if rec is not None)
    return Dataset(records=records, positions_um=geom.probe_positions_um(),
                   tag=tag, role=role)


def _build_record_star(job):
    return _build_record(*job)


def as_matrix(dataset: Dataset, field: str = "u") -> np.ndarray:
    """Stack one record field into an (n, record_count) column matrix."""
    if field not in ("u", "doping"):
        raise ValueError("field must be 'u' or 'doping'")
    n = dataset.positions_um.size
    if not dataset.records:
        return np.zeros((n, 0))
    return np.stack([getattr(rec, field) for rec in dataset.records], axis=1)


def svd_spectrum(dataset: Dataset, field: str = "u",
                 count: int | None = None) -> np.ndarray:
    """Leading singular values (descending) of the stacked record matrix."""
    matrix = as_matrix(dataset, field)
    if matrix.shape[1] == 0:
        return np.zeros(0)
    sigma = np.linalg.svd(matrix, compute_uv=False)
    return sigma if count is None else sigma[:count]


def effective_rank(singular_values, rel_threshold: float = 1e-3) -> int:
    """Number of singular values within rel_threshold of the largest."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.sum(s >= rel_threshold * s[0]))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in the DPRC version-1 binary format.

    Little-endian layout: magic "DPRC", u8 version, u32 n, u64 record
    count, u8 tag (0 clean / 1 noisy), then the spot grid as n f64 values.
    Each record stores a 16-byte seed block (the noise seed as a 128-bit
    little-endian integer; all zeros for clean records), u8 term count, the
    (amplitude, wavelength) f64 pairs, c0 as f64, then u[n] and doping[n]
    as f64.
    """
    out = bytearray()
    out += _MAGIC
    out += _HEADER.pack(_VERSION, dataset.positions_um.size,
                        len(dataset.records), _TAG_CODES[dataset.tag])
    out += np.ascontiguousarray(dataset.positions_um, dtype="<f8").tobytes()
    for rec in dataset.records:
        seed = 0 if rec.noise_seed is None else int(rec.noise_seed)
        out += seed.to_bytes(16, "little")
        terms = list(zip(rec.spec.amplitudes, rec.spec.wavelengths_um))
        out += struct.pack("<B", len(terms))
        for amp, lam in terms:
            out += struct.pack("<dd", amp, lam)
        out += struct.pack("<d", rec.spec.c0)
        out += np.ascontiguousarray(rec.u, dtype="<f8").tobytes()
        out += np.ascontiguousarray(rec.doping, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def _take(raw: bytes, offset: int, nbytes: int) -> int:
    end = offset + nbytes
    if end > len(raw):
        raise ValueError("truncated dataset file")
    return end


def load_dataset(path, role: str = "train") -> Dataset:
    """Read a DPRC version-1 file back into a Dataset.

    Loaded records carry the clean profile parameters and the stored noise
    seed; the noise transforms themselves are provenance and are not
    re-attached (u and doping already include them).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise ValueError("not a DPRC dataset file")
    off = _take(raw, 4, _HEADER.size)
    version, n, count, tag_code = _HEADER.unpack_from(raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    if tag_code not in _TAG_NAMES:
        raise ValueError(f"unknown dataset tag code {tag_code}")
    end = _take(raw, off, 8 * n)
    positions = np.frombuffer(raw, "<f8", n, off).copy()
    off = end

    records = []
    for _ in range(count):
        end = _take(raw, off, 17)
        seed = int.from_bytes(raw[off:off + 16], "little")
        term_count = raw[off + 16]
        off = end
        end = _take(raw, off, 16 * term_count + 8)
        pairs = struct.unpack_from(f"<{2 * term_count}d", raw, off)
        c0 = struct.unpack_from("<d", raw, off + 16 * term_count)[0]
        off = end
        end = _take(raw, off, 16 * n)
        u = np.frombuffer(raw, "<f8", n, off).copy()
        doping = np.frombuffer(raw, "<f8", n, off + 8 * n).copy()
        off = end
        spec = DopingSpec(c0=c0, amplitudes=pairs[0::2],
                          wavelengths_um=pairs[1::2])
        records.append(DatasetRecord(u=u, doping=doping, spec=spec,
                                     noise_seed=seed if seed else None))
    if off != len(raw):
        raise ValueError("trailing bytes after the last record")
    return Dataset(records=tuple(records), positions_um=positions,
                   tag=_TAG_NAMES[tag_code], role=role)


def export_csv(dataset: Dataset, path) -> None:
    """Write records row-wise as CSV with a header line.

    Floats are written with repr so they round-trip exactly; records with
    fewer sine terms than the widest one leave the extra columns empty.
    """
    n = dataset.positions_um.size
    width = max((len(r.spec.amplitudes) for r in dataset.records), default=0)
    header = ["record", "noise_seed", "c0"]
    header += [f"alpha_{j + 1}" for j in range(width)]
    header += [f"lambda_{j + 1}_um" for j in range(width)]
    header += [f"u_{i}" for i in range(n)]
    header += [f"doping_{i}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx, rec in enumerate(dataset.records):
            pad = width - len(rec.spec.amplitudes)
            row = [idx,
                   "" if rec.noise_seed is None else rec.noise_seed,
                   repr(float(rec.spec.c0))]
            row += [repr(float(a)) for a in rec.spec.amplitudes] + [""] * pad
            row += [repr(float(w))
                    for w in rec.spec.wavelengths_um] + [""] * pad
            row += [repr(float(v)) for v in rec.u]
            row += [repr(float(v)) for v in rec.doping]
            writer.writerow(row)
