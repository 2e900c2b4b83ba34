"""Device description: material, laser, geometry and doping profile.

The sample is a thin doped semiconductor crystal of length ``l`` (x), width
``w`` (y) and height ``h`` (z <= 0, illuminated surface at z = 0) with ohmic
contacts on the two x faces.  A focused laser generates electron-hole pairs
near a movable spot ``x0``; the photovoltage picked up at the right contact
through a load resistance is the measured signal.

Carrier statistics are Boltzmann,

    n = N_c exp((q (psi - phi_n) - E_c) / (k_B T))
    p = N_v exp((q (phi_p - psi) + E_v) / (k_B T))

so the intrinsic density is n_i = sqrt(N_c N_v) exp(-(E_c - E_v)/(2 k_B T))
and mass action n p = n_i^2 holds in equilibrium (phi_n = phi_p = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import EPS0, H_PLANCK, K_B_EV


@dataclass(frozen=True, slots=True)
class MaterialParams:
    """Bulk material parameters.

    N_c, N_v   effective densities of states [cm^-3]
    E_c, E_v   band edge energies [eV]
    T          lattice temperature [K]
    eps        absolute dielectric permittivity [F/cm]
    mu_n, mu_p carrier mobilities [cm^2/(V s)]
    C_d        direct (radiative) recombination coefficient [cm^3/s]
    C_n, C_p   Auger recombination coefficients [cm^6/s]
    tau_n, tau_p  SRH carrier lifetimes [s]
    n_T, p_T   SRH trap reference densities [cm^-3]
    """

    N_c: float
    N_v: float
    E_c: float
    E_v: float
    T: float
    eps: float
    mu_n: float
    mu_p: float
    C_d: float
    C_n: float
    C_p: float
    tau_n: float
    tau_p: float
    n_T: float
    p_T: float

    def __post_init__(self) -> None:
        for name in ("N_c", "N_v", "T", "eps", "mu_n", "mu_p",
                     "tau_n", "tau_p", "n_T", "p_T"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("C_d", "C_n", "C_p"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.E_c <= self.E_v:
            raise ValueError("E_c must exceed E_v")


@dataclass(frozen=True, slots=True)
class LaserParams:
    """Laser beam parameters.

    P         optical power [W]
    lambda_L  vacuum wavelength [m]
    r         surface reflectivity, 0 <= r < 1
    sigma_L   Gaussian spot radius [um]
    d_A       absorption depth [um]
    """

    P: float
    lambda_L: float
    r: float
    sigma_L: float
    d_A: float

    def __post_init__(self) -> None:
        if self.P < 0.0:
            raise ValueError("P must be non-negative")
        if self.lambda_L <= 0.0 or self.sigma_L <= 0.0 or self.d_A <= 0.0:
            raise ValueError("lambda_L, sigma_L, d_A must be positive")
        if not 0.0 <= self.r < 1.0:
            raise ValueError("r must lie in [0, 1)")


@dataclass(frozen=True, slots=True)
class DeviceGeometry:
    """Sample geometry and measurement setup.

    length, width, height  crystal dimensions l, w, h [mm]
    probe_length           scanned interval length l_i [mm]; the laser spot
                           positions are n equispaced points on [0, l_i/2]
    n                      number of laser spot positions
    load_resistance        series load R between the contacts [Ohm]
    """

    length: float = 3.0
    width: float = 0.5
    height: float = 5e-5
    probe_length: float = 0.4
    n: int = 96
    load_resistance: float = 1e6

    def __post_init__(self) -> None:
        if min(self.length, self.width, self.height, self.probe_length) <= 0:
            raise ValueError("geometry dimensions must be positive")
        if self.probe_length > self.length:
            raise ValueError("probe_length cannot exceed length")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.load_resistance < 0.0:
            raise ValueError("load_resistance must be non-negative")

    def probe_positions_um(self) -> np.ndarray:
        """The n laser spot positions [um], uniform on [0, l_i/2]."""
        half = 0.5 * self.probe_length * 1e3
        return np.linspace(0.0, half, self.n)


@dataclass(frozen=True, slots=True, eq=False)
class AmplitudeNoise:
    """Additive low-frequency noise: a natural cubic spline through random
    knot values, added to the clean doping profile.

    knots_um   strictly increasing knot positions [um]
    values     knot values f(x_i) [cm^-3]
    """

    knots_um: np.ndarray
    values: np.ndarray
    _spline: object = field(init=False, repr=False)

    def __post_init__(self) -> None:
        from scipy.interpolate import CubicSpline

        knots = np.asarray(self.knots_um, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if knots.ndim != 1 or knots.shape != vals.shape or knots.size < 2:
            raise ValueError("knots and values must be matching 1D arrays")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "knots_um", knots)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_spline",
                           CubicSpline(knots, vals, bc_type="natural"))

    def __call__(self, x_um: np.ndarray) -> np.ndarray:
        return self._spline(x_um)


@dataclass(frozen=True, slots=True, eq=False)
class WavelengthWarp:
    """Coordinate warp t(x) = x + p(x) with p held in factored form:

        p(x) = scale (x + half_um)(x - half_um)              degree 2
        p(x) = scale (x + half_um)(x - half_um)(x - root_um) degree 3

    The zero factors pin t(+-half_um) exactly (no rounding residue, unlike
    an expanded monomial evaluation); scale and root are drawn so that
    p'(x) > -1 across the sample, keeping t strictly increasing.
    """

    scale: float
    half_um: float
    root_um: float | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.half_um > 0.0):
            raise ValueError("warp needs a finite scale and positive half "
                             "width")
        if self.root_um is not None and not math.isfinite(self.root_um):
            raise ValueError("warp root must be finite")

    def __call__(self, x_um: np.ndarray) -> np.ndarray:
        x = np.asarray(x_um, dtype=np.float64)
        p = self.scale * (x + self.half_um) * (x - self.half_um)
        if self.root_um is not None:
            p = p * (x - self.root_um)
        return x + p

    def derivative(self, x_um: np.ndarray) -> np.ndarray:
        x = np.asarray(x_um, dtype=np.float64)
        h2 = self.half_um * self.half_um
        if self.root_um is None:
            return 1.0 + self.scale * 2.0 * x
        return 1.0 + self.scale * (3.0 * x * x - 2.0 * self.root_um * x
                                   - h2)

    @property
    def coeffs(self) -> tuple[float, ...]:
        """Monomial coefficients of p, highest degree first."""
        k, h = self.scale, self.half_um
        if self.root_um is None:
            return (k, 0.0, -k * h * h)
        a = self.root_um
        return (k, -k * a, -k * h * h, k * h * h * a)


@dataclass(frozen=True, slots=True, eq=False)
class DopingSpec:
    """Doping profile C(x) = C0 (1 + sum_i alpha_i sin(2 pi x / lambda_i)),
    optionally composed with measurement-noise transforms.

    c0              base doping level [cm^-3]; positive donor, negative
                    acceptor
    amplitudes      relative sine amplitudes alpha_i
    wavelengths_um  sine wavelengths lambda_i [um]
    warp            optional coordinate warp applied first
    amp_noise       optional additive spline noise applied after the warp,
                    i.e. the evaluated profile is Ct(t(x)) where
                    Ct(y) = C(y) + f_n(y)
    """

    c0: float
    amplitudes: tuple[float, ...]
    wavelengths_um: tuple[float, ...]
    warp: WavelengthWarp | None = None
    amp_noise: AmplitudeNoise | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.c0):
            raise ValueError("c0 must be finite")
        if len(self.amplitudes) != len(self.wavelengths_um):
            raise ValueError("amplitudes and wavelengths must pair up")
        if any(w <= 0.0 for w in self.wavelengths_um):
            raise ValueError("wavelengths must be positive")
        if sum(abs(a) for a in self.amplitudes) >= 1.0:
            raise ValueError("total relative amplitude must stay below 1")


def doping_eval(spec: DopingSpec, x_um) -> np.ndarray:
    """Evaluate the doping profile at positions x [um] -> [cm^-3].

    Transforms compose as Cbar(x) = Ct(t(x)): the warp moves the coordinate,
    then the amplitude-noised profile Ct = C + f_n is evaluated there.
    """
    x = np.asarray(x_um, dtype=np.float64)
    y = spec.warp(x) if spec.warp is not None else x
    c = np.ones_like(y)
    for a, lam in zip(spec.amplitudes, spec.wavelengths_um):
        if a != 0.0:
            c += a * np.sin((2.0 * math.pi / lam) * y)
    c *= spec.c0
    if spec.amp_noise is not None:
        c = c + spec.amp_noise(y)
    return c


def thermal_voltage(mat: MaterialParams) -> float:
    """U_T = k_B T / q [V]."""
    return K_B_EV * mat.T


def intrinsic_density(mat: MaterialParams) -> float:
    """n_i = sqrt(N_c N_v) exp(-(E_c - E_v) / (2 k_B T)) [cm^-3]."""
    u_t = thermal_voltage(mat)
    return math.sqrt(mat.N_c * mat.N_v) * math.exp(-(mat.E_c - mat.E_v) / (2.0 * u_t))


def intrinsic_level(mat: MaterialParams) -> float:
    """Potential psi_i [V] at which n = p = n_i for vanishing quasi-Fermi
    potentials: psi_i = E_c/q - U_T ln(N_c / n_i)."""
    u_t = thermal_voltage(mat)
    return mat.E_c - u_t * math.log(mat.N_c / intrinsic_density(mat))


def electroneutral_potential(mat: MaterialParams, C) -> np.ndarray:
    """Equilibrium boundary potential psi0 [V] with p - n + C = 0.

    With Boltzmann statistics and phi_n = phi_p = 0 the space charge
    vanishes at psi0 = psi_i + U_T asinh(C / (2 n_i)), the closed form of
    the electroneutrality condition.
    """
    u_t = thermal_voltage(mat)
    n_i = intrinsic_density(mat)
    return intrinsic_level(mat) + u_t * np.arcsinh(np.asarray(C, dtype=np.float64) / (2.0 * n_i))


def kappa(laser: LaserParams) -> float:
    """Photon injection rate kappa = P lambda_L (1 - r) / h [1/s]."""
    return laser.P * laser.lambda_L * (1.0 - laser.r) / H_PLANCK


def laser_shape(laser: LaserParams, x_um, y_um, z_um) -> np.ndarray:
    """Normalized beam intensity profile S(x, y, z) [1/um^3],

        S = exp(-x^2 / (2 sigma_L^2)) exp(-y^2 / (2 sigma_L^2))
            * exp(-|z| / d_A) / (2 pi sigma_L^2 d_A),

    which integrates to 1 over the illuminated half-space z <= 0.
    """
    s2 = laser.sigma_L ** 2
    x = np.asarray(x_um, dtype=np.float64)
    y = np.asarray(y_um, dtype=np.float64)
    z = np.asarray(z_um, dtype=np.float64)
    pref = 1.0 / (2.0 * math.pi * s2 * laser.d_A)
    return pref * np.exp(-0.5 * x * x / s2) * np.exp(-0.5 * y * y / s2) \
        * np.exp(-np.abs(z) / laser.d_A)


def silicon(T: float = 300.0, tau: float = 1e-7) -> MaterialParams:
    """Room-temperature silicon parameter set."""
    return MaterialParams(
        N_c=2.8e19, N_v=1.04e19,
        E_c=1.12, E_v=0.0,
        T=T,
        eps=11.7 * EPS0,
        mu_n=1400.0, mu_p=450.0,
        C_d=1.1e-14,
        C_n=2.8e-31, C_p=9.9e-32,
        tau_n=tau, tau_p=tau,
        n_T=1e10, p_T=1e10,
    )


def default_laser(P: float = 1e-13) -> LaserParams:
    """Red diode laser focused to a 20 um spot.

    The default power sits in the linear response regime of the default
    device (doubling the power doubles the photovoltage to within 0.3%);
    signals saturate noticeably above ~1e-12.
    """
    return LaserParams(P=P, lambda_L=685e-9, r=0.3, sigma_L=20.0, d_A=4.5)
