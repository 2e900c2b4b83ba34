"""Finite-volume solver for the stationary van Roosbroeck system.

The unknowns are the electrostatic potential psi and the carrier densities
n, p of the coupled system

    -div(eps grad psi)      = q (p - n + C)
    -(1/q) div J_n          = G - H,   J_n = -q mu_n n grad phi_n
    +(1/q) div J_p          = G - H,   J_p = -q mu_p p grad phi_p

with Boltzmann statistics n = n_i exp((psi - phi_n - psi_i)/U_T),
p = n_i exp((phi_p - psi + psi_i)/U_T).  Edge currents use the
Scharfetter-Gummel exponential fitting

    I_n(k->l) = q mu_n U_T (s/h) (B(d) n_l - B(-d) n_k)
    I_p(k->l) = q mu_p U_T (s/h) (B(d) p_k - B(-d) p_l)

with d = (psi_l - psi_k)/U_T and B(x) = x / (e^x - 1), which makes both
currents vanish identically on Boltzmann equilibrium profiles.  In the
(psi, n, p) variables the fluxes and the Poisson row are linear in the
densities, so Newton behaves well even though photogenerated minority
densities rise by many orders of magnitude.

Boundary conditions: homogeneous Neumann on the top and bottom faces, ohmic
Dirichlet columns at the two contacts, psi = psi0(C) + u_D, phi_n = phi_p =
u_D (equivalently n, p pinned at their electroneutral values), with
u_D1 = 0 as reference.  Contact 2 is loaded by a resistance R to ground,
closing the circuit through the bordered equation u = R * i_D(x0, u); u is
appended to the Newton unknowns rather than nested in a scalar root find.

Internally everything is dimensionless: potentials in units of U_T,
densities in units of n_i, lengths in units of the intrinsic Debye length
L0 = sqrt(eps U_T / (q n_i)), mobilities in cm^2/(V s).  Convergence is
measured on the residual divided row-wise by the magnitude of the Jacobian
diagonal, so one tolerance covers Poisson, continuity and circuit rows
alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu
from scipy.special import erf

from .constants import Q
from .device import (
    DeviceGeometry,
    DopingSpec,
    LaserParams,
    MaterialParams,
    doping_eval,
    intrinsic_density,
    intrinsic_level,
    kappa,
    thermal_voltage,
)
from .mesh import Mesh2D, build_mesh

CM_TO_UM = 1e4


class SolverError(RuntimeError):
    """Base class for nonlinear solver failures."""


class NonConvergence(SolverError):
    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(f"{message} (iterations={iterations}, "
                         f"residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class DampingExhausted(SolverError):
    """Line search or power ramp could not make progress."""


class CircuitNonConvergence(NonConvergence):
    """The circuit relation u = R i_D could not be met to circuit_tol."""


class SingularSystem(SolverError):
    """The linearized system could not be factorized or solved."""


def bernoulli(x) -> np.ndarray:
    """B(x) = x / (e^x - 1), the Scharfetter-Gummel weight.

    Near zero a Horner-evaluated Taylor series avoids cancellation; away
    from zero the expm1 forms are exact and overflow-safe for any float:
    x e^-x / (1 - e^-x) for x > 0 and x / (e^x - 1) for x < 0.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    x2 = xs * xs
    out[small] = 1.0 - xs / 2.0 + x2 / 12.0 * (1.0 - x2 / 60.0 * (1.0 - x2 / 42.0))
    xl = x[~small]
    with np.errstate(over="ignore", under="ignore"):
        pos = xl > 0
        res = np.empty_like(xl)
        res[pos] = xl[pos] * np.exp(-xl[pos]) / (-np.expm1(-xl[pos]))
        res[~pos] = xl[~pos] / np.expm1(xl[~pos])
    out[~small] = res
    return out[()] if scalar else out


def bernoulli_prime(x) -> np.ndarray:
    """Derivative B'(x); series near zero, expm1 forms elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    x2 = xs * xs
    out[small] = -0.5 + xs / 6.0 * (1.0 - x2 / 30.0 * (1.0 - x2 / 28.0))
    xl = x[~small]
    with np.errstate(over="ignore", under="ignore"):
        pos = xl > 0
        res = np.empty_like(xl)
        m = -np.expm1(-xl[pos])          # 1 - e^-x
        res[pos] = np.exp(-xl[pos]) * (m - xl[pos]) / (m * m)
        g = np.expm1(xl[~pos])           # e^x - 1
        res[~pos] = (g - xl[~pos] * (g + 1.0)) / (g * g)
    out[~small] = res
    return out[()] if scalar else out


def sg_flux(mat: MaterialParams, carrier: str, h_cm, psi_k, psi_l,
            dens_k, dens_l) -> np.ndarray:
    """Scharfetter-Gummel edge current density [A/cm^2] from node k to l.

    Electrons: J = q mu_n U_T / h * (B(d) n_l - B(-d) n_k)
    Holes:     J = q mu_p U_T / h * (B(d) p_k - B(-d) p_l)
    with d = (psi_l - psi_k) / U_T.
    """
    u_t = thermal_voltage(mat)
    d = (np.asarray(psi_l, dtype=np.float64)
         - np.asarray(psi_k, dtype=np.float64)) / u_t
    bp = bernoulli(d)
    bm = bernoulli(-d)
    coef = Q * u_t / np.asarray(h_cm, dtype=np.float64)
    if carrier == "n":
        return coef * mat.mu_n * (bp * dens_l - bm * dens_k)
    if carrier == "p":
        return coef * mat.mu_p * (bp * dens_k - bm * dens_l)
    raise ValueError("carrier must be 'n' or 'p'")


def recombination(mat: MaterialParams, n, p):
    """Net recombination rate H(n, p) [cm^-3 s^-1] and its derivatives.

    H = C_d (np - n_i^2) + (C_n n + C_p p)(np - n_i^2)
        + (np - n_i^2) / (tau_p (n + n_T) + tau_n (p + p_T))

    Returns (H, dH/dn, dH/dp).
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    ni2 = intrinsic_density(mat) ** 2
    ex = n * p - ni2
    den = mat.tau_p * (n + mat.n_T) + mat.tau_n * (p + mat.p_T)
    aug = mat.C_n * n + mat.C_p * p
    H = mat.C_d * ex + aug * ex + ex / den
    dH_dn = (mat.C_d * p + mat.C_n * ex + aug * p
             + (p * den - ex * mat.tau_p) / (den * den))
    dH_dp = (mat.C_d * n + mat.C_p * ex + aug * n
             + (n * den - ex * mat.tau_n) / (den * den))
    return H, dH_dn, dH_dp


@dataclass(frozen=True, slots=True)
class SolverOptions:
    """Newton iteration and discretization controls.

    newton_tol      tolerance on the diagonal-scaled residual max-norm
    circuit_tol     acceptance check on |u - R i_D| in scaled potential units
    max_iterations  Newton iteration cap per solve
    damping_min     smallest line-search step factor before giving up
    power_ramp_steps  generation ramp stages used when a direct solve fails
    reuse_jacobian  allow chord steps with a previously factorized Jacobian
    anchor_spacing  sweep block length; blocks are a fixed partition so
                    results never depend on the worker count
    mesh_nx/nz, z_ratio  defaults for build_system's mesh
    linear_solver   "direct" (sparse LU) or "iterative" (ILU + LGMRES)
    trace           optional text stream receiving one line per iteration
    """

    newton_tol: float = 1e-9
    circuit_tol: float = 1e-10
    max_iterations: int = 60
    damping_min: float = 1e-4
    power_ramp_steps: int = 6
    reuse_jacobian: bool = True
    anchor_spacing: int = 12
    mesh_nx: int = 384
    mesh_nz: int = 8
    z_ratio: float = 1.4
    linear_solver: str = "direct"
    trace: object = None

    def __post_init__(self) -> None:
        if self.newton_tol <= 0 or self.circuit_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1 or self.power_ramp_steps < 1:
            raise ValueError("iteration counts must be positive")
        if self.anchor_spacing < 1:
            raise ValueError("anchor_spacing must be positive")
        if self.linear_solver not in ("direct", "iterative"):
            raise ValueError("linear_solver must be 'direct' or 'iterative'")


@dataclass(slots=True)
class PdeState:
    """Converged device state in physical units.

    psi, phi_n, phi_p  node potentials [V]
    n, p               carrier densities [cm^-3]
    u                  voltage at the loaded contact [V]
    i_d                contact current [A]
    """

    mesh: Mesh2D
    x0_um: float
    u: float
    psi: np.ndarray
    phi_n: np.ndarray
    phi_p: np.ndarray
    n: np.ndarray
    p: np.ndarray
    i_d: float
    iterations: int
    residual: float
    system: "DiscreteSystem"
    y_scaled: np.ndarray


class _LinearOp:
    """One linear-solve interface over a cached LU factorization or an
    ILU-preconditioned LGMRES."""

    def __init__(self, A: csr_matrix, method: str):
        self.method = method
        try:
            if method == "direct":
                self.lu = splu(A.tocsc())
            else:
                from scipy.sparse.linalg import LinearOperator, spilu

                self.A = A.tocsc()
                ilu = spilu(self.A, drop_tol=1e-8, fill_factor=20)
                self.prec = LinearOperator(A.shape, ilu.solve)
        except RuntimeError as exc:
            raise SingularSystem(f"factorization failed: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.method == "direct":
            return self.lu.solve(b)
        from scipy.sparse.linalg import lgmres

        x, info = lgmres(self.A, b, M=self.prec, maxiter=300,
                         atol=1e-13 * max(1.0, float(np.abs(b).max())))
        if info != 0:
            raise SingularSystem(f"iterative linear solve failed (info={info})")
        return x


class _Factorization:
    """Jacobian factorization cache shared across warm-started solves.

    Holds the factorized operator of the equilibrated matrix D_r J D_c with
    column weights c = 1 + |y| and row weights r = 1 / (|J_ii| c_i); the
    equilibration keeps the 10-decade spread between continuity and Poisson
    rows out of the LU solve, whose absolute error would otherwise swamp
    the small rows' updates.
    """

    __slots__ = ("op", "diag", "rw", "cw", "age")

    def __init__(self):
        self.op = None
        self.diag = None
        self.rw = None
        self.cw = None
        self.age = 0

    def assemble(self, sys_: "DiscreteSystem", y: np.ndarray,
                 gamma: np.ndarray, u_fixed: float | None) -> np.ndarray:
        """Factorize the equilibrated Jacobian at y; returns the residual."""
        r, A = sys_.jacobian(y, gamma, u_fixed)
        self.diag = np.maximum(np.abs(A.diagonal()), 1e-300)
        self.cw = 1.0 + np.abs(y)
        self.rw = 1.0 / (self.diag * self.cw)
        A.data *= self.rw[sys_._row_of_entry] * self.cw[A.indices]
        self.op = _LinearOp(A, sys_.options.linear_solver)
        self.age = 0
        return r

    def solve(self, r: np.ndarray) -> np.ndarray:
        """Newton step for residual r through the equilibrated operator."""
        return self.cw * self.op.solve(-(r * self.rw))


class DiscreteSystem:
    """Scaled finite-volume discretization bound to one device and doping.

    Precomputes the mesh graph, scaled doping, the sparse Jacobian pattern
    and the cell-integrated generation machinery, so each Newton iteration
    only fills a data vector and factorizes.

    State vector layout: [chi (N), n (N), p (N), u], all scaled.
    """

    def __init__(self, mat: MaterialParams, laser: LaserParams,
                 geom: DeviceGeometry, doping: DopingSpec,
                 mesh: Mesh2D, options: SolverOptions):
        self.mat = mat
        self.laser = laser
        self.geom = geom
        self.doping = doping
        self.mesh = mesh
        self.options = options

        self.u_t = thermal_voltage(mat)
        self.n_i = intrinsic_density(mat)
        self.psi_i = intrinsic_level(mat)
        self.L0 = math.sqrt(mat.eps * self.u_t / (Q * self.n_i))   # [cm]
        self.current_scale = Q * self.u_t * self.n_i * self.L0     # [A]
        self.rate_scale = self.u_t * self.n_i / self.L0 ** 2       # [cm^-3/s]
        self.lam2 = mat.eps * self.u_t / (Q * self.n_i * self.L0 ** 2)

        n = mesh.n_nodes
        self.n_nodes = n
        self.n_unknowns = 3 * n + 1
        self.iu = 3 * n

        self.trans = mesh.edge_trans / self.L0      # scaled s/h per edge
        self.vol = mesh.volumes / self.L0 ** 3      # scaled box volumes
        self.ek = mesh.edge_k
        self.el = mesh.edge_l

        c_phys = doping_eval(doping, mesh.node_x_um())
        self.c_scaled = c_phys / self.n_i
        self.chi_neutral = np.arcsinh(0.5 * self.c_scaled)
        self.n_neutral = np.exp(self.chi_neutral)
        self.p_neutral = np.exp(-self.chi_neutral)

        r0 = self.rate_scale
        self.cd_s = mat.C_d * self.n_i ** 2 / r0
        self.cn_s = mat.C_n * self.n_i ** 3 / r0
        self.cp_s = mat.C_p * self.n_i ** 3 / r0
        self.taun_s = mat.tau_n * r0 / self.n_i
        self.taup_s = mat.tau_p * r0 / self.n_i
        self.nt_s = mat.n_T / self.n_i
        self.pt_s = mat.p_T / self.n_i

        self.r_tilde = geom.load_resistance * self.current_scale / self.u_t
        self.kappa_tilde = kappa(laser) / (self.u_t * self.n_i * self.L0)

        dir_nodes = np.concatenate([mesh.contact1_nodes, mesh.contact2_nodes])
        self.dirichlet_nodes = dir_nodes
        self.interior = np.ones(n, dtype=bool)
        self.interior[dir_nodes] = False
        self.keep_row = self.interior.astype(np.float64)

        # generation cell weights: Gaussian CDF differences in x,
        # exponential layer masses in z (both exact per box)
        self.bx_um = mesh.box_bounds_x * CM_TO_UM
        bz_um = mesh.box_bounds_z * CM_TO_UM
        self.wz = np.exp(bz_um[1:] / laser.d_A) - np.exp(bz_um[:-1] / laser.d_A)

        self._equilibrium = None
        self._build_pattern()

    # ---------- Jacobian sparsity pattern ----------

    def _build_pattern(self) -> None:
        n = self.n_nodes
        ek, el = self.ek, self.el
        iu = self.iu
        ce = self.mesh.contact2_edges
        keep = self.keep_row
        rng = np.arange(n)
        dn = self.dirichlet_nodes
        c2 = self.mesh.contact2_nodes

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        static: dict[int, np.ndarray] = {}

        def block(r, c, data=None):
            if data is not None:
                static[len(rows)] = np.asarray(data, dtype=np.float64)
            rows.append(np.asarray(r, dtype=np.int64))
            cols.append(np.asarray(c, dtype=np.int64))

        lam_g = self.lam2 * self.trans
        # 0-3 Poisson edge stencil (static, masked to interior rows)
        block(ek, ek, lam_g * keep[ek])
        block(el, el, lam_g * keep[el])
        block(ek, el, -lam_g * keep[ek])
        block(el, ek, -lam_g * keep[el])
        # 4-5 Poisson charge terms (the row is linear in n and p)
        block(rng, n + rng, self.vol * keep)
        block(rng, 2 * n + rng, -self.vol * keep)
        # 6-8 Dirichlet identity rows for chi, n, p
        ones = np.ones(dn.size)
        for off in (0, n, 2 * n):
            block(off + dn, off + dn, ones)
        # 9 chi Dirichlet rows at the loaded contact couple to u
        block(c2, np.full(c2.size, iu), -np.ones(c2.size))
        # 10 circuit row diagonal
        block(np.array([iu]), np.array([iu]), np.ones(1))
        # 11-18 electron continuity, edge flux derivatives
        for cidx in (ek, el, n + ek, n + el):
            block(n + ek, cidx)
            block(n + el, cidx)
        # 19-20 electron continuity, recombination
        block(n + rng, n + rng)
        block(n + rng, 2 * n + rng)
        # 21-28 hole continuity, edge flux derivatives
        for cidx in (ek, el, 2 * n + ek, 2 * n + el):
            block(2 * n + ek, cidx)
            block(2 * n + el, cidx)
        # 29-30 hole continuity, recombination
        block(2 * n + rng, n + rng)
        block(2 * n + rng, 2 * n + rng)
        # 31-36 circuit row flux derivatives over the contact edges
        for cidx in (ek[ce], el[ce], n + ek[ce], n + el[ce],
                     2 * n + ek[ce], 2 * n + el[ce]):
            block(np.full(ce.size, iu), cidx)

        self._static = static
        rall = np.concatenate(rows)
        call = np.concatenate(cols)
        order = np.lexsort((call, rall))
        rs, cs = rall[order], call[order]
        first = np.concatenate([[True], (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])])
        starts = np.flatnonzero(first)
        m = self.n_unknowns
        self._order = order
        self._starts = starts
        self._indices = cs[starts].astype(np.int32)
        counts = np.bincount(rs[starts], minlength=m)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self._row_of_entry = rs[starts]

    # ---------- pieces ----------

    def generation(self, x0_um: float, scale: float = 1.0) -> np.ndarray:
        """Scaled cell-integrated generation vector for a spot at x0 [um]."""
        s = self.laser.sigma_L * math.sqrt(2.0)
        cdf = 0.5 * (1.0 + erf((self.bx_um - x0_um) / s))
        wx = np.diff(cdf)
        return (scale * self.kappa_tilde) * np.outer(wx, self.wz).ravel()

    def _recomb_scaled(self, ns, ps, need_derivs):
        ex = ns * ps - 1.0
        den = self.taup_s * (ns + self.nt_s) + self.taun_s * (ps + self.pt_s)
        aug = self.cn_s * ns + self.cp_s * ps
        H = self.cd_s * ex + aug * ex + ex / den
        if not need_derivs:
            return H, None, None
        dH_dn = (self.cd_s * ps + self.cn_s * ex + aug * ps
                 + (ps * den - ex * self.taup_s) / (den * den))
        dH_dp = (self.cd_s * ns + self.cp_s * ex + aug * ns
                 + (ns * den - ex * self.taun_s) / (den * den))
        return H, dH_dn, dH_dp

    def _split(self, y):
        n = self.n_nodes
        return y[:n], y[n:2 * n], y[2 * n:3 * n], float(y[self.iu])

    def _fluxes(self, chi, ns, ps):
        d = chi[self.el] - chi[self.ek]
        bp = bernoulli(d)
        bm = bp + d                       # B(-d) = B(d) + d
        jn = self.mat.mu_n * self.trans * (bp * ns[self.el] - bm * ns[self.ek])
        jp = self.mat.mu_p * self.trans * (bp * ps[self.ek] - bm * ps[self.el])
        return d, bp, bm, jn, jp

    def residual(self, y: np.ndarray, gamma: np.ndarray,
                 u_fixed: float | None) -> np.ndarray:
        """Scaled residual; u_fixed None activates the circuit row."""
        n = self.n_nodes
        ek, el = self.ek, self.el
        chi, ns, ps, u = self._split(y)
        with np.errstate(all="ignore"):
            d, bp, bm, jn, jp = self._fluxes(chi, ns, ps)
            H, _, _ = self._recomb_scaled(ns, ps, False)

            pois = self.lam2 * self.trans * (chi[ek] - chi[el])
            F = np.empty(self.n_unknowns)
            F[:n] = (np.bincount(ek, weights=pois, minlength=n)
                     - np.bincount(el, weights=pois, minlength=n)
                     - (ps - ns + self.c_scaled) * self.vol)
            divn = (np.bincount(ek, weights=jn, minlength=n)
                    - np.bincount(el, weights=jn, minlength=n))
            divp = (np.bincount(ek, weights=jp, minlength=n)
                    - np.bincount(el, weights=jp, minlength=n))
            src = gamma - H * self.vol
            F[n:2 * n] = -divn - src
            F[2 * n:3 * n] = divp - src

            dn = self.dirichlet_nodes
            c2 = self.mesh.contact2_nodes
            F[dn] = chi[dn] - self.chi_neutral[dn]
            F[c2] -= u
            F[n + dn] = ns[dn] - self.n_neutral[dn]
            F[2 * n + dn] = ps[dn] - self.p_neutral[dn]

            if u_fixed is None:
                ce = self.mesh.contact2_edges
                F[self.iu] = u + self.r_tilde * float(np.sum(jn[ce] + jp[ce]))
            else:
                F[self.iu] = u - u_fixed
        return F

    def current_scaled(self, y: np.ndarray) -> float:
        """Contact current in scaled units, from the assembly's edge fluxes.

        Oriented as the current the loaded contact draws from the external
        circuit (positive when the photovoltage rises with the local doping
        slope), so u = R * i_D holds with the same sign on both sides.
        """
        chi, ns, ps, _ = self._split(y)
        ce = self.mesh.contact2_edges
        jn, jp = self._fluxes(chi, ns, ps)[-2:]
        return -float(np.sum(jn[ce] + jp[ce]))

    def current(self, y: np.ndarray) -> float:
        """Contact current i_D [A] at the loaded contact."""
        return self.current_scaled(y) * self.current_scale

    def jacobian(self, y: np.ndarray, gamma: np.ndarray,
                 u_fixed: float | None):
        """Residual and CSR Jacobian at y (shared intermediates)."""
        n = self.n_nodes
        ek, el = self.ek, self.el
        keep = self.keep_row
        chi, ns, ps, u = self._split(y)
        with np.errstate(all="ignore"):
            d, bp, bm, jn, jp = self._fluxes(chi, ns, ps)
            dbp = bernoulli_prime(d)
            dbm = -dbp - 1.0              # B'(-d) = -B'(d) - 1
            mun_t = self.mat.mu_n * self.trans
            mup_t = self.mat.mu_p * self.trans
            nk, nl = ns[ek], ns[el]
            pk, pl = ps[ek], ps[el]

            # d = chi_l - chi_k, so d(.)/dchi_k = -d(.)/dchi_l
            djn_chil = mun_t * (dbp * nl + dbm * nk)
            djn_nk = -mun_t * bm
            djn_nl = mun_t * bp
            djp_chil = mup_t * (dbp * pk + dbm * pl)
            djp_pk = mup_t * bp
            djp_pl = -mup_t * bm

            H, Hn, Hp = self._recomb_scaled(ns, ps, True)
            vol = self.vol

            pois = self.lam2 * self.trans * (chi[ek] - chi[el])
            F = np.empty(self.n_unknowns)
            F[:n] = (np.bincount(ek, weights=pois, minlength=n)
                     - np.bincount(el, weights=pois, minlength=n)
                     - (ps - ns + self.c_scaled) * vol)
            divn = (np.bincount(ek, weights=jn, minlength=n)
                    - np.bincount(el, weights=jn, minlength=n))
            divp = (np.bincount(ek, weights=jp, minlength=n)
                    - np.bincount(el, weights=jp, minlength=n))
            src = gamma - H * vol
            F[n:2 * n] = -divn - src
            F[2 * n:3 * n] = divp - src
            dnn = self.dirichlet_nodes
            c2 = self.mesh.contact2_nodes
            F[dnn] = chi[dnn] - self.chi_neutral[dnn]
            F[c2] -= u
            F[n + dnn] = ns[dnn] - self.n_neutral[dnn]
            F[2 * n + dnn] = ps[dnn] - self.p_neutral[dnn]
            ce = self.mesh.contact2_edges
            if u_fixed is None:
                F[self.iu] = u + self.r_tilde * float(np.sum(jn[ce] + jp[ce]))
            else:
                F[self.iu] = u - u_fixed

            kek, kel = keep[ek], keep[el]
            if u_fixed is None:
                rt = self.r_tilde
                crow = [(-rt) * (djn_chil[ce] + djp_chil[ce]),
                        rt * (djn_chil[ce] + djp_chil[ce]),
                        rt * djn_nk[ce], rt * djn_nl[ce],
                        rt * djp_pk[ce], rt * djp_pl[ce]]
            else:
                z = np.zeros(ce.size)
                crow = [z, z, z, z, z, z]

            st = self._static
            parts = [
                st[0], st[1], st[2], st[3], st[4], st[5],
                st[6], st[7], st[8], st[9], st[10],
                # electron rows: F_n = -div j_n - src
                djn_chil * kek, -djn_chil * kel,      # wrt chi_k (= -d/dchi_l)
                -djn_chil * kek, djn_chil * kel,      # wrt chi_l
                -djn_nk * kek, djn_nk * kel,          # wrt n_k
                -djn_nl * kek, djn_nl * kel,          # wrt n_l
                Hn * vol * keep, Hp * vol * keep,
                # hole rows: F_p = +div j_p - src
                -djp_chil * kek, djp_chil * kel,      # wrt chi_k
                djp_chil * kek, -djp_chil * kel,      # wrt chi_l
                djp_pk * kek, -djp_pk * kel,          # wrt p_k
                djp_pl * kek, -djp_pl * kel,          # wrt p_l
                Hn * vol * keep, Hp * vol * keep,
                *crow,
            ]
            vals = np.concatenate(parts)
            data = np.add.reduceat(vals[self._order], self._starts)
        A = csr_matrix((data, self._indices, self._indptr),
                       shape=(self.n_unknowns, self.n_unknowns))
        return F, A

    # ---------- equilibrium ----------

    def equilibrium_chi(self) -> np.ndarray:
        """Scaled potential of thermal equilibrium (Poisson only)."""
        if self._equilibrium is not None:
            return self._equilibrium
        n = self.n_nodes
        lam_g = self.lam2 * self.trans
        ek, el = self.ek, self.el
        keep = self.keep_row
        dn = self.dirichlet_nodes
        opts = self.options
        rows = np.concatenate([ek, el, ek, el, np.arange(n), dn])
        cols = np.concatenate([ek, el, el, ek, np.arange(n), dn])
        stat = [lam_g * keep[ek], lam_g * keep[el],
                -lam_g * keep[ek], -lam_g * keep[el]]

        def res_and_diag(chi):
            ns = np.exp(chi)
            ps = np.exp(-chi)
            flux = lam_g * (chi[ek] - chi[el])
            F = (np.bincount(ek, weights=flux, minlength=n)
                 - np.bincount(el, weights=flux, minlength=n)
                 - (ps - ns + self.c_scaled) * self.vol)
            F[dn] = chi[dn] - self.chi_neutral[dn]
            dcharge = (ns + ps) * self.vol
            diag = (np.bincount(ek, weights=lam_g, minlength=n)
                    + np.bincount(el, weights=lam_g, minlength=n) + dcharge)
            diag[dn] = 1.0
            return F, diag, dcharge

        chi = self.chi_neutral.copy()
        F, diag, dcharge = res_and_diag(chi)
        rn = _scaled_norm(F, diag, chi)
        for it in range(opts.max_iterations):
            if opts.trace is not None:
                opts.trace.write(f"equilibrium iter {it:3d} residual {rn:.3e}\n")
            if rn < opts.newton_tol:
                self._equilibrium = chi
                return chi
            data = np.concatenate(stat + [dcharge * keep, np.ones(dn.size)])
            A = csr_matrix((data, (rows, cols)), shape=(n, n))
            step = _LinearOp(A, opts.linear_solver).solve(-F)
            lam = 1.0
            while lam >= opts.damping_min:
                trial = chi + lam * step
                with np.errstate(over="ignore"):
                    TF, tdiag, tch = res_and_diag(trial)
                trn = _scaled_norm(TF, diag, chi)
                if trn < (1.0 - 0.25 * lam) * rn or trn < opts.newton_tol:
                    break
                lam *= 0.5
            else:
                raise DampingExhausted("equilibrium line search stalled")
            chi, F, dcharge, diag = trial, TF, tch, tdiag
            rn = _scaled_norm(F, diag, chi)
        if rn < opts.newton_tol:
            self._equilibrium = chi
            return chi
        raise NonConvergence("equilibrium Newton did not converge",
                             opts.max_iterations, rn)

    def equilibrium_state_vector(self) -> np.ndarray:
        chi = self.equilibrium_chi()
        y = np.zeros(self.n_unknowns)
        n = self.n_nodes
        y[:n] = chi
        y[n:2 * n] = np.exp(chi)
        y[2 * n:3 * n] = np.exp(-chi)
        return y


def _scaled_norm(F: np.ndarray, diag: np.ndarray, y: np.ndarray) -> float:
    """max_i |F_i| / (|J_ii| (1 + |y_i|)): the Newton update each row asks
    for, measured relative to the unknown's size (absolute below 1).

    The density weights matter: majority-carrier continuity rows sum fluxes
    of order B*n against a diagonal of order B, so their raw |F_i|/|J_ii|
    carries an n*eps floating-point floor (~1e-9 at 1e16 doping) that says
    nothing about convergence.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.abs(F) / (diag * (1.0 + np.abs(y)))
    m = float(np.max(v))
    return m if np.isfinite(m) else math.inf


def _newton(sys_: DiscreteSystem, y: np.ndarray, gamma: np.ndarray,
            u_fixed: float | None, opts: SolverOptions,
            fact: _Factorization, label: str):
    trace = opts.trace
    y = y.copy()
    r = sys_.residual(y, gamma, u_fixed)
    rn = _scaled_norm(r, fact.diag, y) if fact.diag is not None else math.inf
    for it in range(opts.max_iterations):
        if rn < opts.newton_tol:
            return y, it, rn
        if fact.op is None:
            r = fact.assemble(sys_, y, gamma, u_fixed)
            rn = _scaled_norm(r, fact.diag, y)
            if rn < opts.newton_tol:
                return y, it, rn
        step = fact.solve(r)
        if not np.all(np.isfinite(step)):
            if fact.age > 0:
                fact.op = None
                continue
            raise SingularSystem("non-finite Newton step from fresh Jacobian")
        lam = 1.0
        accepted = False
        while lam >= opts.damping_min:
            y_try = y + lam * step
            r_try = sys_.residual(y_try, gamma, u_fixed)
            rn_try = _scaled_norm(r_try, fact.diag, y)
            if rn_try < (1.0 - 0.25 * lam) * rn or rn_try < opts.newton_tol:
                accepted = True
                break
            lam *= 0.5
        if trace is not None:
            trace.write(f"{label} iter {it:3d} residual {rn:.3e} "
                        f"damping {lam:.3e}"
                        f"{' (reused jacobian)' if fact.age > 0 else ''}\n")
        if not accepted:
            if fact.age > 0:
                fact.op = None      # retry this iterate with a fresh Jacobian
                continue
            raise DampingExhausted(
                f"line search stalled at residual {rn:.3e} ({label})")
        contraction = rn_try / rn if rn > 0 else 0.0
        y, r = y_try, r_try
        rn = _scaled_norm(r, fact.diag, y)
        fact.age += 1
        if not (opts.reuse_jacobian and contraction < 0.3):
            fact.op = None
    if rn < opts.newton_tol:
        return y, opts.max_iterations, rn
    raise NonConvergence(f"Newton did not converge ({label})",
                         opts.max_iterations, rn)


def build_system(mat: MaterialParams, laser: LaserParams, geom: DeviceGeometry,
                 doping: DopingSpec, options: SolverOptions | None = None,
                 mesh: Mesh2D | None = None) -> DiscreteSystem:
    opts = options or SolverOptions()
    if mesh is None:
        mesh = build_mesh(geom, nx=opts.mesh_nx, nz=opts.mesh_nz,
                          z_ratio=opts.z_ratio)
    return DiscreteSystem(mat, laser, geom, doping, mesh, opts)


def _make_state(sys_: DiscreteSystem, y: np.ndarray, x0_um: float,
                iterations: int, residual: float) -> PdeState:
    chi, ns, ps, u = sys_._split(y)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi_n = (chi - np.log(np.maximum(ns, 1e-300))) * sys_.u_t
        phi_p = (chi + np.log(np.maximum(ps, 1e-300))) * sys_.u_t
    return PdeState(
        mesh=sys_.mesh,
        x0_um=x0_um,
        u=u * sys_.u_t,
        psi=chi * sys_.u_t + sys_.psi_i,
        phi_n=phi_n,
        phi_p=phi_p,
        n=ns * sys_.n_i,
        p=ps * sys_.n_i,
        i_d=sys_.current(y),
        iterations=iterations,
        residual=residual,
        system=sys_,
        y_scaled=y,
    )


def solve_equilibrium(sys_: DiscreteSystem) -> PdeState:
    """Thermal equilibrium: phi_n = phi_p = u = 0, Poisson only."""
    y = sys_.equilibrium_state_vector()
    return _make_state(sys_, y, math.nan, 0, 0.0)


def solve_van_roosbroeck(sys_: DiscreteSystem, x0_um: float, u_contact: float,
                         initial: np.ndarray | None = None) -> PdeState:
    """Full coupled solve at a fixed contact voltage u_D2 = u_contact [V]."""
    opts = sys_.options
    gamma = sys_.generation(x0_um)
    y0 = initial if initial is not None else sys_.equilibrium_state_vector()
    y, it, rn = _newton(sys_, y0, gamma, u_contact / sys_.u_t, opts,
                        _Factorization(), f"x0={x0_um:.2f}um fixed-u")
    return _make_state(sys_, y, x0_um, it, rn)


def solve_laser_voltage(sys_: DiscreteSystem, x0_um: float,
                        initial: np.ndarray | None = None,
                        fact: _Factorization | None = None) -> PdeState:
    """Photovoltage solve with the bordered circuit unknown u = R i_D.

    Tries a direct Newton solve from the warm start (or equilibrium), and
    falls back to ramping the generation term up from equilibrium in
    power_ramp_steps doublings when that fails.
    """
    opts = sys_.options
    gamma = sys_.generation(x0_um)
    if fact is None:
        fact = _Factorization()
    y0 = initial if initial is not None else sys_.equilibrium_state_vector()
    label = f"x0={x0_um:.2f}um"
    try:
        y, it, rn = _newton(sys_, y0, gamma, None, opts, fact, label)
    except SolverError:
        y = sys_.equilibrium_state_vector()
        # Size the ramp from the measured full-power residual at equilibrium
        # so the first stage is a mild perturbation; the assembled Jacobian
        # doubles as the first stage's operator (gamma only shifts F).
        r_eq = fact.assemble(sys_, y, gamma, None)
        r0 = _scaled_norm(r_eq, fact.diag, y)
        stages = max(opts.power_ramp_steps, min(
            60, 1 + int(math.ceil(math.log2(max(r0, 1.0) / 0.25)))))
        fracs = [2.0 ** (k + 1 - stages) for k in range(stages)]
        if opts.trace is not None:
            opts.trace.write(f"{label} ramping generation over "
                             f"{stages} stages from {fracs[0]:.2e}\n")
        try:
            for f in fracs:
                y, it, rn = _newton(sys_, y, gamma * f, None, opts, fact,
                                    f"{label} ramp {f:g}")
        except SolverError as exc:
            raise DampingExhausted(
                f"power ramp failed at x0={x0_um:g} um: {exc}") from exc
    # Polish the circuit row below circuit_tol (newton_tol is looser); near
    # the solution plain chord steps contract fast.
    prev = math.inf
    for _ in range(12):
        r = sys_.residual(y, gamma, None)
        mismatch = abs(float(r[sys_.iu]))
        if mismatch <= opts.circuit_tol:
            break
        if mismatch >= prev and fact.age > 0:
            fact.op = None
        if fact.op is None:
            r = fact.assemble(sys_, y, gamma, None)
        y = y + fact.solve(r)
        fact.age += 1
        it += 1
        prev = mismatch
    else:
        raise CircuitNonConvergence("circuit equation refinement failed",
                                    it, mismatch)
    return _make_state(sys_, y, x0_um, it, rn)


def contact_current(state: PdeState) -> float:
    """Contact current [A] recomputed from a converged state with the same
    Scharfetter-Gummel edge fluxes the assembly uses (flux-consistent)."""
    return state.system.current(state.y_scaled)


def sweep_blocks(n_points: int, spacing: int) -> list[range]:
    """Fixed partition of spot indices into warm-start blocks, independent
    of the worker count (so sweep outputs are too)."""
    return [range(i, min(i + spacing, n_points))
            for i in range(0, n_points, spacing)]


def sweep(sys_: DiscreteSystem, positions_um, workers: int = 1) -> np.ndarray:
    """Photovoltage u_P [V] at each laser position.

    Each block of consecutive spots is solved left to right, warm-started
    from the previous spot; the first spot of a block starts from
    equilibrium.  Blocks are self-contained, so any worker count produces
    bitwise identical results.  Solver errors are re-raised with spot_index
    and position_um attributes identifying the failing spot.
    """
    positions_um = np.asarray(positions_um, dtype=np.float64)
    y_eq = sys_.equilibrium_state_vector()
    out = np.empty(positions_um.size)

    def run_block(blk: range) -> None:
        fact = _Factorization()
        y_prev = y_eq
        for i in blk:
            try:
                st = solve_laser_voltage(sys_, float(positions_um[i]),
                                         initial=y_prev, fact=fact)
            except SolverError as exc:
                exc.spot_index = i
                exc.position_um = float(positions_um[i])
                raise
            y_prev = st.y_scaled
            out[i] = st.u

    blocks = sweep_blocks(positions_um.size, sys_.options.anchor_spacing)
    if workers <= 1:
        for blk in blocks:
            run_block(blk)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_block, blocks))
    return out
