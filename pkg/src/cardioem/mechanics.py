"""Finite-strain active-stress hyperelasticity on P1 tets.

Two constitutive laws: an exponential orthotropic law (myocardium) and a
nearly incompressible Neo-Hookean law (valves, caps, vessels), both with
analytic first Piola tensors and analytic tangents (verified against
finite differences in the test suite).  The active stress acts along the
deformed fiber/sheet/normal directions with configurable shares; with the
stabilization enabled the tension is augmented by the crossbridge
stiffness times the fiber-stretch increment of the current step, which
couples implicitly into the tangent.

Displacements are P1 vector fields with node-blocked DOFs; F is
piecewise constant, so volume integrands are evaluated once per cell
(exact).  Boundary terms use exact P1 triangle integration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cardioem.errors import ConfigError, GeometryError, SolverError
from cardioem.fem import FeSpace, triangle_p1_mass
from cardioem.mesh import LabeledMesh, with_vertices

USYK_B_DEFAULT = dict(b_ff=8.0, b_ss=6.0, b_nn=3.0, b_fs=12.0, b_fn=3.0, b_sn=3.0)


@dataclass
class MaterialRegionParams:
    """Constitutive parameters of one labeled region."""

    kind: str                       # "usyk" | "neo-hookean"
    c_Pa: float = 0.88e3            # exponential-law stiffness scale
    bulk_Pa: float = 50e3           # exponential-law volumetric modulus
    b_coeffs: dict = field(default_factory=lambda: dict(USYK_B_DEFAULT))
    mu_Pa: float = 10e5             # neo-hookean shear modulus
    kappa_Pa: float = 50e5          # neo-hookean bulk modulus
    active: bool = False            # active stress applies in this region
    rho_kg_per_m3: float = 1e3

    def __post_init__(self):
        if self.kind not in ("usyk", "neo-hookean"):
            raise ConfigError(f"unknown material kind {self.kind!r}")
        for v in (self.c_Pa, self.bulk_Pa, self.mu_Pa, self.kappa_Pa, self.rho_kg_per_m3):
            if v <= 0:
                raise ConfigError("material moduli and density must be positive")


@dataclass
class BoundaryConditionSet:
    """Surface-wise conditions; every boundary facet gets exactly one kind.

    robin: {surface: (K_perp [Pa/m], C_perp [Pa s/m])}
    pressure: {surface: channel name} (channel pressures supplied per solve)
    dirichlet: [surface, ...] (homogeneous)
    free: [surface, ...] (natural)
    """

    robin: dict = field(default_factory=dict)
    pressure: dict = field(default_factory=dict)
    dirichlet: list = field(default_factory=list)
    free: list = field(default_factory=list)

    def validate_coverage(self, mesh: LabeledMesh):
        covered = np.zeros(len(mesh.facets), dtype=int)
        for group in (list(self.robin), list(self.pressure), self.dirichlet, self.free):
            for surf in group:
                covered[mesh.surface_facets(surf)] += 1
        if np.any(covered != 1):
            bad = int(np.nonzero(covered != 1)[0][0])
            raise ConfigError(
                f"boundary facet {bad} (surface label {mesh.facet_labels[bad]}) "
                f"covered {covered[bad]} times; need exactly one condition"
            )


@dataclass
class MechanicsState:
    d: np.ndarray
    d_prev: np.ndarray = None
    d_prev2: np.ndarray = None

    def copy(self):
        return MechanicsState(
            self.d.copy(),
            None if self.d_prev is None else self.d_prev.copy(),
            None if self.d_prev2 is None else self.d_prev2.copy(),
        )


@dataclass
class NewtonConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-6
    max_iters: int = 40
    max_backtracks: int = 14
    max_ramp_levels: int = 10


# ---------------------------------------------------------------------------
# constitutive evaluation (vectorized over cells)


def _usyk_setup(params_b):
    b = params_b
    return np.array(
        [
            [b["b_ff"], b["b_fs"], b["b_fn"]],
            [b["b_fs"], b["b_ss"], b["b_sn"]],
            [b["b_fn"], b["b_sn"], b["b_nn"]],
        ]
    )


def usyk_energy(F, R, c_Pa, bulk_Pa, Bmat):
    """W = C/2 (e^Q - 1) + B/2 (J-1) ln J, Q orthotropic in the fiber frame."""
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise GeometryError("non-positive Jacobian in strain energy")
    E = 0.5 * (np.einsum("cki,ckj->cij", F, F) - np.eye(3))
    Et = np.einsum("cki,ckl,clj->cij", R, E, R, optimize=True)
    Q = np.einsum("ab,cab->c", Bmat, Et**2)
    return 0.5 * c_Pa * (np.exp(Q) - 1.0) + 0.5 * bulk_Pa * (J - 1.0) * np.log(J)


def usyk_piola(F, R, c_Pa, bulk_Pa, Bmat):
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise GeometryError("non-positive Jacobian in stress evaluation")
    FinvT = np.transpose(np.linalg.inv(F), (0, 2, 1))
    E = 0.5 * (np.einsum("cki,ckj->cij", F, F) - np.eye(3))
    Et = np.einsum("cki,ckl,clj->cij", R, E, R, optimize=True)
    Q = np.einsum("ab,cab->c", Bmat, Et**2)
    BE = Bmat[None] * Et
    S = (c_Pa * np.exp(Q))[:, None, None] * np.einsum("cik,ckl,cjl->cij", R, BE, R, optimize=True)
    h = 0.5 * bulk_Pa * (J * np.log(J) + J - 1.0)
    return np.einsum("cik,ckj->cij", F, S) + h[:, None, None] * FinvT


def usyk_piola_dir(F, R, c_Pa, bulk_Pa, Bmat, dF):
    """Directional derivative of the exponential-law Piola tensor."""
    J = np.linalg.det(F)
    Finv = np.linalg.inv(F)
    FinvT = np.transpose(Finv, (0, 2, 1))
    E = 0.5 * (np.einsum("cki,ckj->cij", F, F) - np.eye(3))
    Et = np.einsum("cki,ckl,clj->cij", R, E, R, optimize=True)
    Q = np.einsum("ab,cab->c", Bmat, Et**2)
    BE = Bmat[None] * Et
    S = (c_Pa * np.exp(Q))[:, None, None] * np.einsum("cik,ckl,cjl->cij", R, BE, R, optimize=True)

    dE = 0.5 * (np.einsum("cki,ckj->cij", dF, F) + np.einsum("cki,ckj->cij", F, dF))
    dEt = np.einsum("cki,ckl,clj->cij", R, dE, R)
    inner = 2.0 * np.einsum("ab,cab,cab->c", Bmat, Et, dEt)
    dS = (c_Pa * np.exp(Q))[:, None, None] * (
        inner[:, None, None] * np.einsum("cik,ckl,cjl->cij", R, BE, R, optimize=True)
        + np.einsum("cik,ckl,cjl->cij", R, Bmat[None] * dEt, R, optimize=True)
    )
    dPd = np.einsum("cik,ckj->cij", dF, S) + np.einsum("cik,ckj->cij", F, dS)

    h = 0.5 * bulk_Pa * (J * np.log(J) + J - 1.0)
    hp = 0.5 * bulk_Pa * (np.log(J) + 2.0)
    tr = np.einsum("cik,cki->c", Finv, dF)
    dPv = (hp * J * tr)[:, None, None] * FinvT - h[:, None, None] * np.einsum(
        "cik,clk,clj->cij", FinvT, dF, FinvT, optimize=True
    )
    return dPd + dPv


def neo_hookean_energy(F, mu_Pa, kappa_Pa):
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise GeometryError("non-positive Jacobian in strain energy")
    I1 = np.einsum("cij,cij->c", F, F)
    lnJ = np.log(J)
    return 0.5 * mu_Pa * (J ** (-2.0 / 3.0) * I1 - 3.0) + 0.25 * kappa_Pa * (
        (J - 1.0) ** 2 + lnJ**2
    )


def neo_hookean_piola(F, mu_Pa, kappa_Pa):
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise GeometryError("non-positive Jacobian in stress evaluation")
    FinvT = np.transpose(np.linalg.inv(F), (0, 2, 1))
    I1 = np.einsum("cij,cij->c", F, F)
    Jm23 = J ** (-2.0 / 3.0)
    P_iso = mu_Pa[:, None, None] * Jm23[:, None, None] * (
        F - (I1 / 3.0)[:, None, None] * FinvT
    )
    hn = 0.5 * kappa_Pa * (J * (J - 1.0) + np.log(J))
    return P_iso + hn[:, None, None] * FinvT


def usyk_tangent(F, R, c_Pa, bulk_Pa, Bmat):
    """Full dP/dF tensor (nc,3,3,3,3) of the exponential law."""
    nc = F.shape[0]
    J = np.linalg.det(F)
    Finv = np.linalg.inv(F)
    FinvT = np.transpose(Finv, (0, 2, 1))
    E = 0.5 * (np.einsum("cki,ckj->cij", F, F) - np.eye(3))
    Et = np.einsum("cki,ckl,clj->cij", R, E, R, optimize=True)
    Q = np.einsum("ab,cab->c", Bmat, Et**2)
    ceQ = c_Pa * np.exp(Q)
    G = np.einsum("cia,ab,cab,cjb->cij", R, Bmat, Et, R, optimize=True)
    S = ceQ[:, None, None] * G
    # material tangent dS/dE = ceQ (2 G (x) G + M); M (the frame-weighted
    # elementwise map) acts on symmetric strains only, so symmetrize its
    # trailing index pair before contracting with dE/dF
    M = np.einsum("cAa,cBb,ab,cCa,cDb->cABCD", R, R, Bmat, R, R, optimize=True)
    dS = ceQ[:, None, None, None, None] * (
        2.0 * np.einsum("cAB,cCD->cABCD", G, G) + M
    )
    dS = 0.5 * (dS + dS.swapaxes(3, 4))
    # geometric + material parts: A = d_ik S_JL + F_iA dS_AJLD F_kD
    A = np.einsum("ciA,cAJLD,ckD->ciJkL", F, dS, F, optimize=True)
    A += np.einsum("ik,cJL->ciJkL", np.eye(3), S)
    h = 0.5 * bulk_Pa * (J * np.log(J) + J - 1.0)
    hp = 0.5 * bulk_Pa * (np.log(J) + 2.0)
    A += (hp * J)[:, None, None, None, None] * np.einsum("ciJ,ckL->ciJkL", FinvT, FinvT)
    A -= h[:, None, None, None, None] * np.einsum("ciL,ckJ->ciJkL", FinvT, FinvT)
    return A


def neo_hookean_tangent(F, mu_Pa, kappa_Pa):
    """Full dP/dF tensor (nc,3,3,3,3) of the Neo-Hookean law."""
    J = np.linalg.det(F)
    Finv = np.linalg.inv(F)
    FinvT = np.transpose(Finv, (0, 2, 1))
    I1 = np.einsum("cij,cij->c", F, F)
    Jm23 = J ** (-2.0 / 3.0)
    base = F - (I1 / 3.0)[:, None, None] * FinvT
    eye4 = np.einsum("ik,JL->iJkL", np.eye(3), np.eye(3))
    A = mu_Pa[:, None, None, None, None] * (
        (-2.0 / 3.0) * Jm23[:, None, None, None, None]
        * np.einsum("ciJ,ckL->ciJkL", base, FinvT)
        + Jm23[:, None, None, None, None]
        * (
            eye4[None]
            - (2.0 / 3.0) * np.einsum("ciJ,ckL->ciJkL", FinvT, F)
            + (I1 / 3.0)[:, None, None, None, None]
            * np.einsum("ciL,ckJ->ciJkL", FinvT, FinvT)
        )
    )
    hn = 0.5 * kappa_Pa * (J * (J - 1.0) + np.log(J))
    hnp = 0.5 * kappa_Pa * (2.0 * J - 1.0 + 1.0 / J)
    A += (hnp * J)[:, None, None, None, None] * np.einsum("ciJ,ckL->ciJkL", FinvT, FinvT)
    A -= hn[:, None, None, None, None] * np.einsum("ciL,ckJ->ciJkL", FinvT, FinvT)
    return A


def active_tangent(F, fibers_cells, shares, T_eff, K_stab=None, stabilized=False):
    """Full dP/dF of the orthotropic active stress."""
    nc = F.shape[0]
    A = np.zeros((nc, 3, 3, 3, 3))
    dir_sum = np.zeros((nc, 3, 3))
    for share, vecs in zip(shares, fibers_cells):
        if share == 0.0:
            continue
        Fv = np.einsum("cij,cj->ci", F, vecs)
        s = np.linalg.norm(Fv, axis=1)
        s = np.where(s > 0, s, 1.0)
        dirm = np.einsum("ci,cj->cij", Fv, vecs) / s[:, None, None]
        dir_sum += share * dirm
        vvT = np.einsum("cJ,cL->cJL", vecs, vecs)
        A += (share * T_eff / s)[:, None, None, None, None] * np.einsum(
            "ik,cJL->ciJkL", np.eye(3), vvT
        )
        A -= (share * T_eff / s**3)[:, None, None, None, None] * np.einsum(
            "ci,cJ,ck,cL->ciJkL", Fv, vecs, Fv, vecs, optimize=True
        )
    if stabilized and K_stab is not None:
        f0 = fibers_cells[0]
        Ff = np.einsum("cij,cj->ci", F, f0)
        sf = np.linalg.norm(Ff, axis=1)
        sf = np.where(sf > 0, sf, 1.0)
        dT = (K_stab / sf)[:, None, None] * np.einsum("ck,cL->ckL", Ff, f0)
        A += np.einsum("ciJ,ckL->ciJkL", dir_sum, dT)
    return A


def neo_hookean_piola_dir(F, mu_Pa, kappa_Pa, dF):
    J = np.linalg.det(F)
    Finv = np.linalg.inv(F)
    FinvT = np.transpose(Finv, (0, 2, 1))
    I1 = np.einsum("cij,cij->c", F, F)
    Jm23 = J ** (-2.0 / 3.0)
    tr = np.einsum("cik,cki->c", Finv, dF)
    FdFF = np.einsum("cik,clk,clj->cij", FinvT, dF, FinvT, optimize=True)   # FinvT dF^T FinvT
    dI1 = 2.0 * np.einsum("cij,cij->c", F, dF)
    base = F - (I1 / 3.0)[:, None, None] * FinvT
    dP_iso = mu_Pa[:, None, None] * (
        (-2.0 / 3.0) * (Jm23 * tr)[:, None, None] * base
        + Jm23[:, None, None]
        * (dF - (dI1 / 3.0)[:, None, None] * FinvT + (I1 / 3.0)[:, None, None] * FdFF)
    )
    hn = 0.5 * kappa_Pa * (J * (J - 1.0) + np.log(J))
    hnp = 0.5 * kappa_Pa * (2.0 * J - 1.0 + 1.0 / J)
    dP_vol = (hnp * J * tr)[:, None, None] * FinvT - hn[:, None, None] * FdFF
    return dP_iso + dP_vol


def active_piola(F, fibers_cells, shares, T_eff):
    """Orthotropic active stress with tension already including stabilization."""
    out = np.zeros_like(F)
    for share, vecs in zip(shares, fibers_cells):
        if share == 0.0:
            continue
        Fv = np.einsum("cij,cj->ci", F, vecs)
        s = np.linalg.norm(Fv, axis=1)
        s = np.where(s > 0, s, 1.0)
        out += (share * T_eff / s)[:, None, None] * np.einsum("ci,cj->cij", Fv, vecs)
    return out


def active_piola_dir(F, fibers_cells, shares, T_eff, dF, K_stab=None, stabilized=False):
    f0 = fibers_cells[0]
    out = np.zeros_like(F)
    if stabilized and K_stab is not None:
        Ff = np.einsum("cij,cj->ci", F, f0)
        sf = np.linalg.norm(Ff, axis=1)
        sf = np.where(sf > 0, sf, 1.0)
        dT = K_stab * np.einsum("ci,cij,cj->c", Ff, dF, f0) / sf
        for share, vecs in zip(shares, fibers_cells):
            if share == 0.0:
                continue
            Fv = np.einsum("cij,cj->ci", F, vecs)
            s = np.where(np.linalg.norm(Fv, axis=1) > 0, np.linalg.norm(Fv, axis=1), 1.0)
            out += (share * dT / s)[:, None, None] * np.einsum("ci,cj->cij", Fv, vecs)
    for share, vecs in zip(shares, fibers_cells):
        if share == 0.0:
            continue
        Fv = np.einsum("cij,cj->ci", F, vecs)
        s = np.linalg.norm(Fv, axis=1)
        s = np.where(s > 0, s, 1.0)
        dFv = np.einsum("cij,cj->ci", dF, vecs)
        ds = np.einsum("ci,ci->c", Fv, dFv) / s
        out += (share * T_eff)[:, None, None] * (
            np.einsum("ci,cj->cij", dFv, vecs) / s[:, None, None]
            - (ds / s**2)[:, None, None] * np.einsum("ci,cj->cij", Fv, vecs)
        )
    return out


# ---------------------------------------------------------------------------
# problem assembly


class MechanicsProblem:
    """Assembles residuals/Jacobians of the momentum balance on one mesh."""

    def __init__(self, mesh: LabeledMesh, materials: dict, fibers, bcs: BoundaryConditionSet,
                 shares=(1.0, 0.0, 0.4), stab_active_stress=True):
        self.mesh = mesh
        self.space = FeSpace(mesh, order=1, components=3)
        self.fibers = fibers
        self.bcs = bcs
        self.shares = tuple(shares)
        self.stab_active_stress = stab_active_stress
        bcs.validate_coverage(mesh)

        n = mesh.n_cells
        self.is_usyk = np.zeros(n, dtype=bool)
        self.active_mask = np.zeros(n, dtype=bool)
        self.c_Pa = np.zeros(n)
        self.bulk_Pa = np.zeros(n)
        self.mu_Pa = np.zeros(n)
        self.kappa_Pa = np.zeros(n)
        self.rho = np.zeros(n)
        bmat = None
        for region, mat in materials.items():
            cells = mesh.region_cells(region)
            if mat.kind == "usyk":
                self.is_usyk[cells] = True
                self.c_Pa[cells] = mat.c_Pa
                self.bulk_Pa[cells] = mat.bulk_Pa
                bmat = _usyk_setup(mat.b_coeffs)
            else:
                self.mu_Pa[cells] = mat.mu_Pa
                self.kappa_Pa[cells] = mat.kappa_Pa
            self.active_mask[cells] = mat.active
            self.rho[cells] = mat.rho_kg_per_m3
        if np.any(self.rho == 0):
            raise ConfigError("some cells have no material assigned")
        self.Bmat = bmat if bmat is not None else _usyk_setup(USYK_B_DEFAULT)

        self.grads = self.space.cell_gradients()      # (nc,4,3)
        self.vols = mesh.cell_volumes()
        self.R = np.stack([fibers.f0, fibers.s0, fibers.n0], axis=2)  # columns f,s,n
        # fallback frame on non-fibered usyk cells would be singular; the
        # orthotropic law needs a frame everywhere it is used
        if np.any(self.is_usyk & ~fibers.cell_mask):
            raise ConfigError("exponential-law cells lack fiber frames")

        self._cell_vdofs = (mesh.tets[:, :, None] * 3 + np.arange(3)).reshape(
            mesh.n_cells, 12
        )

        # boundary precomputation; the Robin terms are linear, so their
        # stiffness and damping matrices are assembled once
        areas = mesh.facet_areas()
        normals = mesh.facet_normals()
        self.robin = []
        n = self.space.n_dofs
        mass_tri = triangle_p1_mass(1.0)
        JK = sp.csr_matrix((n, n))
        JC = sp.csr_matrix((n, n))
        for surf, (kp, cp) in bcs.robin.items():
            idx = mesh.surface_facets(surf)
            tris, area, N = mesh.facets[idx], areas[idx], normals[idx]
            self.robin.append(dict(tris=tris, area=area, N=N, k=kp, c=cp))
            NN = np.einsum("fi,fj->fij", N, N)
            blk = np.einsum("ab,f,fij->faibj", mass_tri, area, NN).reshape(-1, 9, 9)
            fdofs = (tris[:, :, None] * 3 + np.arange(3)).reshape(-1, 9)
            fr = np.repeat(fdofs, 9, axis=1).reshape(-1)
            fc = np.tile(fdofs, (1, 9)).reshape(-1)
            base = sp.coo_matrix((blk.reshape(-1), (fr, fc)), shape=(n, n)).tocsr()
            JK = JK + kp * base
            JC = JC + cp * base
        self._robin_K = JK
        self._robin_C = JC
        self.pressure_channels = {}
        for surf, channel in bcs.pressure.items():
            idx = mesh.surface_facets(surf)
            entry = self.pressure_channels.setdefault(channel, [])
            entry.append(
                dict(tris=mesh.facets[idx], area=areas[idx], N=normals[idx],
                     cells=mesh.facet_cells[idx])
            )
        fixed_scalar = []
        for surf in bcs.dirichlet:
            fixed_scalar.append(self.space.surface_scalar_dofs(surf))
        if fixed_scalar:
            sd = np.unique(np.concatenate(fixed_scalar))
            self.fixed_dofs = self.space.vector_dofs(sd)
        else:
            self.fixed_dofs = np.array([], dtype=np.int64)

        # vector mass (assembled once; density-weighted)
        from cardioem.fem import assemble_mass

        self.M_rho = assemble_mass(self.space, coefficient=self.rho).matrix

    # -- kinematics ---------------------------------------------------------

    def deformation_gradient(self, d):
        dn = d.reshape(-1, 3)[self.mesh.tets]        # (nc,4,3)
        F = np.eye(3) + np.einsum("cai,caj->cij", dn, self.grads)
        return F

    def jacobians(self, d):
        return np.linalg.det(self.deformation_gradient(d))

    # -- constitutive wrappers -----------------------------------------------

    def strain_energy_cells(self, F):
        W = np.zeros(F.shape[0])
        u = self.is_usyk
        if np.any(u):
            W[u] = usyk_energy(F[u], self.R[u], self.c_Pa[u], self.bulk_Pa[u], self.Bmat)
        if np.any(~u):
            W[~u] = neo_hookean_energy(F[~u], self.mu_Pa[~u], self.kappa_Pa[~u])
        return W

    def piola_cells(self, F, T_a_cell=None, K_stab_cell=None, F_prev=None):
        P = np.zeros_like(F)
        u = self.is_usyk
        if np.any(u):
            P[u] = usyk_piola(F[u], self.R[u], self.c_Pa[u], self.bulk_Pa[u], self.Bmat)
        if np.any(~u):
            P[~u] = neo_hookean_piola(F[~u], self.mu_Pa[~u], self.kappa_Pa[~u])
        if T_a_cell is not None and np.any(self.active_mask):
            a = self.active_mask
            T_eff = np.asarray(T_a_cell, dtype=float)[a]
            if self.stab_active_stress and K_stab_cell is not None and F_prev is not None:
                f0 = self.fibers.f0[a]
                sf = np.linalg.norm(np.einsum("cij,cj->ci", F[a], f0), axis=1)
                sfp = np.linalg.norm(np.einsum("cij,cj->ci", F_prev[a], f0), axis=1)
                T_eff = T_eff + np.asarray(K_stab_cell, dtype=float)[a] * (sf - sfp)
            P[a] += active_piola(
                F[a], (self.fibers.f0[a], self.fibers.s0[a], self.fibers.n0[a]),
                self.shares, T_eff,
            )
        return P

    def piola_dir_cells(self, F, dF, T_a_cell=None, K_stab_cell=None, F_prev=None):
        dP = np.zeros_like(F)
        u = self.is_usyk
        if np.any(u):
            dP[u] = usyk_piola_dir(F[u], self.R[u], self.c_Pa[u], self.bulk_Pa[u],
                                   self.Bmat, dF[u])
        if np.any(~u):
            dP[~u] = neo_hookean_piola_dir(F[~u], self.mu_Pa[~u], self.kappa_Pa[~u], dF[~u])
        if T_a_cell is not None and np.any(self.active_mask):
            a = self.active_mask
            T_eff = np.asarray(T_a_cell, dtype=float)[a]
            K = None
            stab = self.stab_active_stress and K_stab_cell is not None and F_prev is not None
            if stab:
                f0 = self.fibers.f0[a]
                sf = np.linalg.norm(np.einsum("cij,cj->ci", F[a], f0), axis=1)
                sfp = np.linalg.norm(np.einsum("cij,cj->ci", F_prev[a], f0), axis=1)
                K = np.asarray(K_stab_cell, dtype=float)[a]
                T_eff = T_eff + K * (sf - sfp)
            dP[a] += active_piola_dir(
                F[a], (self.fibers.f0[a], self.fibers.s0[a], self.fibers.n0[a]),
                self.shares, T_eff, dF[a], K_stab=K, stabilized=stab,
            )
        return dP

    # -- residual/jacobian ----------------------------------------------------

    def _internal_residual(self, F, T_a_cell, K_stab_cell, F_prev):
        P = self.piola_cells(F, T_a_cell, K_stab_cell, F_prev)
        contrib = self.vols[:, None, None] * np.einsum("cij,caj->cai", P, self.grads)
        return np.bincount(
            self._cell_vdofs.reshape(-1), weights=contrib.reshape(-1),
            minlength=self.space.n_dofs,
        )

    def piola_tangent_cells(self, F, T_a_cell=None, K_stab_cell=None, F_prev=None):
        """Closed-form dP/dF per cell, (nc,3,3,3,3)."""
        nc = self.mesh.n_cells
        A = np.zeros((nc, 3, 3, 3, 3))
        u = self.is_usyk
        if np.any(u):
            A[u] = usyk_tangent(F[u], self.R[u], self.c_Pa[u], self.bulk_Pa[u], self.Bmat)
        if np.any(~u):
            A[~u] = neo_hookean_tangent(F[~u], self.mu_Pa[~u], self.kappa_Pa[~u])
        if T_a_cell is not None and np.any(self.active_mask):
            a = self.active_mask
            T_eff = np.asarray(T_a_cell, dtype=float)[a]
            K = None
            stab = self.stab_active_stress and K_stab_cell is not None and F_prev is not None
            if stab:
                f0 = self.fibers.f0[a]
                sf = np.linalg.norm(np.einsum("cij,cj->ci", F[a], f0), axis=1)
                sfp = np.linalg.norm(np.einsum("cij,cj->ci", F_prev[a], f0), axis=1)
                K = np.asarray(K_stab_cell, dtype=float)[a]
                T_eff = T_eff + K * (sf - sfp)
            A[a] += active_tangent(
                F[a], (self.fibers.f0[a], self.fibers.s0[a], self.fibers.n0[a]),
                self.shares, T_eff, K_stab=K, stabilized=stab,
            )
        return A

    def _internal_jacobian(self, F, T_a_cell, K_stab_cell, F_prev):
        nc = self.mesh.n_cells
        A = self.piola_tangent_cells(F, T_a_cell, K_stab_cell, F_prev)
        # element stiffness: K[(a,i),(b,k)] = V * A[i,J,k,L] g_aJ g_bL
        Ke = np.einsum("c,ciJkL,caJ,cbL->caibk", self.vols, A, self.grads, self.grads, optimize=True)
        rows = np.repeat(self._cell_vdofs, 12, axis=1).reshape(-1)
        cols = np.tile(self._cell_vdofs, (1, 12)).reshape(-1)
        return sp.coo_matrix(
            (Ke.reshape(nc, 12, 12).reshape(-1), (rows, cols)),
            shape=(self.space.n_dofs, self.space.n_dofs),
        ).tocsr()

    def _robin_residual(self, d, d_prev, dt):
        r = self._robin_K @ d
        if dt is not None and d_prev is not None:
            r = r + self._robin_C @ ((d - d_prev) / dt)
        return r

    def _robin_jacobian(self, dt):
        if dt is None:
            return self._robin_K
        return self._robin_K + self._robin_C / dt

    def _robin_terms(self, d, d_prev, dt):
        """Residual vector and Jacobian of the Robin surfaces (both linear)."""
        return self._robin_residual(d, d_prev, dt), self._robin_jacobian(dt)

    def pressure_direction(self, channel, F):
        """b(d) with residual contribution p * b: nodal J F^-T N loads."""
        r = np.zeros(self.space.n_dofs)
        for grp in self.pressure_channels.get(channel, []):
            tris, area, N, cells = grp["tris"], grp["area"], grp["N"], grp["cells"]
            Fc = F[cells]
            Jc = np.linalg.det(Fc)
            FinvT = np.transpose(np.linalg.inv(Fc), (0, 2, 1))
            vec = Jc[:, None] * np.einsum("fij,fj->fi", FinvT, N)   # (nf,3)
            contrib = (area / 3.0)[:, None, None] * vec[:, None, :].repeat(3, axis=1)
            dofs = (tris[:, :, None] * 3 + np.arange(3)).reshape(-1)
            r += np.bincount(dofs, weights=contrib.reshape(-1), minlength=len(r))
        return r

    def _pressure_jacobian(self, pressures_Pa, F):
        rows, cols, vals = [], [], []
        n = self.space.n_dofs
        for channel, groups in self.pressure_channels.items():
            p = pressures_Pa.get(channel, 0.0)
            if p == 0.0:
                continue
            for grp in groups:
                tris, area, N, cells = grp["tris"], grp["area"], grp["N"], grp["cells"]
                Fc = F[cells]
                Jc = np.linalg.det(Fc)
                Finv = np.linalg.inv(Fc)
                FinvT = np.transpose(Finv, (0, 2, 1))
                FiN = np.einsum("fij,fj->fi", FinvT, N)
                g = self.grads[cells]               # (nf,4,3)
                # d(J F^-T N)_i / d d_{b,k} with dF = e_k (x) g_b:
                # J [ (Finv^T g_b)_k FiN_i - FiN_k (Finv^T g_b)_i ]
                Fig = np.einsum("fji,fbj->fbi", Finv, g)   # (F^-T g_b)
                term = np.einsum("f,fbk,fi->fbik", Jc, Fig, FiN, optimize=True) - np.einsum(
                    "f,fk,fbi->fbik", Jc, FiN, Fig, optimize=True
                )
                blk = p * np.einsum("f,a,fbik->faibk", area / 3.0, np.ones(3), term, optimize=True)
                facet_rows = (tris[:, :, None] * 3 + np.arange(3)).reshape(-1, 9)
                cell_cols = (self.mesh.tets[cells][:, :, None] * 3 + np.arange(3)).reshape(-1, 12)
                fr = np.repeat(facet_rows, 12, axis=1).reshape(-1)
                fc = np.tile(cell_cols, (1, 9)).reshape(-1)
                # fix ordering: blk is (f, a(3), i(3), b(4), k(3)) -> rows (a,i), cols (b,k)
                vals.append(blk.reshape(-1, 9, 12).transpose(0, 1, 2).reshape(-1))
                rows.append(fr)
                cols.append(fc)
        if rows:
            return sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, n),
            ).tocsr()
        return sp.csr_matrix((n, n))

    def residual(self, d, pressures_Pa=None, T_a_cell=None, K_stab_cell=None,
                 F_prev=None, d_prev=None, d_prev2=None, dt=None):
        """Momentum residual; dynamic terms included when dt is given."""
        F = self.deformation_gradient(d)
        J = np.linalg.det(F)
        if np.any(J <= 0):
            raise GeometryError("inverted element during residual assembly")
        r = self._internal_residual(F, T_a_cell, K_stab_cell, F_prev)
        r = r + self._robin_residual(d, d_prev, dt)
        for channel, p in (pressures_Pa or {}).items():
            if p != 0.0:
                r += p * self.pressure_direction(channel, F)
        if dt is not None:
            acc = (d - 2.0 * d_prev + d_prev2) / dt**2
            r += self.M_rho @ acc
        r[self.fixed_dofs] = d[self.fixed_dofs]
        return r

    def jacobian(self, d, pressures_Pa=None, T_a_cell=None, K_stab_cell=None,
                 F_prev=None, d_prev=None, dt=None):
        F = self.deformation_gradient(d)
        K = self._internal_jacobian(F, T_a_cell, K_stab_cell, F_prev)
        K = K + self._robin_jacobian(dt)
        K = K + self._pressure_jacobian(pressures_Pa or {}, F)
        if dt is not None:
            K = K + self.M_rho / dt**2
        if len(self.fixed_dofs):
            n = self.space.n_dofs
            mask = np.ones(n)
            mask[self.fixed_dofs] = 0.0
            P = sp.diags(mask)
            fix = sp.coo_matrix(
                (np.ones(len(self.fixed_dofs)), (self.fixed_dofs, self.fixed_dofs)),
                shape=(n, n),
            )
            K = (P @ K @ P + fix).tocsr()
        return K.tocsr()


# ---------------------------------------------------------------------------
# Newton solvers


def newton_solve(problem: MechanicsProblem, d0, residual_args, config: NewtonConfig = None,
                 counter=None):
    """Newton with backtracking; returns the converged displacement.

    ``residual_args`` is the keyword dict passed to residual/jacobian.
    """
    cfg = config or NewtonConfig()
    d = d0.copy()
    d[problem.fixed_dofs] = 0.0
    history = []

    def safe_residual(x):
        try:
            return problem.residual(x, **residual_args)
        except GeometryError:
            return None

    r = safe_residual(d)
    if r is None:
        raise SolverError("initial guess has inverted elements")
    r0 = np.linalg.norm(r)
    history.append(r0)
    r_max_seen = max(r0, 1e-30)
    for it in range(cfg.max_iters):
        rn = np.linalg.norm(r)
        r_max_seen = max(r_max_seen, rn)
        tol = max(cfg.abs_tol, cfg.rel_tol * r_max_seen)
        if rn <= tol:
            return d, history
        jac_args = {k: v for k, v in residual_args.items() if k != "d_prev2"}
        K = problem.jacobian(d, **jac_args)
        if counter is not None:
            counter["jacobians"] = counter.get("jacobians", 0) + 1
        delta = spla.splu(K.tocsc()).solve(-r)
        if counter is not None:
            counter["solves"] = counter.get("solves", 0) + 1
        alpha = 1.0
        for _ in range(cfg.max_backtracks):
            d_try = d + alpha * delta
            r_try = safe_residual(d_try)
            if r_try is not None and np.linalg.norm(r_try) < (1.0 - 1e-4 * alpha) * rn:
                d, r = d_try, r_try
                break
            alpha *= 0.5
        else:
            raise SolverError(
                f"Newton line search failed at iteration {it}", residuals=history
            )
        history.append(float(np.linalg.norm(r)))
    if np.linalg.norm(r) <= max(cfg.abs_tol, cfg.rel_tol * r_max_seen):
        return d, history
    raise SolverError("Newton did not converge", residuals=history)


def newton_quasi_static(problem: MechanicsProblem, pressures_Pa=None, T_a_cell=None,
                        d0=None, config: NewtonConfig = None, counter=None):
    """Static equilibrium with automatic load ramping on divergence."""
    cfg = config or NewtonConfig()
    d0 = np.zeros(problem.space.n_dofs) if d0 is None else d0.copy()
    pressures_Pa = pressures_Pa or {}
    levels = 1
    while levels <= cfg.max_ramp_levels:
        try:
            d = d0.copy()
            for s in np.linspace(1.0 / levels, 1.0, levels):
                scaled = {k: s * v for k, v in pressures_Pa.items()}
                ta = None if T_a_cell is None else s * np.asarray(T_a_cell)
                d, _ = newton_solve(
                    problem, d,
                    dict(pressures_Pa=scaled, T_a_cell=ta), cfg, counter=counter,
                )
            return d
        except SolverError:
            levels = levels * 2 if levels > 1 else 2
            if levels > cfg.max_ramp_levels:
                raise
    raise SolverError("quasi-static load ramping exhausted")


def step_dynamics(problem: MechanicsProblem, state: MechanicsState, dt,
                  pressures_Pa=None, T_a_cell=None, K_stab_cell=None,
                  config: NewtonConfig = None, counter=None) -> MechanicsState:
    """Implicit step of the damped momentum balance (second differences)."""
    d_prev = state.d
    d_prev2 = state.d_prev if state.d_prev is not None else state.d
    F_prev = problem.deformation_gradient(d_prev)
    args = dict(
        pressures_Pa=pressures_Pa or {}, T_a_cell=T_a_cell, K_stab_cell=K_stab_cell,
        F_prev=F_prev, d_prev=d_prev, d_prev2=d_prev2, dt=dt,
    )
    d_new, _ = newton_solve(problem, d_prev, args, config, counter=counter)
    return MechanicsState(d=d_new, d_prev=d_prev, d_prev2=d_prev2)


# ---------------------------------------------------------------------------
# reference configuration recovery


def recover_reference(problem_factory, imaging_mesh: LabeledMesh, pressures_Pa,
                      T_a_cell=None, config: NewtonConfig = None,
                      fp_tol_rel=1e-9, max_fp_iters=60):
    """Unloaded configuration whose re-inflation reproduces the imaging mesh.

    Fixed-point iteration on the vertex coordinates with adaptive load
    continuation: ``problem_factory(mesh)`` builds a MechanicsProblem on a
    candidate reference mesh.
    """
    x_img = imaging_mesh.vertices.copy()
    diam = np.linalg.norm(x_img.max(axis=0) - x_img.min(axis=0))
    x0 = x_img.copy()
    levels = 1
    while levels <= 16:
        try:
            x0 = x_img.copy()
            for s in np.linspace(1.0 / levels, 1.0, levels):
                scaled = {k: s * v for k, v in pressures_Pa.items()}
                ta = None if T_a_cell is None else s * np.asarray(T_a_cell)
                hist = []
                for it in range(max_fp_iters):
                    prob = problem_factory(with_vertices(imaging_mesh, x0))
                    d = newton_quasi_static(prob, scaled, ta, config=config)
                    x_def = x0 + d.reshape(-1, 3)
                    err = np.max(np.linalg.norm(x_def - x_img, axis=1))
                    hist.append(err)
                    if err <= fp_tol_rel * diam:
                        break
                    if len(hist) > 3 and hist[-1] > 2.0 * hist[0]:
                        raise SolverError("fixed point diverging", residuals=hist)
                    x0 = x0 - (x_def - x_img)
                else:
                    raise SolverError("fixed point stagnated", residuals=hist)
            return with_vertices(imaging_mesh, x0)
        except (SolverError, GeometryError):
            levels *= 2
            if levels > 16:
                raise
    raise SolverError("reference recovery exhausted continuation levels")
