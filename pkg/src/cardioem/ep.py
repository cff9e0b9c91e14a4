"""Monodomain reaction-diffusion on the conductive subdomains.

The transmembrane potential lives on a P2 space restricted to conductive
cells; non-conductive cells carry no unknowns, which realizes the
atrioventricular insulation.  Time stepping is BDF2 with implicit
diffusion and the reaction evaluated nodally (ionic-current
interpolation) at the second-order extrapolated potential.  Deformation
feedback enters through the pulled-back diffusion tensor, refreshed once
per mechanics step from the lagged deformation gradient.

Units: potential in mV, time in seconds internally (model rates convert
from ms at this boundary), conductivities as sigma/(chi_m C_m) in m^2/s,
applied currents as I_app/C_m in V/s, both as tabulated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from cardioem.errors import ConfigError, GeometryError, SolverError
from cardioem.fem import (
    FeSpace,
    LinearSolverConfig,
    assemble_anisotropic_stiffness,
    assemble_mass,
    solve_linear,
)

MS_PER_S = 1000.0
ACTIVATION_THRESHOLD_MV = -20.0


@dataclass
class EpConstants:
    """Surface-to-volume ratio and membrane capacitance.

    Tabulated conductivities and stimulus amplitudes are already divided
    by chi_m*C_m and C_m respectively, so both default to 1; override only
    when supplying raw values.
    """

    chi_m_per_m: float = 1.0
    c_m_F_per_m2: float = 1.0

    def __post_init__(self):
        if self.chi_m_per_m <= 0 or self.c_m_F_per_m2 <= 0:
            raise ConfigError("membrane constants must be positive")


@dataclass
class ConductivityConfig:
    """Region-wise conductivity triples (fiber, sheet, normal) in m^2/s."""

    atrial: tuple = (7.00e-4, 1.41e-4, 1.41e-4)
    ventricular_myo: tuple = (2.00e-4, 1.10e-4, 0.55e-4)
    ventricular_fast: tuple = (8.00e-4, 4.40e-4, 2.20e-4)
    fast_layer_eps: float = 0.05

    def __post_init__(self):
        for triple in (self.atrial, self.ventricular_myo, self.ventricular_fast):
            if any(v <= 0 for v in triple):
                raise ConfigError("conductivities must be positive")
        if not 0.0 < self.fast_layer_eps < 1.0:
            raise ConfigError("fast layer threshold must lie in (0, 1)")


@dataclass
class Stimulus:
    center_m: tuple
    radius_m: float
    start_s: float
    duration_s: float
    amplitude_V_per_s: float = 25.71
    period_s: float = 0.8

    def __post_init__(self):
        if self.radius_m <= 0 or self.duration_s <= 0 or self.period_s <= 0:
            raise ConfigError("stimulus radius, duration and period must be positive")


def apply_stimuli(protocol, t, coords):
    """Applied current (I_app/C_m, V/s) at the given points and time.

    A sphere is active when t mod period falls in [start, start+duration).
    """
    out = np.zeros(len(coords))
    for s in protocol:
        tm = np.mod(t, s.period_s)
        if s.start_s <= tm < s.start_s + s.duration_s:
            d2 = np.sum((coords - np.asarray(s.center_m)) ** 2, axis=1)
            out[d2 <= s.radius_m**2] += s.amplitude_V_per_s
    return out


def conductivity_cell_field(mesh, fibers, cond: ConductivityConfig,
                            atrial_regions, ventricular_regions, phi_cell):
    """Per-cell reference diffusion tensors on conductive cells (else zero)."""
    n = mesh.n_cells
    D = np.zeros((n, 3, 3))
    atr = mesh.region_cells(atrial_regions) if atrial_regions else np.array([], dtype=int)
    ven = mesh.region_cells(ventricular_regions) if ventricular_regions else np.array([], dtype=int)

    def outer(cells, sigma):
        for vecs, s in zip((fibers.f0[cells], fibers.s0[cells], fibers.n0[cells]), sigma):
            D[cells] += s * np.einsum("ci,cj->cij", vecs, vecs)

    if atr.size:
        outer(atr, cond.atrial)
    if ven.size:
        fast = ven[phi_cell[ven] <= cond.fast_layer_eps]
        myo = ven[phi_cell[ven] > cond.fast_layer_eps]
        if myo.size:
            outer(myo, cond.ventricular_myo)
        if fast.size:
            outer(fast, cond.ventricular_fast)
    return D


def deformed_diffusion_tensors(D_ref, fibers, F_field=None):
    """Pull-back J F^-1 D_M F^-T with D_M built from pushed-forward fibers.

    With F = I this reduces exactly to the reference tensor.  Requires
    det F > 0 on every cell.
    """
    if F_field is None:
        return D_ref
    F = np.asarray(F_field, dtype=float)
    J = np.linalg.det(F)
    bad = np.nonzero(J <= 0)[0]
    if bad.size:
        raise GeometryError(f"inverted element in diffusion assembly: cell {bad[0]}")
    n = D_ref.shape[0]
    D_M = np.zeros_like(D_ref)
    # recover the per-direction conductivities from the reference tensor:
    # sigma_k = k . D_ref k for each unit direction
    for vecs in (fibers.f0, fibers.s0, fibers.n0):
        sig = np.einsum("ci,cij,cj->c", vecs, D_ref, vecs)
        Fv = np.einsum("cij,cj->ci", F, vecs)
        norm2 = np.einsum("ci,ci->c", Fv, Fv)
        norm2 = np.where(norm2 > 0, norm2, 1.0)
        D_M += (sig / norm2)[:, None, None] * np.einsum("ci,cj->cij", Fv, Fv)
    Finv = np.linalg.inv(F)
    out = J[:, None, None] * np.einsum("cik,ckl,cjl->cij", Finv, D_M, Finv)
    return out


class ActivationTracker:
    """First upward threshold crossings, linearly interpolated in time."""

    def __init__(self, n_dofs, threshold_mV=ACTIVATION_THRESHOLD_MV):
        self.threshold = threshold_mV
        self.times = np.full(n_dofs, np.nan)

    def update(self, t_prev, t_new, u_prev, u_new):
        fresh = (
            np.isnan(self.times)
            & (u_prev < self.threshold)
            & (u_new >= self.threshold)
        )
        if np.any(fresh):
            frac = (self.threshold - u_prev[fresh]) / (u_new[fresh] - u_prev[fresh])
            self.times[fresh] = t_prev + frac * (t_new - t_prev)

    def activated(self):
        return ~np.isnan(self.times)


@dataclass
class IonicRegion:
    """One conductive subdomain with its own ionic model and state."""

    name: str
    regions: list
    model: object
    scalar_dofs: np.ndarray = None
    state: object = None


class MonodomainSolver:
    """BDF2-IMEX monodomain stepper on the conductive DOF set."""

    def __init__(self, mesh, fibers, cond, ionic_regions, phi_cell,
                 constants: EpConstants = None,
                 solver: LinearSolverConfig = None, method="direct"):
        self.mesh = mesh
        self.fibers = fibers
        self.cond = cond
        self.constants = constants or EpConstants()
        self.space = FeSpace(mesh, order=2)
        self.solver = solver or LinearSolverConfig("CG", "AMG-or-fallback", 1e-10, 5000)
        self.method = method
        self.phi_cell = phi_cell

        self.regions = list(ionic_regions)
        all_regions = []
        for reg in self.regions:
            reg.scalar_dofs = self.space.region_dofs(reg.regions)
            reg.state = reg.model.resting_state(len(reg.scalar_dofs))
            all_regions.extend(reg.regions)
        self.conductive_regions = all_regions
        self.active = self.space.region_dofs(all_regions)
        self._pos = -np.ones(self.space.n_dofs, dtype=np.int64)
        self._pos[self.active] = np.arange(len(self.active))
        for reg in self.regions:
            reg._apos = self._pos[reg.scalar_dofs]

        atrials = [r.regions for r in self.regions if r.model.region == "atrial"]
        ventrs = [r.regions for r in self.regions if r.model.region != "atrial"]
        self._atrial = [x for sub in atrials for x in sub]
        self._ventricular = [x for sub in ventrs for x in sub]
        self.D_ref = conductivity_cell_field(
            mesh, fibers, cond, self._atrial, self._ventricular, phi_cell
        )
        self._steps = 0
        self.tracker = ActivationTracker(len(self.active))
        self.refresh_deformation(None)

        u0 = np.zeros(len(self.active))
        for reg in self.regions:
            u0[reg._apos] = reg.model.resting_u_mV
        self.u = u0
        self.u_prev = u0.copy()

    # -- assembly/update ----------------------------------------------------

    def refresh_deformation(self, F_field):
        """Reassemble mass and stiffness from the lagged deformation."""
        D = deformed_diffusion_tensors(self.D_ref, self.fibers, F_field)
        jac = np.ones(self.mesh.n_cells)
        if F_field is not None:
            jac = np.linalg.det(np.asarray(F_field, dtype=float))
        cells_cond = self.mesh.region_cells(self.conductive_regions)
        # replace zero tensors outside conductive cells before SPD check
        Dfixed = D.copy()
        mask = np.zeros(self.mesh.n_cells, dtype=bool)
        mask[cells_cond] = True
        Dfixed[~mask] = np.eye(3)
        K = assemble_anisotropic_stiffness(
            self.space, region=self.conductive_regions, tensor=Dfixed
        )
        M = assemble_mass(self.space, region=self.conductive_regions, coefficient=jac)
        ix = np.ix_(self.active, self.active)
        self.K = K.matrix[self.active][:, self.active].tocsr()
        self.M = M.matrix[self.active][:, self.active].tocsr()
        self._lhs_cache = {}

    def _lhs(self, tau_s, bdf2):
        key = (tau_s, bdf2)
        if key not in self._lhs_cache:
            coef = 1.5 / tau_s if bdf2 else 1.0 / tau_s
            A = (coef * self.M + self.K).tocsr()
            if self.method == "direct":
                fact = spla.splu(A.tocsc())
                self._lhs_cache[key] = (A, fact)
            else:
                self._lhs_cache[key] = (A, None)
        return self._lhs_cache[key]

    # -- stepping -----------------------------------------------------------

    def ionic_currents(self, u_active):
        """Nodal I_ion/C_m in mV/s on the active DOF set."""
        out = np.zeros_like(u_active)
        for reg in self.regions:
            out[reg._apos] = reg.model.current(u_active[reg._apos], reg.state) * MS_PER_S
        return out

    def step_ionic(self, tau_s):
        for reg in self.regions:
            reg.state = reg.model.step(self.u[reg._apos], reg.state, tau_s * MS_PER_S)

    def calcium_field(self):
        """Calcium (uM) on the full P2 scalar DOF vector (zero elsewhere)."""
        out = np.zeros(self.space.n_dofs)
        for reg in self.regions:
            out[reg.scalar_dofs] = reg.model.calcium_uM(reg.state)
        return out

    def potential_field(self, rest_value=None):
        """Potential on the full P2 scalar DOF vector."""
        out = np.full(self.space.n_dofs, np.nan if rest_value is None else rest_value)
        out[self.active] = self.u
        return out

    def step(self, tau_s, i_app_active, t_s):
        """One IMEX substep: ionic update, then the diffusion solve."""
        self.step_ionic(tau_s)
        bdf2 = self._steps > 0
        if bdf2:
            u_star = 2.0 * self.u - self.u_prev
            hist = (2.0 * self.u - 0.5 * self.u_prev) / tau_s
        else:
            u_star = self.u
            hist = self.u / tau_s
        i_ion = np.zeros_like(self.u)
        for reg in self.regions:
            i_ion[reg._apos] = reg.model.current(u_star[reg._apos], reg.state) * MS_PER_S
        rhs_nodal = hist + (i_app_active - i_ion)
        rhs = self.M @ rhs_nodal
        A, fact = self._lhs(tau_s, bdf2)
        if fact is not None:
            u_new = fact.solve(rhs)
            res = np.linalg.norm(A @ u_new - rhs)
            if not np.isfinite(res):
                raise SolverError("monodomain direct solve produced non-finite values")
        else:
            u_new = solve_linear(A, rhs, self.solver)
        self.tracker.update(t_s, t_s + tau_s, self.u, u_new)
        self.u_prev = self.u
        self.u = u_new
        self._steps += 1
        return u_new

    def run(self, protocol, t0_s, n_steps, tau_s):
        """Advance n_steps substeps from t0 under the stimulation protocol."""
        coords = self.space.dof_coords_scalar[self.active]
        t = t0_s
        for _ in range(n_steps):
            i_app = apply_stimuli(protocol, t, coords) * MS_PER_S
            self.step(tau_s, i_app, t)
            t += tau_s
        return self.u
