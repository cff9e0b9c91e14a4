"""Sarcomere-level active force generation.

Per P1 node the state holds a tropomyosin permissivity ``p`` driven by a
calcium/sarcomere-length-dependent Hill-type attachment rate, and a pair
of crossbridge moments (m0, m1).  The first moment feeds the active
tension, the zeroth the crossbridge stiffness used by the active-stress
stabilization.  The fiber-stretch feedback enters through the
length-dependent dissociation constant, the fiber-stretch-rate feedback
through a distortion source on the first moment: shortening fibers lose
tension (force-velocity), so the staggered scheme sees a one-step-lagged
positive feedback that the stabilization term compensates.

Units: calcium in uM, sarcomere length in um, rates in 1/s, time in s.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from cardioem.errors import ConfigError, SolverError

K_ON_CAP = 1e12


@dataclass
class ActivationParams:
    sl0_um: float = 1.9
    k_d_uM: float = 0.36              # calcium-troponin dissociation constant
    alpha_kd_uM_per_um: float = -0.2083
    gamma: float = 30.0               # cooperativity exponent
    k_off_per_s: float = 8.0
    k_basic_per_s: float = 4.0
    mu0_fp_per_s: float = 32.225      # zeroth attachment-rate moment
    mu1_fp_per_s: float = 0.768       # first attachment-rate moment
    mu0_gp_per_s: float = 100.0       # detachment rate (not tabulated)

    def __post_init__(self):
        for name in ("k_off_per_s", "k_basic_per_s", "mu0_fp_per_s",
                     "mu1_fp_per_s", "mu0_gp_per_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


VENTRICULAR_ACTIVATION = ActivationParams()
ATRIAL_ACTIVATION = ActivationParams(
    k_d_uM=0.865, alpha_kd_uM_per_um=-1.25, gamma=20.0,
    k_off_per_s=180.0, k_basic_per_s=20.0,
)

A_XB_LV_PA = 15.0e8
A_XB_RV_PA = 10.5e8
A_XB_LA_PA = 30.0e7
A_XB_RA_PA = 30.0e7


@dataclass
class ActivationState:
    """Permissivity and crossbridge moments per P1 node."""

    p: np.ndarray
    m0: np.ndarray
    m1: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self):
        return ActivationState(self.p.copy(), self.m0.copy(), self.m1.copy())

    def check_ranges(self, slack=1e-9):
        if np.any(self.p < -slack) or np.any(self.p > 1.0 + slack):
            raise SolverError("permissivity left [0, 1]")
        if np.any(self.m0 < -slack):
            raise SolverError("zeroth crossbridge moment went negative")


@dataclass
class SarcomereInputs:
    ca_uM: np.ndarray
    sl_um: np.ndarray
    dsl_dt_um_per_s: np.ndarray


def compute_sl(F_cells, f0, sl0_um):
    """Sarcomere length per cell: sl0 * |F f0|."""
    Fv = np.einsum("cij,cj->ci", np.asarray(F_cells, dtype=float), f0)
    return sl0_um * np.linalg.norm(Fv, axis=1)


def cells_to_vertices(mesh, cell_values, cells=None, default=0.0):
    """Volume-weighted average of per-cell values onto mesh vertices."""
    vols = mesh.cell_volumes()
    if cells is None:
        cells = np.arange(mesh.n_cells)
    num = np.zeros(mesh.n_vertices)
    den = np.zeros(mesh.n_vertices)
    tets = mesh.tets[cells]
    w = vols[cells]
    v = np.asarray(cell_values)[cells] if np.asarray(cell_values).shape[0] == mesh.n_cells \
        else np.asarray(cell_values)
    for corner in range(4):
        np.add.at(num, tets[:, corner], w * v)
        np.add.at(den, tets[:, corner], w)
    out = np.full(mesh.n_vertices, default, dtype=float)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def _k_on(params, ca_uM, sl_um):
    kd = params.k_d_uM + params.alpha_kd_uM_per_um * (sl_um - params.sl0_um)
    kd = np.maximum(kd, 0.05 * params.k_d_uM)
    ratio = np.maximum(np.asarray(ca_uM, dtype=float), 0.0) / kd
    with np.errstate(over="ignore"):
        k = params.k_basic_per_s * ratio**params.gamma
    return np.minimum(k, K_ON_CAP)


def step_activation(state: ActivationState, inputs: SarcomereInputs, dt_s,
                    params: ActivationParams) -> ActivationState:
    """Advance the node-wise ODEs by one mechanics step.

    The permissivity and both moments are linear for frozen inputs, so
    each is updated by its exact exponential relaxation.
    """
    if dt_s <= 0:
        raise ConfigError("activation step requires dt > 0")
    k_on = _k_on(params, inputs.ca_uM, inputs.sl_um)
    k_tot = k_on + params.k_off_per_s
    p_inf = k_on / k_tot
    p = p_inf + (state.p - p_inf) * np.exp(-dt_s * k_tot)

    g = params.mu0_gp_per_s
    m0_inf = params.mu0_fp_per_s * p / g
    m0 = m0_inf + (state.m0 - m0_inf) * np.exp(-dt_s * g)

    dlam_dt = np.asarray(inputs.dsl_dt_um_per_s, dtype=float) / params.sl0_um
    m1_inf = (params.mu1_fp_per_s * p + dlam_dt * m0) / g
    m1 = m1_inf + (state.m1 - m1_inf) * np.exp(-dt_s * g)

    out = ActivationState(p, m0, m1)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(m1))):
        raise SolverError("activation state became non-finite")
    return out


def steady_state(params: ActivationParams, ca_uM, sl_um, dsl_dt_um_per_s=0.0):
    """Closed-form equilibrium for constant inputs (initialization)."""
    ca = np.atleast_1d(np.asarray(ca_uM, dtype=float))
    sl = np.broadcast_to(np.asarray(sl_um, dtype=float), ca.shape)
    k_on = _k_on(params, ca, sl)
    p = k_on / (k_on + params.k_off_per_s)
    m0 = params.mu0_fp_per_s * p / params.mu0_gp_per_s
    dlam = np.broadcast_to(np.asarray(dsl_dt_um_per_s) / params.sl0_um, ca.shape)
    m1 = (params.mu1_fp_per_s * p + dlam * m0) / params.mu0_gp_per_s
    return ActivationState(p, m0, m1)


def active_tension(state: ActivationState, sl_um, a_xb_Pa, params: ActivationParams):
    """T_a = a_xb * G(z, SL) with G = m1 * SL/SL0, clamped non-negative."""
    g = np.maximum(state.m1, 0.0) * (np.asarray(sl_um, dtype=float) / params.sl0_um)
    return np.asarray(a_xb_Pa) * g


def crossbridge_stiffness(state: ActivationState, a_xb_Pa):
    """Total stiffness of attached crossbridges: a_xb * m0."""
    return np.asarray(a_xb_Pa) * np.maximum(state.m0, 0.0)


def build_contractility_field(xi_hat, a_lv_Pa, c_lrv):
    """Ventricular contractility: a_lv * (xi + c_lrv (1 - xi)).

    xi=1 in the left ventricle, 0 in the right, affine across the septum.
    """
    xi = np.asarray(xi_hat, dtype=float)
    if np.any(xi < -1e-12) or np.any(xi > 1.0 + 1e-12):
        raise ConfigError("interventricular coordinate must lie in [0, 1]")
    return a_lv_Pa * (xi + c_lrv * (1.0 - xi))
