"""3D-0D coupling: chamber volumes, targets, Newton-Schur solve.

Chamber volumes are exact polyhedral volumes of the deformed closed
endocardial surfaces (divergence theorem on facet cones), with analytic
gradients with respect to the nodal displacements.  Each coupled step
solves the saddle-point system (momentum residual + one volume constraint
per 3D chamber) by Newton with a Schur-complement reduction: per
iteration one factorization of the mechanics Jacobian and exactly
``n_chambers + 1`` solves with it (the residual plus one pressure-load
direction per chamber), then a dense solve for the pressure increments.

Units at this boundary: chamber pressures in mmHg (converted to Pa for
the mechanics loads), volumes in mL, time in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from cardioem.circulation import (
    CircParams,
    chamber_net_inflow,
    chamber_net_inflow_jacobian,
    chamber_volumes_0d,
)
from cardioem.errors import SolverError, TopologyError
from cardioem.mechanics import MechanicsProblem, MechanicsState, NewtonConfig

MMHG_TO_PA = 133.322
M3_TO_ML = 1e6


def pressure_units(p_mmHg):
    """mmHg -> Pa."""
    return MMHG_TO_PA * p_mmHg


def _surface_triangles(mesh, surfaces):
    idx = np.concatenate([mesh.surface_facets(s) for s in np.atleast_1d(surfaces)])
    tris = mesh.facets[idx]
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts != 2):
        raise TopologyError(
            f"chamber surface {surfaces!r} is not closed "
            f"({int(np.sum(counts != 2))} boundary/non-manifold edges)"
        )
    return tris


def chamber_volume_3d(mesh, surfaces, d=None):
    """Cavity volume (mL) enclosed by a closed labeled surface set.

    Facet normals point out of the tissue, i.e. into the cavity, so the
    cone sum enters with a negative sign.  Exact for P1 displacements.
    """
    tris = _surface_triangles(mesh, surfaces)
    x = mesh.vertices if d is None else mesh.vertices + d.reshape(-1, 3)
    p = x[tris]
    vol = -np.einsum(
        "fi,fi->f", np.cross(p[:, 1], p[:, 2]), p[:, 0]
    ).sum() / 6.0
    return float(vol) * M3_TO_ML


def chamber_volume_gradient(mesh, surfaces, d=None, n_dofs=None):
    """dV/dd as a dense vector over the P1 vector DOFs (mL per m)."""
    tris = _surface_triangles(mesh, surfaces)
    x = mesh.vertices if d is None else mesh.vertices + d.reshape(-1, 3)
    p = x[tris]
    n = n_dofs if n_dofs is not None else 3 * len(x)
    g = np.zeros(n)
    contrib = np.stack(
        [
            np.cross(p[:, 1], p[:, 2]),
            np.cross(p[:, 2], p[:, 0]),
            np.cross(p[:, 0], p[:, 1]),
        ],
        axis=1,
    ) / -6.0
    dofs = (tris[:, :, None] * 3 + np.arange(3)).reshape(-1)
    np.add.at(g, dofs, contrib.reshape(-1))
    return g * M3_TO_ML


@dataclass
class ChamberCoupling:
    """One 3D chamber: its closed surface set and mechanics load channel."""

    name: str
    channel: str
    surfaces: list


class ClosedLoopAdapter:
    """Volume targets from the 12-state closed loop.

    Chambers not simulated in 3D get elastance-derived pressures that are
    held fixed during the coupled solve (hybrid mode).
    """

    def __init__(self, params: CircParams, elastances=None):
        self.params = params
        self.elastances = elastances or {}

    def volumes_0d(self, c):
        return chamber_volumes_0d(c)

    def fixed_pressures(self, c, t_next):
        vols = chamber_volumes_0d(c)
        return {
            name: el.pressure(t_next, vols[name]) for name, el in self.elastances.items()
        }

    def net_inflow(self, c, p_full):
        return chamber_net_inflow(self.params, c, p_full)

    def net_inflow_jacobian(self, c, p_full):
        return chamber_net_inflow_jacobian(self.params, c, p_full)


class WindkesselAdapter:
    """Single-chamber benchmark targets (constant preload + RC afterload)."""

    def __init__(self, bench):
        self.bench = bench

    def volumes_0d(self, c):
        return {"LV": float(c[0])}

    def fixed_pressures(self, c, t_next):
        return {}

    def net_inflow(self, c, p_full):
        net, _, _ = self.bench.net_inflow(c, p_full["LV"])
        return {"LV": net}

    def net_inflow_jacobian(self, c, p_full):
        return {"LV": {"LV": self.bench.net_inflow_dp(c, p_full["LV"])}}


def volume_targets(adapter, c_n, p_new, dt, mode, chambers):
    """Per-chamber target volumes (mL).

    ``unstabilized``: the lagged 0D volumes.  ``stabilized``: extrapolated
    by the valve fluxes at the implicit chamber pressures, which is exactly
    what the explicit circulation update will produce.
    """
    if mode not in ("stabilized", "unstabilized"):
        raise ValueError(f"unknown volume constraint mode {mode!r}")
    v0 = adapter.volumes_0d(c_n)
    names = [ch.name for ch in chambers]
    if mode == "unstabilized" or dt == 0.0:
        return {k: v0[k] for k in names}
    net = adapter.net_inflow(c_n, p_new)
    return {k: v0[k] + dt * net[k] for k in names}


def solve_coupled_step(problem: MechanicsProblem, state: MechanicsState, dt,
                       T_a_cell, K_stab_cell, chambers, adapter, c_n,
                       p_guess, mode="stabilized", fixed_pressures_mmHg=None,
                       config: NewtonConfig = None, counter=None,
                       vol_tol_mL=1e-8, quasi_static=False):
    """One mechanics step under per-chamber volume constraints.

    Returns (MechanicsState, chamber pressures mmHg dict, info dict).
    """
    cfg = config or NewtonConfig()
    mesh = problem.mesh
    names = [ch.name for ch in chambers]
    p = {k: float(p_guess[k]) for k in names}
    fixed = dict(fixed_pressures_mmHg or {})

    d_prev = state.d
    d_prev2 = state.d_prev if state.d_prev is not None else state.d
    F_prev = problem.deformation_gradient(d_prev)
    d = d_prev.copy()

    def pressures_pa(p_ch):
        out = {ch.channel: MMHG_TO_PA * p_ch[ch.name] for ch in chambers}
        for channel, val in fixed.items():
            if channel not in out:
                out[channel] = MMHG_TO_PA * val
        return out

    def full_pressures(p_ch):
        full = dict(fixed)
        full.update(p_ch)
        return full

    def res_args(p_ch):
        args = dict(
            pressures_Pa=pressures_pa(p_ch), T_a_cell=T_a_cell,
            K_stab_cell=K_stab_cell, F_prev=F_prev,
        )
        if not quasi_static:
            args.update(d_prev=d_prev, d_prev2=d_prev2, dt=dt)
        return args

    def merit(dv, p_ch):
        try:
            r = problem.residual(dv, **res_args(p_ch))
        except Exception:
            return np.inf, None, None
        rv = np.array([
            chamber_volume_3d(mesh, ch.surfaces, dv)
            - volume_targets(adapter, c_n, full_pressures(p_ch), dt, mode, chambers)[ch.name]
            for ch in chambers
        ])
        rn = np.linalg.norm(r)
        return rn + np.abs(rv).max() * 1e3, r, rv

    phi, r, rv = merit(d, p)
    if r is None:
        raise SolverError("coupled step started from an inverted configuration")
    r_max_seen = max(np.linalg.norm(r), 1.0)
    info = {"iterations": 0, "solves": 0}
    growths = 0

    for it in range(cfg.max_iters):
        # relative tolerance against the largest residual encountered: warm
        # starts make the initial residual an unreliable scale
        tol_mech = max(cfg.abs_tol, cfg.rel_tol * r_max_seen)
        if np.linalg.norm(r) <= tol_mech and np.abs(rv).max() <= vol_tol_mL:
            break
        F = problem.deformation_gradient(d)
        jac_args = {k: v for k, v in res_args(p).items() if k != "d_prev2"}
        K = problem.jacobian(d, **jac_args)
        lu = spla.splu(K.tocsc())
        if counter is not None:
            counter["factorizations"] = counter.get("factorizations", 0) + 1

        delta0 = lu.solve(r)
        solves = 1
        deltas = []
        for ch in chambers:
            b = MMHG_TO_PA * problem.pressure_direction(ch.channel, F)
            b[problem.fixed_dofs] = 0.0
            deltas.append(lu.solve(b))
            solves += 1
        if counter is not None:
            counter["solves"] = counter.get("solves", 0) + solves
        info["solves"] += solves

        grads = [
            chamber_volume_gradient(mesh, ch.surfaces, d, problem.space.n_dofs)
            for ch in chambers
        ]
        nch = len(chambers)
        A = np.zeros((nch, nch))
        rhs = np.zeros(nch)
        if mode == "stabilized" and dt > 0.0:
            Jq = adapter.net_inflow_jacobian(c_n, full_pressures(p))
        else:
            Jq = {k: {j: 0.0 for j in names} for k in names}
        for i, chi in enumerate(chambers):
            for j, chj in enumerate(chambers):
                A[i, j] = -dt * Jq[chi.name][chj.name] - grads[i] @ deltas[j]
            rhs[i] = -rv[i] + grads[i] @ delta0
        try:
            dp = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            raise SolverError(
                f"singular pressure Schur block (cond ~ {np.linalg.cond(A):.2e})"
            )

        dd = -delta0 - sum(dp[j] * deltas[j] for j in range(nch))
        alpha = 1.0
        accepted = False
        for k_bt in range(cfg.max_backtracks):
            d_try = d + alpha * dd
            p_try = {k: p[k] + alpha * dp[i] for i, k in enumerate(names)}
            phi_try, r_try, rv_try = merit(d_try, p_try)
            improves = phi_try < phi or phi_try <= tol_mech + vol_tol_mL * 1e3
            # the full saddle-point step may transiently raise the momentum
            # residual while fixing the constraints: allow a few bounded
            # growth steps before insisting on monotone decrease
            tolerated = (
                k_bt == 0 and growths < 3 and np.isfinite(phi_try)
                and phi_try <= 50.0 * phi
            )
            if improves or tolerated:
                growths = 0 if improves else growths + 1
                d, p, phi, r, rv = d_try, p_try, phi_try, r_try, rv_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise SolverError(
                f"coupled Newton line search failed at iteration {it}",
                residuals=[float(phi)],
            )
        r_max_seen = max(r_max_seen, np.linalg.norm(r))
        info["iterations"] += 1
    else:
        raise SolverError(
            f"coupled Newton did not converge: |r|={np.linalg.norm(r):.3e}, "
            f"max|dV|={np.abs(rv).max():.3e} mL"
        )

    info["volume_residual_mL"] = float(np.abs(rv).max())
    info["mech_residual"] = float(np.linalg.norm(r))
    new_state = MechanicsState(d=d, d_prev=d_prev, d_prev2=d_prev2)
    return new_state, p, info
