"""Shared scenario builders and the dense monolithic coupling oracle."""

import numpy as np

from cardioem.coupling import (
    ChamberCoupling,
    MMHG_TO_PA,
    chamber_volume_3d,
    chamber_volume_gradient,
    volume_targets,
)
from cardioem.geometry import GeometrySpec, build_idealized_geometry
from cardioem.mechanics import (
    BoundaryConditionSet,
    MaterialRegionParams,
    MechanicsProblem,
    MechanicsState,
)
from tests.test_ep import uniform_fibers


def two_chamber_mech(resolution=1.6e-2, stiffness_scale=1.0, stab=True):
    mesh = build_idealized_geometry(GeometrySpec("toy-two-chamber", resolution=resolution))
    fib = uniform_fibers(mesh)
    s = stiffness_scale
    mats = {
        "atrium-myo": MaterialRegionParams("usyk", c_Pa=1.76e3 * s, active=True),
        "ventricle-myo": MaterialRegionParams("usyk", c_Pa=0.88e3 * s, active=True),
        "valve": MaterialRegionParams("neo-hookean", mu_Pa=10e5 * s, kappa_Pa=50e5 * s),
        "caps": MaterialRegionParams("neo-hookean", mu_Pa=10e5 * s, kappa_Pa=50e5 * s),
    }
    bcs = BoundaryConditionSet(
        robin={"epi": (2e5, 2e3)},
        pressure={"endo-atrium": "la", "endo-ventricle": "lv"},
        dirichlet=["ring"],
    )
    prob = MechanicsProblem(mesh, mats, fib, bcs, stab_active_stress=stab)
    chambers = [
        ChamberCoupling("LA", "la", ["endo-atrium"]),
        ChamberCoupling("LV", "lv", ["endo-ventricle"]),
    ]
    return mesh, prob, chambers


def four_chamber_mech(resolution=2.4e-2):
    mesh = build_idealized_geometry(GeometrySpec("toy-four-chamber", resolution=resolution))
    fib = uniform_fibers(mesh)
    mats = {
        "la-myo": MaterialRegionParams("usyk", c_Pa=1.76e3, active=True),
        "ra-myo": MaterialRegionParams("usyk", c_Pa=1.47e3, active=True),
        "ventricles-myo": MaterialRegionParams("usyk", c_Pa=0.88e3, active=True),
        "valve": MaterialRegionParams("neo-hookean", mu_Pa=10e5, kappa_Pa=50e5),
        "caps": MaterialRegionParams("neo-hookean", mu_Pa=10e5, kappa_Pa=50e5),
    }
    bcs = BoundaryConditionSet(
        robin={"epi": (2e5, 2e3)},
        pressure={"endo-la": "la", "endo-ra": "ra", "endo-lv": "lv", "endo-rv": "rv"},
        dirichlet=["ring"],
    )
    prob = MechanicsProblem(mesh, mats, fib, bcs)
    chambers = [
        ChamberCoupling("RA", "ra", ["endo-ra"]),
        ChamberCoupling("LA", "la", ["endo-la"]),
        ChamberCoupling("RV", "rv", ["endo-rv"]),
        ChamberCoupling("LV", "lv", ["endo-lv"]),
    ]
    return mesh, prob, chambers


def solve_coupled_monolithic(problem, state, dt, T_a_cell, K_stab_cell, chambers,
                             adapter, c_n, p_guess, mode="stabilized",
                             fixed_pressures_mmHg=None, tol=1e-11, max_iters=40):
    """Dense monolithic Newton on the concatenated (d, p) unknowns.

    Independent of the Schur path: assembles the full (n+nch) system and
    factorizes it densely.  Only usable on tiny meshes.
    """
    mesh = problem.mesh
    names = [ch.name for ch in chambers]
    fixed = dict(fixed_pressures_mmHg or {})
    n = problem.space.n_dofs
    nch = len(chambers)
    d = state.d.copy()
    p = np.array([float(p_guess[k]) for k in names])
    d_prev = state.d
    d_prev2 = state.d_prev if state.d_prev is not None else state.d
    F_prev = problem.deformation_gradient(d_prev)

    def pressures_pa(pv):
        out = {ch.channel: MMHG_TO_PA * pv[i] for i, ch in enumerate(chambers)}
        for channel, val in fixed.items():
            out.setdefault(channel, MMHG_TO_PA * val)
        return out

    def full_p(pv):
        full = dict(fixed)
        full.update({k: pv[i] for i, k in enumerate(names)})
        return full

    def residual(dv, pv):
        args = dict(
            pressures_Pa=pressures_pa(pv), T_a_cell=T_a_cell, K_stab_cell=K_stab_cell,
            F_prev=F_prev, d_prev=d_prev, d_prev2=d_prev2, dt=dt,
        )
        r_d = problem.residual(dv, **args)
        targets = volume_targets(adapter, c_n, full_p(pv), dt, mode, chambers)
        r_v = np.array([
            chamber_volume_3d(mesh, ch.surfaces, dv) - targets[ch.name]
            for ch in chambers
        ])
        return np.concatenate([r_d, r_v])

    for _ in range(max_iters):
        r = residual(d, p)
        if np.linalg.norm(r[:n]) <= tol * 1e6 and np.abs(r[n:]).max() <= tol:
            break
        F = problem.deformation_gradient(d)
        args = dict(
            pressures_Pa=pressures_pa(p), T_a_cell=T_a_cell, K_stab_cell=K_stab_cell,
            F_prev=F_prev, d_prev=d_prev, dt=dt,
        )
        K = problem.jacobian(d, **args).toarray()
        B = np.zeros((n, nch))
        for j, ch in enumerate(chambers):
            b = MMHG_TO_PA * problem.pressure_direction(ch.channel, F)
            b[problem.fixed_dofs] = 0.0
            B[:, j] = b
        A = np.zeros((nch, n))
        for i, ch in enumerate(chambers):
            A[i] = chamber_volume_gradient(mesh, ch.surfaces, d, n)
        if mode == "stabilized" and dt > 0:
            Jq = adapter.net_inflow_jacobian(c_n, full_p(p))
        else:
            Jq = {k: {j: 0.0 for j in names} for k in names}
        M = np.array([[-dt * Jq[ki][kj] for kj in names] for ki in names])
        J_full = np.block([[K, B], [A, M]])
        dz = np.linalg.solve(J_full, -r)
        d = d + dz[:n]
        p = p + dz[n:]
    else:
        raise RuntimeError("monolithic oracle did not converge")
    return MechanicsState(d=d, d_prev=d_prev, d_prev2=d_prev2), dict(zip(names, p))
