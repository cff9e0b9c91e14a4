"""Scenario assembly: config -> mesh, fibers, solvers, coupling layout.

A scenario bundles everything the orchestrator needs.  The toy two-chamber
box maps its cavities onto the left heart (LA/LV) with the right heart
represented by elastance chambers inside the 0D loop; the four-chamber box
couples all four cavities; the ellipsoid chamber couples a single cavity
to a windkessel afterload for the stabilization benchmarks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cardioem import activation as act
from cardioem.circulation import CircParams, WindkesselBench, default_elastances, \
    default_initial_state
from cardioem.config import RunConfig
from cardioem.coupling import ChamberCoupling, ClosedLoopAdapter, WindkesselAdapter, \
    chamber_volume_3d
from cardioem.ep import ConductivityConfig, IonicRegion, MonodomainSolver, Stimulus
from cardioem.errors import ConfigError
from cardioem.fem import FeSpace, LinearSolverConfig
from cardioem.fibers import AngleRule, FiberRecipe, generate_fibers, solve_distance
from cardioem.geometry import GeometrySpec, build_idealized_geometry
from cardioem.ionic import init_single_cell, make_model
from cardioem.mechanics import BoundaryConditionSet, MaterialRegionParams, \
    MechanicsProblem, NewtonConfig


@dataclass
class ActivationRegion:
    name: str
    params: act.ActivationParams
    vertices: np.ndarray          # vertex indices carrying this region's states
    atrial: bool


@dataclass
class Scenario:
    kind: str
    mesh: object
    fibers: object
    ep: MonodomainSolver
    stimuli: list
    mech: MechanicsProblem
    chambers: list
    adapter: object
    circ_params: object
    c0: np.ndarray
    act_regions: list
    a_xb_vertex: np.ndarray
    atrial_vertex_mask: np.ndarray
    sl0_um: float
    newton: NewtonConfig
    p0_mmHg: dict
    fixed_chambers: list = field(default_factory=list)

    def myocardial_vertices(self):
        return np.unique(np.concatenate([r.vertices for r in self.act_regions]))


def _activation_params(cfg_region):
    return act.ActivationParams(
        sl0_um=cfg_region.sl0_um,
        k_d_uM=cfg_region.k_d_uM,
        alpha_kd_uM_per_um=cfg_region.alpha_kd_uM_per_um,
        gamma=cfg_region.gamma,
        k_off_per_s=cfg_region.k_off_per_s,
        k_basic_per_s=cfg_region.k_basic_per_s,
        mu0_fp_per_s=cfg_region.mu0_fp_per_s,
        mu1_fp_per_s=cfg_region.mu1_fp_per_s,
        mu0_gp_per_s=cfg_region.mu0_gp_per_s,
    )


def _conductivity(cfg: RunConfig):
    return ConductivityConfig(
        atrial=tuple(cfg.ep.sigma_a_m2_per_s),
        ventricular_myo=tuple(cfg.ep.sigma_v_myo_m2_per_s),
        ventricular_fast=tuple(cfg.ep.sigma_v_fast_m2_per_s),
        fast_layer_eps=cfg.ep.fast_layer_eps,
    )


def _region_vertices(mesh, regions):
    return np.unique(mesh.tets[mesh.region_cells(regions)])


def _stim_point_in_region(mesh, regions, prefer="low"):
    """A stimulation center inside the named tissue regions."""
    cells = mesh.region_cells(regions)
    centers = mesh.vertices[mesh.tets[cells]].mean(axis=1)
    order = np.lexsort((centers[:, 0], centers[:, 1], centers[:, 2]))
    pick = order[0] if prefer == "low" else order[-1]
    return centers[pick]


def _resolve_stimuli(cfg: RunConfig, mesh, kind):
    sites = {}
    if kind == "toy-two-chamber":
        sites["atrium"] = ("atrium-myo", "high")
        sites["lv-endo"] = ("ventricle-myo", "low")
    elif kind == "toy-four-chamber":
        sites["atrium"] = ("ra-myo", "high")
        sites["lv-endo"] = ("ventricles-myo", "low")
        sites["rv-endo"] = ("ventricles-myo", "low-right")
        sites["rv-endo-late"] = ("ventricles-myo", "low-right")
    elif kind == "ellipsoid-chamber":
        sites["atrium"] = None
        sites["lv-endo"] = ("myocardium", "low")
    out = []
    min_radius = 1.5 * cfg.geometry.resolution_m
    for s in cfg.stimuli:
        if s.center_m is not None:
            center = tuple(s.center_m)
        else:
            target = sites.get(s.site, None)
            if target is None:
                continue
            regions, prefer = target
            if prefer == "low-right":
                cells = mesh.region_cells(regions)
                centers = mesh.vertices[mesh.tets[cells]].mean(axis=1)
                xmax = centers[:, 0].max()
                right = centers[centers[:, 0] > 0.7 * xmax]
                center = tuple(right[np.argmin(right[:, 2])])
            else:
                center = tuple(_stim_point_in_region(mesh, regions, prefer))
        out.append(
            Stimulus(
                center_m=center,
                radius_m=max(s.radius_m, min_radius),
                start_s=s.start_ms * 1e-3,
                duration_s=s.duration_ms * 1e-3,
                amplitude_V_per_s=s.amplitude_V_per_s,
                period_s=s.period_s,
            )
        )
    return out


def _build_fibers_and_phi(cfg, mesh, regions_by_role):
    """Fiber triplets plus the per-cell transmural coordinate."""
    rule = AngleRule(
        cfg.fibers.alpha_endo_deg, cfg.fibers.alpha_epi_deg,
        cfg.fibers.beta_endo_deg, cfg.fibers.beta_epi_deg,
    )
    recipes = []
    phi_cell = np.ones(mesh.n_cells)
    space = FeSpace(mesh, order=1)
    for regions, endo_surfaces, psi in regions_by_role:
        phi_dirichlet = [(s, 0.0) for s in endo_surfaces] + [("epi", 1.0)]
        recipes.append(FiberRecipe(regions=regions, phi=phi_dirichlet, psi=psi, rule=rule))
        f = solve_distance(mesh, phi_dirichlet, regions)
        cells = mesh.region_cells(regions)
        phi_cell[cells] = f.cell_values(cells)
    fibers = generate_fibers(mesh, recipes)
    return fibers, phi_cell


def _ionic_regions(cfg, atrial_regions, ventricular_regions):
    out = []
    if atrial_regions:
        out.append(IonicRegion(
            "atria", atrial_regions,
            make_model(cfg.ionic_atria.model, region="atrial", **cfg.ionic_atria.params),
        ))
    if ventricular_regions:
        out.append(IonicRegion(
            "ventricles", ventricular_regions,
            make_model(cfg.ionic_ventricles.model, region="ventricular",
                       **cfg.ionic_ventricles.params),
        ))
    return out


def _init_ionic_states(cfg, ep_solver, t_hb_s):
    for reg in ep_solver.regions:
        icfg = cfg.ionic_atria if reg.model.region == "atrial" else cfg.ionic_ventricles
        if icfg.n_init_cycles > 0:
            w0 = init_single_cell(reg.model, icfg.n_init_cycles, t_hb_s * 1e3,
                                  dt_ms=icfg.init_dt_ms)
            reg.state.w[:] = w0.w[0]


def _newton_config(cfg):
    return NewtonConfig(rel_tol=cfg.mechanics.newton_rel_tol,
                        abs_tol=cfg.mechanics.newton_abs_tol)


def _material(cfg, kind, c_Pa=None, mu=None, kappa=None, active=False):
    m = cfg.mechanics
    if kind == "usyk":
        return MaterialRegionParams(
            "usyk", c_Pa=c_Pa * m.stiffness_scale, bulk_Pa=m.bulk_Pa * m.stiffness_scale,
            b_coeffs=dict(b_ff=m.b_ff, b_ss=m.b_ss, b_nn=m.b_nn,
                          b_fs=m.b_fs, b_fn=m.b_fn, b_sn=m.b_sn),
            active=active, rho_kg_per_m3=m.rho_kg_per_m3,
        )
    return MaterialRegionParams(
        "neo-hookean", mu_Pa=mu * m.stiffness_scale, kappa_Pa=kappa * m.stiffness_scale,
        active=active, rho_kg_per_m3=m.rho_kg_per_m3,
    )


def build_scenario(cfg: RunConfig) -> Scenario:
    kind = cfg.geometry.kind
    if kind == "toy-two-chamber":
        return _build_two_chamber(cfg)
    if kind == "toy-four-chamber":
        return _build_four_chamber(cfg)
    if kind == "ellipsoid-chamber":
        return _build_bench(cfg)
    raise ConfigError(f"no runnable scenario for geometry kind {kind!r}")


def _build_two_chamber(cfg: RunConfig) -> Scenario:
    mesh = build_idealized_geometry(
        GeometrySpec(kind="toy-two-chamber", dimensions=cfg.geometry.dimensions_m,
                     resolution=cfg.geometry.resolution_m)
    )
    psi = ("coordinate", (1.0, 0.31, 0.17))
    fibers, phi_cell = _build_fibers_and_phi(cfg, mesh, [
        (["atrium-myo"], ["endo-atrium"], psi),
        (["ventricle-myo"], ["endo-ventricle"], psi),
    ])
    stimuli = _resolve_stimuli(cfg, mesh, "toy-two-chamber")
    regs = _ionic_regions(cfg, ["atrium-myo"], ["ventricle-myo"])
    ep = MonodomainSolver(
        mesh, fibers, _conductivity(cfg), regs, phi_cell,
        solver=LinearSolverConfig("CG", "AMG-or-fallback", cfg.ep.solver_abs_tol, 5000),
        method=cfg.ep.solver_method,
    )
    _init_ionic_states(cfg, ep, cfg.simulation.t_hb_s)

    m = cfg.mechanics
    mats = {
        "atrium-myo": _material(cfg, "usyk", c_Pa=m.c_la_Pa, active=True),
        "ventricle-myo": _material(cfg, "usyk", c_Pa=m.c_v_Pa, active=True),
        "valve": _material(cfg, "neo-hookean", mu=m.mu_valve_caps_Pa,
                           kappa=m.kappa_valve_caps_Pa),
        "caps": _material(cfg, "neo-hookean", mu=m.mu_valve_caps_Pa,
                          kappa=m.kappa_valve_caps_Pa),
    }
    bcs = BoundaryConditionSet(
        robin={"epi": (m.k_perp_pf_Pa_per_m, m.c_perp_pf_Pa_s_per_m)},
        pressure={"endo-atrium": "la", "endo-ventricle": "lv"},
        dirichlet=["ring"],
    )
    mech = MechanicsProblem(mesh, mats, fibers, bcs,
                            shares=(m.share_f, m.share_s, m.share_n),
                            stab_active_stress=cfg.simulation.toggles.stab_active_stress)
    chambers = [
        ChamberCoupling("LA", "la", ["endo-atrium"]),
        ChamberCoupling("LV", "lv", ["endo-ventricle"]),
    ]
    elast = default_elastances(cfg.simulation.t_hb_s)
    adapter = ClosedLoopAdapter(cfg.circulation.params(),
                                elastances={k: elast[k] for k in ("RA", "RV")})
    c0 = (np.asarray(cfg.circulation.initial_state, dtype=float)
          if cfg.circulation.initial_state else default_initial_state())
    from cardioem.circulation import IDX

    c0[IDX["V_LA"]] = chamber_volume_3d(mesh, ["endo-atrium"])
    c0[IDX["V_LV"]] = chamber_volume_3d(mesh, ["endo-ventricle"])

    atr_verts = _region_vertices(mesh, ["atrium-myo"])
    ven_verts = _region_vertices(mesh, ["ventricle-myo"])
    a_xb = np.zeros(mesh.n_vertices)
    scale = cfg.contractility.scale
    a_xb[atr_verts] = cfg.contractility.a_xb_la_Pa * scale
    a_xb[ven_verts] = cfg.contractility.a_xb_lv_Pa * scale
    atrial_mask = np.zeros(mesh.n_vertices, dtype=bool)
    atrial_mask[atr_verts] = True
    act_regions = [
        ActivationRegion("atria", _activation_params(cfg.activation_atria),
                         atr_verts, atrial=True),
        ActivationRegion("ventricles", _activation_params(cfg.activation_ventricles),
                         ven_verts, atrial=False),
    ]
    p0 = {"LA": 6.0, "LV": 8.0}
    return Scenario(
        kind="toy-two-chamber", mesh=mesh, fibers=fibers, ep=ep, stimuli=stimuli,
        mech=mech, chambers=chambers, adapter=adapter, circ_params=cfg.circulation.params(),
        c0=c0, act_regions=act_regions, a_xb_vertex=a_xb, atrial_vertex_mask=atrial_mask,
        sl0_um=cfg.activation_ventricles.sl0_um, newton=_newton_config(cfg), p0_mmHg=p0,
        fixed_chambers=["RA", "RV"],
    )


def _build_four_chamber(cfg: RunConfig) -> Scenario:
    mesh = build_idealized_geometry(
        GeometrySpec(kind="toy-four-chamber", dimensions=cfg.geometry.dimensions_m,
                     resolution=cfg.geometry.resolution_m)
    )
    psi = ("coordinate", (1.0, 0.31, 0.17))
    fibers, phi_cell = _build_fibers_and_phi(cfg, mesh, [
        (["la-myo"], ["endo-la"], psi),
        (["ra-myo"], ["endo-ra"], psi),
        (["ventricles-myo"], ["endo-lv", "endo-rv"], psi),
    ])
    stimuli = _resolve_stimuli(cfg, mesh, "toy-four-chamber")
    regs = _ionic_regions(cfg, ["la-myo", "ra-myo"], ["ventricles-myo"])
    ep = MonodomainSolver(
        mesh, fibers, _conductivity(cfg), regs, phi_cell,
        solver=LinearSolverConfig("CG", "AMG-or-fallback", cfg.ep.solver_abs_tol, 5000),
        method=cfg.ep.solver_method,
    )
    _init_ionic_states(cfg, ep, cfg.simulation.t_hb_s)

    m = cfg.mechanics
    mats = {
        "la-myo": _material(cfg, "usyk", c_Pa=m.c_la_Pa, active=True),
        "ra-myo": _material(cfg, "usyk", c_Pa=m.c_ra_Pa, active=True),
        "ventricles-myo": _material(cfg, "usyk", c_Pa=m.c_v_Pa, active=True),
        "valve": _material(cfg, "neo-hookean", mu=m.mu_valve_caps_Pa,
                           kappa=m.kappa_valve_caps_Pa),
        "caps": _material(cfg, "neo-hookean", mu=m.mu_valve_caps_Pa,
                          kappa=m.kappa_valve_caps_Pa),
    }
    bcs = BoundaryConditionSet(
        robin={"epi": (m.k_perp_pf_Pa_per_m, m.c_perp_pf_Pa_s_per_m)},
        pressure={"endo-la": "la", "endo-ra": "ra", "endo-lv": "lv", "endo-rv": "rv"},
        dirichlet=["ring"],
    )
    mech = MechanicsProblem(mesh, mats, fibers, bcs,
                            shares=(m.share_f, m.share_s, m.share_n),
                            stab_active_stress=cfg.simulation.toggles.stab_active_stress)
    chambers = [
        ChamberCoupling("RA", "ra", ["endo-ra"]),
        ChamberCoupling("LA", "la", ["endo-la"]),
        ChamberCoupling("RV", "rv", ["endo-rv"]),
        ChamberCoupling("LV", "lv", ["endo-lv"]),
    ]
    adapter = ClosedLoopAdapter(cfg.circulation.params())
    c0 = (np.asarray(cfg.circulation.initial_state, dtype=float)
          if cfg.circulation.initial_state else default_initial_state())
    from cardioem.circulation import IDX

    for ch in chambers:
        c0[IDX[f"V_{ch.name}"]] = chamber_volume_3d(mesh, ch.surfaces)

    la = _region_vertices(mesh, ["la-myo"])
    ra = _region_vertices(mesh, ["ra-myo"])
    vv = _region_vertices(mesh, ["ventricles-myo"])
    scale = cfg.contractility.scale
    a_xb = np.zeros(mesh.n_vertices)
    a_xb[la] = cfg.contractility.a_xb_la_Pa * scale
    a_xb[ra] = cfg.contractility.a_xb_ra_Pa * scale
    # interventricular coordinate: 1 at the LV endocardium, 0 at the RV's
    xi_field = solve_distance(mesh, [("endo-lv", 1.0), ("endo-rv", 0.0)],
                              ["ventricles-myo"])
    xi = np.clip(xi_field.values[vv], 0.0, 1.0)
    c_lrv = cfg.contractility.a_xb_rv_Pa / cfg.contractility.a_xb_lv_Pa
    a_xb[vv] = act.build_contractility_field(xi, cfg.contractility.a_xb_lv_Pa, c_lrv) * scale

    atrial_mask = np.zeros(mesh.n_vertices, dtype=bool)
    atrial_mask[np.concatenate([la, ra])] = True
    ap_a = _activation_params(cfg.activation_atria)
    act_regions = [
        ActivationRegion("la", ap_a, la, atrial=True),
        ActivationRegion("ra", ap_a, ra, atrial=True),
        ActivationRegion("ventricles", _activation_params(cfg.activation_ventricles),
                         vv, atrial=False),
    ]
    p0 = {"RA": 4.0, "LA": 6.0, "RV": 6.0, "LV": 8.0}
    return Scenario(
        kind="toy-four-chamber", mesh=mesh, fibers=fibers, ep=ep, stimuli=stimuli,
        mech=mech, chambers=chambers, adapter=adapter, circ_params=cfg.circulation.params(),
        c0=c0, act_regions=act_regions, a_xb_vertex=a_xb, atrial_vertex_mask=atrial_mask,
        sl0_um=cfg.activation_ventricles.sl0_um, newton=_newton_config(cfg), p0_mmHg=p0,
    )


def _build_bench(cfg: RunConfig, bench: WindkesselBench = None) -> Scenario:
    mesh = build_idealized_geometry(
        GeometrySpec(kind="ellipsoid-chamber", dimensions=cfg.geometry.dimensions_m,
                     resolution=cfg.geometry.resolution_m)
    )
    fibers, phi_cell = _build_fibers_and_phi(cfg, mesh, [
        (["myocardium"], ["endo"], [("apex", 0.0), ("base-ring", 1.0)]),
    ])
    stimuli = _resolve_stimuli(cfg, mesh, "ellipsoid-chamber")
    regs = _ionic_regions(cfg, [], ["myocardium"])
    ep = MonodomainSolver(
        mesh, fibers, _conductivity(cfg), regs, phi_cell,
        solver=LinearSolverConfig("CG", "AMG-or-fallback", cfg.ep.solver_abs_tol, 5000),
        method=cfg.ep.solver_method,
    )
    _init_ionic_states(cfg, ep, cfg.simulation.t_hb_s)

    m = cfg.mechanics
    mats = {
        "myocardium": _material(cfg, "usyk", c_Pa=m.c_v_Pa, active=True),
        "caps": _material(cfg, "neo-hookean", mu=m.mu_valve_caps_Pa,
                          kappa=m.kappa_valve_caps_Pa),
    }
    bcs = BoundaryConditionSet(
        robin={"epi": (m.k_perp_pf_Pa_per_m, m.c_perp_pf_Pa_s_per_m),
               "apex": (m.k_perp_pf_Pa_per_m, m.c_perp_pf_Pa_s_per_m),
               "cap-outer": (m.k_perp_eat_Pa_per_m, m.c_perp_eat_Pa_s_per_m)},
        pressure={"endo": "lv", "endo-cap": "lv"},
        dirichlet=["base-ring"],
    )
    mech = MechanicsProblem(mesh, mats, fibers, bcs,
                            shares=(m.share_f, m.share_s, m.share_n),
                            stab_active_stress=cfg.simulation.toggles.stab_active_stress)
    chambers = [ChamberCoupling("LV", "lv", ["endo", "endo-cap"])]
    bench = bench or WindkesselBench(
        paper_literal_branches=cfg.circulation.paper_literal_branches
    )
    adapter = WindkesselAdapter(bench)
    v0 = chamber_volume_3d(mesh, ["endo", "endo-cap"])
    c0 = np.array([v0, bench.p_distal_mmHg + 10.0])

    vv = _region_vertices(mesh, ["myocardium"])
    a_xb = np.zeros(mesh.n_vertices)
    a_xb[vv] = cfg.contractility.a_xb_lv_Pa * cfg.contractility.scale
    act_regions = [
        ActivationRegion("ventricles", _activation_params(cfg.activation_ventricles),
                         vv, atrial=False),
    ]
    return Scenario(
        kind="ellipsoid-chamber", mesh=mesh, fibers=fibers, ep=ep, stimuli=stimuli,
        mech=mech, chambers=chambers, adapter=adapter, circ_params=None, c0=c0,
        act_regions=act_regions, a_xb_vertex=a_xb,
        atrial_vertex_mask=np.zeros(mesh.n_vertices, dtype=bool),
        sl0_um=cfg.activation_ventricles.sl0_um, newton=_newton_config(cfg),
        p0_mmHg={"LV": 12.0},
    )
