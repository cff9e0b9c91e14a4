"""Segregated-intergrid-staggered orchestration of one heartbeat loop.

Per coarse step: the ionic and potential fields advance through N_sub
fine substeps; the calcium is restricted onto the P1 grid; the sarcomere
states advance with the lagged stretch and stretch rate; mechanics is
solved under the volume constraints together with the chamber pressures;
the 0D circulation finally advances explicitly with the new pressures.
Opposite-direction feedbacks (deformation into the diffusion tensor,
stretch into the sarcomere) always use the previous step's solution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cardioem import activation as act
from cardioem.circulation import (
    CHAMBERS,
    IDX,
    Trace,
    step_circulation,
    valve_fluxes,
)
from cardioem.config import RunConfig, Toggles
from cardioem.config import ablate as ablate_config
from cardioem.coupling import WindkesselAdapter, solve_coupled_step
from cardioem.ep import apply_stimuli
from cardioem.errors import ConfigError, SolverError
from cardioem.fem import FeSpace, intergrid_transfer
from cardioem.mechanics import MechanicsState
from cardioem.scenarios import Scenario

ablate = ablate_config   # re-exported: flips exactly one feature toggle

MS_PER_S = 1000.0
CHECKPOINT_VERSION = 1


@dataclass
class EmState:
    """Composite state of all core models at one coarse time level."""

    t_s: float
    step: int
    u: np.ndarray
    u_prev: np.ndarray
    ep_steps: int
    w_regions: dict
    z: act.ActivationState
    sl_prev: np.ndarray
    mech: MechanicsState
    c: np.ndarray
    p: dict


@dataclass
class RunResult:
    trace: Trace
    coupling_rows: list
    state: EmState
    event_log: list
    bench_rows: list = field(default_factory=list)


class Orchestrator:
    def __init__(self, scenario: Scenario, cfg: RunConfig, debug_events=False):
        self.sc = scenario
        self.cfg = cfg
        self.toggles: Toggles = cfg.simulation.toggles
        self.debug_events = debug_events
        self.events = []
        mesh = scenario.mesh
        self.p1 = FeSpace(mesh, order=1)
        self.p2 = scenario.ep.space
        self.myo_cells = np.sort(np.concatenate([
            mesh.region_cells(r.regions) for r in scenario.ep.regions
        ]))
        self._stim_coords = self.p2.dof_coords_scalar[scenario.ep.active]
        self._closed_loop = not isinstance(scenario.adapter, WindkesselAdapter)

    # -- state management --------------------------------------------------

    def initial_state(self) -> EmState:
        sc = self.sc
        n_vert = sc.mesh.n_vertices
        z = act.ActivationState.zeros(n_vert)
        sl0 = np.full(n_vert, sc.sl0_um)
        # constant-calcium steady state at the working sarcomere length
        for reg in sc.act_regions:
            ss = act.steady_state(reg.params, 0.1, 2.2)
            z.p[reg.vertices] = ss.p[0]
            z.m0[reg.vertices] = ss.m0[0]
            z.m1[reg.vertices] = ss.m1[0]
        nd = sc.mech.space.n_dofs
        return EmState(
            t_s=0.0, step=0,
            u=sc.ep.u.copy(), u_prev=sc.ep.u_prev.copy(), ep_steps=sc.ep._steps,
            w_regions={r.name: r.state.w.copy() for r in sc.ep.regions},
            z=z, sl_prev=sl0,
            mech=MechanicsState(d=np.zeros(nd), d_prev=np.zeros(nd),
                                d_prev2=np.zeros(nd)),
            c=sc.c0.copy(), p=dict(sc.p0_mmHg),
        )

    def _push_ep_state(self, state: EmState):
        sc = self.sc
        sc.ep.u = state.u.copy()
        sc.ep.u_prev = state.u_prev.copy()
        sc.ep._steps = state.ep_steps
        for reg in sc.ep.regions:
            reg.state.w[:] = state.w_regions[reg.name]

    def _pull_ep_state(self, state: EmState):
        sc = self.sc
        state.u = sc.ep.u.copy()
        state.u_prev = sc.ep.u_prev.copy()
        state.ep_steps = sc.ep._steps
        state.w_regions = {r.name: r.state.w.copy() for r in sc.ep.regions}

    # -- single coarse step --------------------------------------------------

    def step(self, state: EmState, counter=None) -> EmState:
        sc = self.sc
        sim = self.cfg.simulation
        dt, tau, n_sub = sim.dt_s, sim.tau_s, sim.n_sub
        tog = self.toggles
        mesh = sc.mesh

        # electrophysiology block: deformation feedback lagged one step
        self._push_ep_state(state)
        if tog.mef:
            F_lag = sc.mech.deformation_gradient(state.mech.d)
            sc.ep.refresh_deformation(F_lag)
        t = state.t_s
        for _ in range(n_sub):
            i_app = apply_stimuli(sc.stimuli, t, self._stim_coords) * MS_PER_S
            sc.ep.step(tau, i_app, t)
            t += tau
        self._pull_ep_state(state)
        self._log("ionic+monodomain")

        # calcium onto the P1 grid
        ca_p2 = sc.ep.calcium_field()
        ca_vertex = intergrid_transfer(self.p2, self.p1, ca_p2)
        self._log("intergrid-calcium")

        # sarcomere block with lagged stretch and stretch rate
        F_n = sc.mech.deformation_gradient(state.mech.d)
        sl_cell = act.compute_sl(F_n[self.myo_cells], sc.fibers.f0[self.myo_cells],
                                 sc.sl0_um)
        sl_vertex = act.cells_to_vertices(mesh, _expand(sl_cell, self.myo_cells,
                                                        mesh.n_cells),
                                          cells=self.myo_cells, default=sc.sl0_um)
        if tog.stretch_rate_feedback:
            dsl_dt = (sl_vertex - state.sl_prev) / dt
        else:
            dsl_dt = np.zeros_like(sl_vertex)

        z = state.z
        T_a_vertex = np.zeros(mesh.n_vertices)
        K_stab_vertex = np.zeros(mesh.n_vertices)
        for reg in sc.act_regions:
            ids = reg.vertices
            sub = act.ActivationState(z.p[ids], z.m0[ids], z.m1[ids])
            inputs = act.SarcomereInputs(ca_vertex[ids], sl_vertex[ids], dsl_dt[ids])
            out = act.step_activation(sub, inputs, dt, reg.params)
            z.p[ids], z.m0[ids], z.m1[ids] = out.p, out.m0, out.m1
            if reg.atrial and not tog.atrial_contraction:
                continue
            T_a_vertex[ids] = act.active_tension(out, sl_vertex[ids],
                                                 sc.a_xb_vertex[ids], reg.params)
            K_stab_vertex[ids] = act.crossbridge_stiffness(out, sc.a_xb_vertex[ids])
        self._log("activation")

        T_a_cell = T_a_vertex[mesh.tets].mean(axis=1)
        K_stab_cell = K_stab_vertex[mesh.tets].mean(axis=1)

        # mechanics with volume constraints
        mode = "stabilized" if tog.stab_circulation else "unstabilized"
        t_next = state.t_s + dt
        fixed = sc.adapter.fixed_pressures(state.c, t_next)
        mech_state, p_new, info = solve_coupled_step(
            sc.mech, state.mech, dt, T_a_cell, K_stab_cell, sc.chambers,
            sc.adapter, state.c, state.p, mode=mode,
            fixed_pressures_mmHg=fixed, config=sc.newton, counter=counter,
        )
        self._log("mechanics+coupling")

        # explicit circulation update with the new chamber pressures
        p_full = dict(fixed)
        p_full.update(p_new)
        if self._closed_loop:
            c_new = step_circulation(state.c, p_full, dt, sc.circ_params, state.t_s)
        else:
            c_new = sc.adapter.bench.step(state.c, p_full["LV"], dt)
        self._log("circulation")

        state.t_s = t_next
        state.step += 1
        state.sl_prev = sl_vertex
        state.mech = mech_state
        state.c = c_new
        state.p = p_new
        state._last_info = info
        state._last_p_full = p_full
        state._last_T_a = T_a_vertex
        return state

    def _log(self, name):
        if self.debug_events:
            self.events.append(name)

    # -- full runs -------------------------------------------------------------

    def run(self, n_steps=None, state=None, counter=None, out_dir=None,
            vtk_stride=0) -> RunResult:
        sc = self.sc
        sim = self.cfg.simulation
        if n_steps is None:
            n_steps = sim.beats * int(round(sim.t_hb_s / sim.dt_s))
        state = state or self.initial_state()
        trace = Trace()
        coupling_rows = []
        bench_rows = []
        for _ in range(n_steps):
            state = self.step(state, counter=counter)
            info = state._last_info
            p_full = state._last_p_full
            if self._closed_loop:
                q = valve_fluxes(sc.circ_params, state.c, p_full)
                trace.append(state.t_s, state.c, p_full, q)
            else:
                bench = sc.adapter.bench
                net, q_in, q_out = bench.net_inflow(state.c, p_full["LV"])
                bench_rows.append((state.t_s, state.c[0], state.c[1],
                                   p_full["LV"], q_in, q_out))
            coupling_rows.append({
                "t": state.t_s,
                **{f"V_{ch.name}": float(state.c[IDX[f'V_{ch.name}']])
                   if self._closed_loop else float(state.c[0])
                   for ch in sc.chambers},
                **{f"p_{k}": v for k, v in state.p.items()},
                "newton_iterations": info["iterations"],
                "jacobian_solves": info["solves"],
                "volume_residual_mL": info["volume_residual_mL"],
            })
            if out_dir and vtk_stride and state.step % vtk_stride == 0:
                self._write_snapshot(state, Path(out_dir), state.step)
        return RunResult(trace=trace, coupling_rows=coupling_rows, state=state,
                         event_log=list(self.events), bench_rows=bench_rows)

    def _write_snapshot(self, state: EmState, out_dir: Path, step: int):
        from cardioem.mesh_io import write_point_fields_vtk

        out_dir.mkdir(parents=True, exist_ok=True)
        nv = self.sc.mesh.n_vertices
        u_vertex = np.full(nv, np.nan)
        act_dofs = self.sc.ep.active
        vert_sel = act_dofs[act_dofs < nv]
        u_full = self.sc.ep.potential_field()
        u_vertex[vert_sel] = u_full[vert_sel]
        jac = np.linalg.det(self.sc.mech.deformation_gradient(state.mech.d))
        write_point_fields_vtk(
            self.sc.mesh, out_dir / f"snapshot_{step:06d}.vtk",
            scalars={
                "potential_mV": np.nan_to_num(u_vertex, nan=-84.0),
                "active_tension_Pa": state._last_T_a,
            },
            vectors={"displacement_m": state.mech.d.reshape(-1, 3)},
        )
        return jac


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint(state: EmState, path) -> Path:
    """Bit-exact state snapshot with an integrity checksum."""
    path = Path(path)
    payload = {
        "version": np.array([CHECKPOINT_VERSION]),
        "t_s": np.array([state.t_s]),
        "step": np.array([state.step]),
        "u": state.u, "u_prev": state.u_prev,
        "ep_steps": np.array([state.ep_steps]),
        "z_p": state.z.p, "z_m0": state.z.m0, "z_m1": state.z.m1,
        "sl_prev": state.sl_prev,
        "d": state.mech.d, "d_prev": state.mech.d_prev, "d_prev2": state.mech.d_prev2,
        "c": state.c,
        "p_names": np.array(sorted(state.p), dtype="U8"),
        "p_values": np.array([state.p[k] for k in sorted(state.p)]),
    }
    for name, w in state.w_regions.items():
        payload[f"w__{name}"] = w
    np.savez(path, **payload)
    real = path if path.suffix == ".npz" else Path(str(path) + ".npz")
    digest = hashlib.sha256(real.read_bytes()).hexdigest()
    Path(str(real) + ".sha256").write_text(digest)
    return real


def restore(path) -> EmState:
    path = Path(path)
    sidecar = Path(str(path) + ".sha256")
    if sidecar.exists():
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if digest != sidecar.read_text().strip():
            raise ConfigError(f"checkpoint {path} failed its checksum")
    data = np.load(path)
    if int(data["version"][0]) != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {int(data['version'][0])} != {CHECKPOINT_VERSION}"
        )
    w_regions = {
        k[len("w__"):]: data[k] for k in data.files if k.startswith("w__")
    }
    p = dict(zip(data["p_names"].tolist(), data["p_values"].tolist()))
    return EmState(
        t_s=float(data["t_s"][0]), step=int(data["step"][0]),
        u=data["u"], u_prev=data["u_prev"], ep_steps=int(data["ep_steps"][0]),
        w_regions=w_regions,
        z=act.ActivationState(data["z_p"], data["z_m0"], data["z_m1"]),
        sl_prev=data["sl_prev"],
        mech=MechanicsState(d=data["d"], d_prev=data["d_prev"], d_prev2=data["d_prev2"]),
        c=data["c"], p=p,
    )


def _expand(values, cells, n_cells):
    out = np.zeros(n_cells)
    out[cells] = values
    return out
