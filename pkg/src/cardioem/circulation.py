"""Closed-loop 0D circulation: RLC compartments and diode valves.

State vector (mmHg, mL, s):
    (V_RA, V_LA, V_RV, V_LV,
     p_AR_SYS, p_VEN_SYS, p_AR_PUL, p_VEN_PUL,
     Q_AR_SYS, Q_VEN_SYS, Q_AR_PUL, Q_VEN_PUL)

Valves are low-resistance when the proximal pressure exceeds the distal
one (physically open).  The printed source we follow lists the opposite
branch assignment, which would make closed valves free-flowing; a config
flag reproduces that literal variant for comparison.

Explicit first-order stepping conserves the total stressed volume
exactly (the compartment fluxes telescope).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from cardioem.errors import ConfigError, SolverError

STATE_NAMES = (
    "V_RA", "V_LA", "V_RV", "V_LV",
    "p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL",
    "Q_AR_SYS", "Q_VEN_SYS", "Q_AR_PUL", "Q_VEN_PUL",
)
IDX = {n: i for i, n in enumerate(STATE_NAMES)}
CHAMBERS = ("RA", "LA", "RV", "LV")
VALVES = ("TV", "MV", "PV", "AV")

TRACE_HEADER = (
    "t,V_RA,V_LA,V_RV,V_LV,p_AR_SYS,p_VEN_SYS,p_AR_PUL,p_VEN_PUL,"
    "Q_AR_SYS,Q_VEN_SYS,Q_AR_PUL,Q_VEN_PUL,p_RA,p_LA,p_RV,p_LV,Q_TV,Q_MV,Q_PV,Q_AV"
)


@dataclass
class CircParams:
    R_AR_SYS: float = 0.48
    R_AR_PUL: float = 0.032116
    R_VEN_SYS: float = 0.26
    R_VEN_PUL: float = 0.035684
    C_AR_SYS: float = 1.50
    C_AR_PUL: float = 10.0
    C_VEN_SYS: float = 60.0
    C_VEN_PUL: float = 16.0
    L_AR_SYS: float = 5e-3
    L_AR_PUL: float = 5e-4
    L_VEN_SYS: float = 5e-4
    L_VEN_PUL: float = 5e-4
    R_min: float = 0.0075
    R_max: float = 75000.0
    paper_literal_branches: bool = False

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in self.__dataclass_fields__.values()
                if f.name != "paper_literal_branches"]
        if any(v <= 0 for v in vals):
            raise ConfigError("circulation parameters must be positive")
        if not self.R_min < self.R_max:
            raise ConfigError("R_min must be smaller than R_max")


def default_initial_state():
    """Limit-cycle state of the default elastance loop (pre-converged)."""
    return np.array([
        70.317, 79.7346, 74.8731, 83.7934,       # volumes (mL)
        71.1549, 30.1367, 10.3508, 8.3026,       # pressures (mmHg)
        86.7221, 103.9369, 65.5807, 113.923,     # fluxes (mL/s)
    ])


def valve_flux(p1, p2, r_min, r_max, paper_literal=False):
    """Diode flow through a valve from proximal p1 to distal p2 (mL/s)."""
    dp = p1 - p2
    if paper_literal:
        r = np.where(dp < 0.0, r_min, r_max)
    else:
        r = np.where(dp >= 0.0, r_min, r_max)
    return dp / r


def valve_resistance(p1, p2, r_min, r_max, paper_literal=False):
    dp = p1 - p2
    if paper_literal:
        return np.where(dp < 0.0, r_min, r_max)
    return np.where(dp >= 0.0, r_min, r_max)


def valve_fluxes(params: CircParams, c, p):
    """All four valve flows given the chamber pressures dict (mmHg)."""
    lit = params.paper_literal_branches
    return {
        "TV": float(valve_flux(p["RA"], p["RV"], params.R_min, params.R_max, lit)),
        "MV": float(valve_flux(p["LA"], p["LV"], params.R_min, params.R_max, lit)),
        "PV": float(valve_flux(p["RV"], c[IDX["p_AR_PUL"]], params.R_min, params.R_max, lit)),
        "AV": float(valve_flux(p["LV"], c[IDX["p_AR_SYS"]], params.R_min, params.R_max, lit)),
    }


def circ_rhs(t, c, p, params: CircParams):
    """Time derivative of the 12-component state; p maps chamber -> mmHg."""
    q = valve_fluxes(params, c, p)
    d = np.empty(12)
    d[IDX["V_RA"]] = c[IDX["Q_VEN_SYS"]] - q["TV"]
    d[IDX["V_LA"]] = c[IDX["Q_VEN_PUL"]] - q["MV"]
    d[IDX["V_RV"]] = q["TV"] - q["PV"]
    d[IDX["V_LV"]] = q["MV"] - q["AV"]
    d[IDX["p_AR_SYS"]] = (q["AV"] - c[IDX["Q_AR_SYS"]]) / params.C_AR_SYS
    d[IDX["p_VEN_SYS"]] = (c[IDX["Q_AR_SYS"]] - c[IDX["Q_VEN_SYS"]]) / params.C_VEN_SYS
    d[IDX["p_AR_PUL"]] = (q["PV"] - c[IDX["Q_AR_PUL"]]) / params.C_AR_PUL
    d[IDX["p_VEN_PUL"]] = (c[IDX["Q_AR_PUL"]] - c[IDX["Q_VEN_PUL"]]) / params.C_VEN_PUL
    d[IDX["Q_AR_SYS"]] = (params.R_AR_SYS / params.L_AR_SYS) * (
        -c[IDX["Q_AR_SYS"]] - (c[IDX["p_VEN_SYS"]] - c[IDX["p_AR_SYS"]]) / params.R_AR_SYS
    )
    d[IDX["Q_VEN_SYS"]] = (params.R_VEN_SYS / params.L_VEN_SYS) * (
        -c[IDX["Q_VEN_SYS"]] - (p["RA"] - c[IDX["p_VEN_SYS"]]) / params.R_VEN_SYS
    )
    d[IDX["Q_AR_PUL"]] = (params.R_AR_PUL / params.L_AR_PUL) * (
        -c[IDX["Q_AR_PUL"]] - (c[IDX["p_VEN_PUL"]] - c[IDX["p_AR_PUL"]]) / params.R_AR_PUL
    )
    d[IDX["Q_VEN_PUL"]] = (params.R_VEN_PUL / params.L_VEN_PUL) * (
        -c[IDX["Q_VEN_PUL"]] - (p["LA"] - c[IDX["p_VEN_PUL"]]) / params.R_VEN_PUL
    )
    return d


def step_circulation(c, p, dt, params: CircParams, t=0.0):
    """Explicit first-order step; raises on blow-up."""
    if dt <= 0:
        raise ConfigError("circulation step requires dt > 0")
    out = c + dt * circ_rhs(t, c, p, params)
    if not np.all(np.isfinite(out)):
        raise SolverError("circulation state blew up; reduce the time step")
    return out


def total_stressed_volume(c, params: CircParams):
    """Chamber volumes plus capacitor-stored volumes (mL); conserved."""
    return float(
        c[IDX["V_RA"]] + c[IDX["V_LA"]] + c[IDX["V_RV"]] + c[IDX["V_LV"]]
        + params.C_AR_SYS * c[IDX["p_AR_SYS"]]
        + params.C_VEN_SYS * c[IDX["p_VEN_SYS"]]
        + params.C_AR_PUL * c[IDX["p_AR_PUL"]]
        + params.C_VEN_PUL * c[IDX["p_VEN_PUL"]]
    )


# ---------------------------------------------------------------------------
# stabilized volume-target machinery for the 3D-0D coupling


def chamber_volumes_0d(c):
    return {k: float(c[IDX[f"V_{k}"]]) for k in CHAMBERS}


def chamber_net_inflow(params: CircParams, c_n, p):
    """Net inflow per chamber (mL/s) at pressures p and circulation state c_n.

    Venous and arterial quantities come from the lagged state; valve flows
    use the supplied (possibly implicit) chamber pressures.
    """
    q = valve_fluxes(params, c_n, p)
    return {
        "RA": c_n[IDX["Q_VEN_SYS"]] - q["TV"],
        "LA": c_n[IDX["Q_VEN_PUL"]] - q["MV"],
        "RV": q["TV"] - q["PV"],
        "LV": q["MV"] - q["AV"],
    }


def chamber_net_inflow_jacobian(params: CircParams, c_n, p):
    """d(net inflow_k)/d p_j using the current valve branch resistances."""
    lit = params.paper_literal_branches
    g_tv = 1.0 / valve_resistance(p["RA"], p["RV"], params.R_min, params.R_max, lit)
    g_mv = 1.0 / valve_resistance(p["LA"], p["LV"], params.R_min, params.R_max, lit)
    g_pv = 1.0 / valve_resistance(p["RV"], c_n[IDX["p_AR_PUL"]], params.R_min,
                                  params.R_max, lit)
    g_av = 1.0 / valve_resistance(p["LV"], c_n[IDX["p_AR_SYS"]], params.R_min,
                                  params.R_max, lit)
    J = {k: {j: 0.0 for j in CHAMBERS} for k in CHAMBERS}
    J["RA"]["RA"] = -g_tv
    J["RA"]["RV"] = +g_tv
    J["LA"]["LA"] = -g_mv
    J["LA"]["LV"] = +g_mv
    J["RV"]["RA"] = +g_tv
    J["RV"]["RV"] = -g_tv - g_pv
    J["LV"]["LA"] = +g_mv
    J["LV"]["LV"] = -g_mv - g_av
    return J


# ---------------------------------------------------------------------------
# time-varying elastance chambers (pure-0D mode and hybrid scenarios)


@dataclass
class ElastanceChamber:
    """p = E(t) (V - V_rest) with a double-cosine activation waveform."""

    e_passive_mmHg_per_mL: float
    e_active_mmHg_per_mL: float
    v_rest_mL: float
    t_start_s: float
    t_contract_s: float
    t_relax_s: float
    period_s: float = 0.8

    def activation(self, t):
        tm = np.mod(t - self.t_start_s, self.period_s)
        if tm < self.t_contract_s:
            return 0.5 * (1.0 - np.cos(np.pi * tm / self.t_contract_s))
        tm2 = tm - self.t_contract_s
        if tm2 < self.t_relax_s:
            return 0.5 * (1.0 + np.cos(np.pi * tm2 / self.t_relax_s))
        return 0.0

    def elastance(self, t):
        return self.e_passive_mmHg_per_mL + self.e_active_mmHg_per_mL * self.activation(t)

    def pressure(self, t, volume_mL):
        return self.elastance(t) * (volume_mL - self.v_rest_mL)


def default_elastances(period_s=0.8):
    """Chamber timing mirrors the stimulation delays (atria first)."""
    return {
        "RA": ElastanceChamber(0.05, 0.09, 8.0, 0.02, 0.12, 0.12, period_s),
        "LA": ElastanceChamber(0.06, 0.11, 8.0, 0.04, 0.12, 0.12, period_s),
        "RV": ElastanceChamber(0.04, 0.60, 12.0, 0.18, 0.27, 0.15, period_s),
        "LV": ElastanceChamber(0.05, 2.75, 10.0, 0.18, 0.27, 0.15, period_s),
    }


@dataclass
class Trace:
    """Per-step record of state, chamber pressures and valve flows."""

    rows: list = field(default_factory=list)

    def append(self, t, c, p, q):
        self.rows.append(
            (t, *c, p["RA"], p["LA"], p["RV"], p["LV"], q["TV"], q["MV"], q["PV"], q["AV"])
        )

    def array(self):
        return np.array(self.rows)

    def column(self, name):
        cols = TRACE_HEADER.split(",")
        return self.array()[:, cols.index(name)]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(TRACE_HEADER + "\n")
            wr = csv.writer(f)
            for row in self.rows:
                wr.writerow([f"{v:.12g}" for v in row])
        return path


def read_trace_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != TRACE_HEADER:
            raise ConfigError(f"unexpected trace header in {path}")
        rows = [[float(v) for v in line.split(",")] for line in f if line.strip()]
    tr = Trace()
    tr.rows = [tuple(r) for r in rows]
    return tr


def run_0d(params: CircParams, elastances, t_end_s, dt_s, c0=None) -> Trace:
    """Pure-0D closed loop with elastance chambers; emits a full trace."""
    for ch in CHAMBERS:
        if ch not in elastances:
            raise ConfigError(f"missing elastance for chamber {ch}")
    c = default_initial_state() if c0 is None else np.asarray(c0, dtype=float).copy()
    trace = Trace()
    n = int(round(t_end_s / dt_s))
    t = 0.0
    for _ in range(n):
        p = {k: elastances[k].pressure(t, c[IDX[f"V_{k}"]]) for k in CHAMBERS}
        q = valve_fluxes(params, c, p)
        trace.append(t, c, p, q)
        c = step_circulation(c, p, dt_s, params, t)
        t += dt_s
    p = {k: elastances[k].pressure(t, c[IDX[f"V_{k}"]]) for k in CHAMBERS}
    q = valve_fluxes(params, c, p)
    trace.append(t, c, p, q)
    return trace


# ---------------------------------------------------------------------------
# single-chamber afterload benchmark (stabilization studies)


@dataclass
class WindkesselBench:
    """One pumping chamber between a constant preload and an RC afterload.

    State: (V_mL, p_AR_mmHg).  Same diode valves as the closed loop.
    """

    p_ven_mmHg: float = 10.0
    r_wk: float = 1.0            # distal resistance (mmHg s/mL)
    c_wk: float = 1.5            # compliance (mL/mmHg)
    p_distal_mmHg: float = 30.0
    R_min: float = 0.0075
    R_max: float = 75000.0
    paper_literal_branches: bool = False

    def net_inflow(self, state, p_lv):
        q_in = float(valve_flux(self.p_ven_mmHg, p_lv, self.R_min, self.R_max,
                                self.paper_literal_branches))
        q_out = float(valve_flux(p_lv, state[1], self.R_min, self.R_max,
                                 self.paper_literal_branches))
        return q_in - q_out, q_in, q_out

    def net_inflow_dp(self, state, p_lv):
        g_in = 1.0 / float(valve_resistance(self.p_ven_mmHg, p_lv, self.R_min,
                                            self.R_max, self.paper_literal_branches))
        g_out = 1.0 / float(valve_resistance(p_lv, state[1], self.R_min,
                                             self.R_max, self.paper_literal_branches))
        return -g_in - g_out

    def step(self, state, p_lv, dt):
        net, q_in, q_out = self.net_inflow(state, p_lv)
        v = state[0] + dt * net
        p_ar = state[1] + dt * (q_out - (state[1] - self.p_distal_mmHg) / self.r_wk) / self.c_wk
        if not (np.isfinite(v) and np.isfinite(p_ar)):
            raise SolverError("windkessel benchmark state blew up")
        return np.array([v, p_ar])
