"""Pluggable 0D ionic models.

A model supplies the transmembrane reaction current (per unit capacitance,
positive = outward/repolarizing), the state evolution of its gating and
concentration variables, and a calcium read-out for the force generation
model.  Internally models work in mV and ms; the tissue solver converts
at this boundary (1 mV/ms = 1 V/s).

The built-in ``reduced`` model is a three-variable phenomenological cell:
a fast availability gate ``v`` and a slow recovery gate ``r`` with
two-current kinetics, plus a calcium-like concentration ``c`` relaxing
toward a potential-driven target.  Gates advance by exact exponential
integration against frozen potential; the concentration advances
explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from cardioem.errors import ConfigError, SolverError


@dataclass
class IonicState:
    """Per-point state array (n_points, n_w) plus the calcium component."""

    w: np.ndarray
    calcium_index: int

    def copy(self):
        return IonicState(self.w.copy(), self.calcium_index)


@dataclass
class ReducedParams:
    u_rest_mV: float = -84.0
    u_amp_mV: float = 104.0          # rest-to-peak amplitude
    tau_in_ms: float = 0.3
    tau_out_ms: float = 6.0
    tau_open_ms: float = 120.0
    tau_close_ms: float = 150.0
    phi_gate: float = 0.13
    k_gate: float = 0.03
    tau_r_ms: float = 130.0
    phi_r: float = 0.30
    k_r: float = 0.05
    r_boost: float = 0.5
    g_mem: float = 1.0               # overall conductance scale
    c_dia_uM: float = 0.1
    c_amp_uM: float = 0.95
    k_up_per_ms: float = 1.0 / 300.0
    phi_ca: float = 0.25
    k_ca: float = 0.05
    calcium_rescale: float = 1.0     # multiplicative hook on the read-out


# atrial recalibration: shorter plateau, hotter calcium drive so the
# transient peaks near 1 uM (the atrial force model is calibrated around a
# dissociation constant of ~0.5 uM at working sarcomere length)
ATRIAL_REDUCED = dict(tau_close_ms=80.0, tau_r_ms=70.0, c_amp_uM=2.9)
VENTRICULAR_REDUCED = dict(tau_close_ms=150.0, c_amp_uM=1.05)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


class ReducedIonicModel:
    """Built-in three-variable cell model (v, r, c)."""

    name = "reduced"
    n_w = 3
    calcium_index = 2

    def __init__(self, params: ReducedParams = None, region="any"):
        self.p = params or ReducedParams()
        self.region = region

    # -- helpers ----------------------------------------------------------

    def _phi(self, u):
        return (np.asarray(u, dtype=float) - self.p.u_rest_mV) / self.p.u_amp_mV

    def _gate_targets(self, u):
        p = self.p
        phi = self._phi(u)
        v_inf = _sigmoid((p.phi_gate - phi) / p.k_gate)
        tau_v = p.tau_close_ms + (p.tau_open_ms - p.tau_close_ms) * v_inf
        r_inf = _sigmoid((phi - p.phi_r) / p.k_r)
        c_inf = p.c_dia_uM + p.c_amp_uM * _sigmoid((phi - p.phi_ca) / p.k_ca)
        return phi, v_inf, tau_v, r_inf, c_inf

    # -- contract ---------------------------------------------------------

    @property
    def resting_u_mV(self):
        return self.p.u_rest_mV

    def resting_state(self, n_points=1) -> IonicState:
        u = self.p.u_rest_mV
        _, v_inf, _, r_inf, c_inf = self._gate_targets(u)
        w = np.tile(np.array([float(v_inf), float(r_inf), float(c_inf)]), (n_points, 1))
        return IonicState(w, self.calcium_index)

    def rhs(self, u_mV, state: IonicState):
        """dw/dt in 1/ms units."""
        p = self.p
        w = state.w
        phi, v_inf, tau_v, r_inf, c_inf = self._gate_targets(u_mV)
        out = np.empty_like(w)
        out[:, 0] = (v_inf - w[:, 0]) / tau_v
        out[:, 1] = (r_inf - w[:, 1]) / p.tau_r_ms
        out[:, 2] = p.k_up_per_ms * (c_inf - w[:, 2])
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            raise SolverError(f"ionic rhs non-finite at point {bad[0]}, component {bad[1]}")
        return out

    def current(self, u_mV, state: IonicState):
        """I_ion / C_m in mV/ms; positive is outward (repolarizing)."""
        p = self.p
        phi = self._phi(u_mV)
        v, r = state.w[:, 0], state.w[:, 1]
        inward = v * phi * phi * (1.0 - phi) / p.tau_in_ms
        outward = phi * (1.0 + p.r_boost * r) / p.tau_out_ms
        i = p.g_mem * p.u_amp_mV * (outward - inward)
        if not np.all(np.isfinite(i)):
            bad = int(np.argwhere(~np.isfinite(i))[0])
            raise SolverError(f"ionic current non-finite at point {bad}")
        return i

    def step(self, u_mV, state: IonicState, dt_ms) -> IonicState:
        """Advance gates exactly (frozen u), concentration explicitly."""
        if dt_ms <= 0:
            raise ConfigError("ionic step requires dt > 0")
        p = self.p
        w = state.w
        phi, v_inf, tau_v, r_inf, c_inf = self._gate_targets(u_mV)
        out = np.empty_like(w)
        out[:, 0] = v_inf + (w[:, 0] - v_inf) * np.exp(-dt_ms / tau_v)
        out[:, 1] = r_inf + (w[:, 1] - r_inf) * np.exp(-dt_ms / p.tau_r_ms)
        out[:, 2] = w[:, 2] + dt_ms * p.k_up_per_ms * (c_inf - w[:, 2])
        np.clip(out[:, 0], 0.0, 1.0, out=out[:, 0])
        np.clip(out[:, 1], 0.0, 1.0, out=out[:, 1])
        np.clip(out[:, 2], 0.0, None, out=out[:, 2])
        return IonicState(out, self.calcium_index)

    def calcium_uM(self, state: IonicState):
        return state.w[:, self.calcium_index] * self.p.calcium_rescale


class LinearIonicModel:
    """Stateless linear reaction, for manufactured-solution studies."""

    name = "linear"
    n_w = 0
    calcium_index = -1

    def __init__(self, g_per_ms=0.1, u_rest_mV=0.0, region="any"):
        self.g = g_per_ms
        self.u_rest_mV = u_rest_mV
        self.region = region

    @property
    def resting_u_mV(self):
        return self.u_rest_mV

    def resting_state(self, n_points=1):
        return IonicState(np.zeros((n_points, 0)), -1)

    def rhs(self, u_mV, state):
        return np.zeros_like(state.w)

    def current(self, u_mV, state):
        return self.g * (np.asarray(u_mV, dtype=float) - self.u_rest_mV)

    def step(self, u_mV, state, dt_ms):
        return state

    def calcium_uM(self, state):
        return np.zeros(state.w.shape[0])


MODELS = {"reduced": ReducedIonicModel, "linear": LinearIonicModel}


def make_model(name, region="any", **params):
    if name == "reduced":
        base = ReducedParams()
        preset = {"atrial": ATRIAL_REDUCED, "ventricular": VENTRICULAR_REDUCED}.get(region, {})
        merged = {**preset, **params}
        unknown = set(merged) - set(base.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown reduced-model parameter(s): {sorted(unknown)}")
        return ReducedIonicModel(replace(base, **merged), region=region)
    if name == "linear":
        return LinearIonicModel(region=region, **params)
    raise ConfigError(f"unknown ionic model {name!r}; available: {sorted(MODELS)}")


def check_resting_equilibrium(model, rel_tol=1e-6):
    """Relative rhs norm at the declared resting state."""
    st = model.resting_state(1)
    r = model.rhs(model.resting_u_mV, st)
    scale = np.maximum(np.abs(st.w), 1e-3) / 1.0   # characteristic rates: w / 1 ms
    return float(np.max(np.abs(r) / scale)) if r.size else 0.0


def _paced_reduced_scalar(model, n_cycles, period_ms, dt_ms, stim_amp, stim_dur,
                          record_last):
    """Plain-float inner loop for the reduced model (1000-cycle runs)."""
    p = model.p
    n_steps = int(round(period_ms / dt_ms))
    st0 = model.resting_state(1)
    u, v, r, c = model.resting_u_mV, st0.w[0, 0], st0.w[0, 1], st0.w[0, 2]
    deltas, prev = [], None
    trace = [] if record_last else None
    exp, clip = math.exp, lambda x, lo, hi: lo if x < lo else (hi if x > hi else x)
    for cycle in range(n_cycles):
        for k in range(n_steps):
            t = k * dt_ms
            phi = (u - p.u_rest_mV) / p.u_amp_mV
            x = clip((p.phi_gate - phi) / p.k_gate, -60.0, 60.0)
            v_inf = 1.0 / (1.0 + exp(-x))
            tau_v = p.tau_close_ms + (p.tau_open_ms - p.tau_close_ms) * v_inf
            x = clip((phi - p.phi_r) / p.k_r, -60.0, 60.0)
            r_inf = 1.0 / (1.0 + exp(-x))
            x = clip((phi - p.phi_ca) / p.k_ca, -60.0, 60.0)
            c_inf = p.c_dia_uM + p.c_amp_uM / (1.0 + exp(-x))
            v = clip(v_inf + (v - v_inf) * exp(-dt_ms / tau_v), 0.0, 1.0)
            r = clip(r_inf + (r - r_inf) * exp(-dt_ms / p.tau_r_ms), 0.0, 1.0)
            c = max(c + dt_ms * p.k_up_per_ms * (c_inf - c), 0.0)
            inward = v * phi * phi * (1.0 - phi) / p.tau_in_ms
            outward = phi * (1.0 + p.r_boost * r) / p.tau_out_ms
            i_ion = p.g_mem * p.u_amp_mV * (outward - inward)
            i_stim = stim_amp if t < stim_dur else 0.0
            u = u + dt_ms * (-i_ion + i_stim)
            if not math.isfinite(u):
                raise SolverError(
                    f"single-cell pacing diverged in cycle {cycle} at t={t:.2f} ms"
                )
            if record_last and cycle == n_cycles - 1:
                trace.append((t, u, v, r, c))
        snapshot = np.array([u, v, r, c])
        if prev is not None:
            scale = np.maximum(np.abs(prev), 1e-9)
            deltas.append(float(np.max(np.abs(snapshot - prev) / scale)))
        prev = snapshot
    state = IonicState(np.array([[v, r, c]]), model.calcium_index)
    if record_last:
        return np.array([u]), state, deltas, trace
    return np.array([u]), state, deltas


def paced_single_cell(model, n_cycles, period_ms, dt_ms=0.25,
                      stim_amp_mV_per_ms=30.0, stim_dur_ms=3.0,
                      record_last=False):
    """Explicitly paced single cell; returns (u, state, cycle_deltas[, trace]).

    ``cycle_deltas`` holds the relative state change between consecutive
    cycle ends, used to detect the periodic regime.
    """
    if n_cycles < 1:
        raise ConfigError("pacing needs n_cycles >= 1")
    if isinstance(model, ReducedIonicModel):
        return _paced_reduced_scalar(model, n_cycles, period_ms, dt_ms,
                                     stim_amp_mV_per_ms, stim_dur_ms, record_last)
    n_steps = int(round(period_ms / dt_ms))
    state = model.resting_state(1)
    u = np.array([model.resting_u_mV])
    deltas = []
    prev_snapshot = None
    trace = [] if record_last else None
    for cycle in range(n_cycles):
        for k in range(n_steps):
            t = k * dt_ms
            state = model.step(u, state, dt_ms)
            i_stim = stim_amp_mV_per_ms if t < stim_dur_ms else 0.0
            du = -model.current(u, state) + i_stim
            u = u + dt_ms * du
            if not np.isfinite(u[0]):
                raise SolverError(
                    f"single-cell pacing diverged in cycle {cycle} at t={t:.2f} ms"
                )
            if record_last and cycle == n_cycles - 1:
                trace.append((t, float(u[0]), *state.w[0]))
        snapshot = np.concatenate([u, state.w[0]])
        if prev_snapshot is not None:
            scale = np.maximum(np.abs(prev_snapshot), 1e-9)
            deltas.append(float(np.max(np.abs(snapshot - prev_snapshot) / scale)))
        prev_snapshot = snapshot
    if record_last:
        return u, state, deltas, trace
    return u, state, deltas


def init_single_cell(model, n_cycles, period_ms, dt_ms=0.25) -> IonicState:
    """Final-beat end state of a paced cell, used as the tissue-wide w0."""
    _, state, _ = paced_single_cell(model, n_cycles, period_ms, dt_ms)
    return state


def write_state_csv(path, state: IonicState):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([f"w{j}" for j in range(state.w.shape[1])])
        for row in state.w:
            wr.writerow([f"{v:.17g}" for v in row])
    return path


def read_state_csv(path, calcium_index):
    with open(path) as f:
        rd = csv.reader(f)
        header = next(rd)
        rows = [[float(v) for v in row] for row in rd]
    return IonicState(np.array(rows).reshape(len(rows), len(header)), calcium_index)
