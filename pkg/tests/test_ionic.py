"""Single-cell ionic model behavior."""

import numpy as np
import pytest

from cardioem.errors import ConfigError
from cardioem.ionic import (
    IonicState,
    check_resting_equilibrium,
    init_single_cell,
    make_model,
    paced_single_cell,
    read_state_csv,
    write_state_csv,
)


@pytest.fixture(scope="module")
def vent():
    return make_model("reduced", region="ventricular")


@pytest.fixture(scope="module")
def atr():
    return make_model("reduced", region="atrial")


class TestRhs:
    def test_rest_is_equilibrium(self, vent, atr):
        assert check_resting_equilibrium(vent) <= 1e-6
        assert check_resting_equilibrium(atr) <= 1e-6

    def test_gate_above_steady_state_relaxes_down(self, vent):
        st = vent.resting_state(1)
        st.w[0, 0] = 1.0  # availability gate forced to 1; steady state < 1
        r = vent.rhs(vent.resting_u_mV, st)
        assert r[0, 0] < 0

    def test_calcium_rises_after_depolarizing_step(self, vent):
        st = vent.resting_state(1)
        u = np.array([vent.resting_u_mV + 60.0])
        # within one upstroke time constant the calcium derivative is positive
        dt = vent.p.tau_in_ms
        st2 = vent.step(u, st, dt)
        r = vent.rhs(u, st2)
        assert r[0, 2] > 0


class TestCurrent:
    def test_zero_at_rest(self, vent):
        st = vent.resting_state(4)
        u = np.full(4, vent.resting_u_mV)
        assert np.allclose(vent.current(u, st), 0.0, atol=1e-6)

    def test_suprathreshold_net_inward(self, vent):
        st = vent.resting_state(1)
        u = np.array([vent.resting_u_mV + 40.0])
        assert vent.current(u, st)[0] < 0.0

    def test_conductance_scales_current_linearly(self):
        m1 = make_model("reduced", region="ventricular", g_mem=1.0)
        m2 = make_model("reduced", region="ventricular", g_mem=2.5)
        st = m1.resting_state(1)
        u = np.array([-40.0])
        assert m2.current(u, st)[0] == pytest.approx(2.5 * m1.current(u, st)[0], rel=1e-14)


class TestStep:
    def test_frozen_u_gate_update_exact(self, vent):
        st = vent.resting_state(1)
        st.w[0, 0] = 0.4
        u = np.array([-20.0])
        dt = 7.0
        phi, v_inf, tau_v, r_inf, _ = vent._gate_targets(u)
        expected = v_inf + (0.4 - v_inf) * np.exp(-dt / tau_v)
        out = vent.step(u, st, dt)
        assert out.w[0, 0] == pytest.approx(float(expected), rel=1e-14)

    def test_small_dt_consistency(self, vent):
        st = vent.resting_state(1)
        st.w[0] = [0.5, 0.2, 0.3]
        u = np.array([-30.0])
        errs = []
        for dt in (1e-2, 1e-3, 1e-4):
            stepped = vent.step(u, st, dt).w
            euler = st.w + dt * vent.rhs(u, st)
            errs.append(np.max(np.abs(stepped - euler)) / dt)
        # o(dt): the defect per unit dt itself vanishes
        assert errs[2] < errs[0]
        assert errs[2] < 1e-3

    def test_ranges_preserved(self, vent):
        rng = np.random.default_rng(3)
        st = IonicState(rng.uniform(0, 1, (50, 3)), 2)
        u = rng.uniform(-90, 30, 50)
        out = vent.step(u, st, 0.5)
        assert np.all(out.w[:, 0] >= 0) and np.all(out.w[:, 0] <= 1)
        assert np.all(out.w[:, 1] >= 0) and np.all(out.w[:, 1] <= 1)
        assert np.all(out.w[:, 2] >= 0)

    def test_dt_must_be_positive(self, vent):
        with pytest.raises(ConfigError):
            vent.step(np.array([-80.0]), vent.resting_state(1), 0.0)


class TestPacing:
    def test_zero_cycles_disallowed(self, vent):
        with pytest.raises(ConfigError):
            init_single_cell(vent, 0, 800.0)

    def test_one_cycle_equals_manual(self, vent):
        st = init_single_cell(vent, 1, 800.0, dt_ms=0.5)
        _, st2, _ = paced_single_cell(vent, 1, 800.0, dt_ms=0.5)
        assert np.array_equal(st.w, st2.w)

    def test_calcium_transient_calibration(self, vent):
        _, _, _, trace = paced_single_cell(vent, 3, 800.0, dt_ms=0.25, record_last=True)
        arr = np.array(trace)
        t, u, ca = arr[:, 0], arr[:, 1], arr[:, 4]
        ca_eff = ca * vent.p.calcium_rescale
        peak = ca_eff.max()
        assert 0.35 <= peak <= 0.7          # ~0.5 uM target
        # decay time constant ~300 ms: find fall to (dia + peak)/e after peak
        ipk = int(ca_eff.argmax())
        target = vent.p.c_dia_uM + (peak - vent.p.c_dia_uM) / np.e
        after = np.nonzero(ca_eff[ipk:] <= target)[0]
        assert after.size > 0
        tau = t[ipk + after[0]] - t[ipk]
        assert 200.0 <= tau <= 450.0

    def test_action_potential_shape(self, vent):
        _, _, _, trace = paced_single_cell(vent, 2, 800.0, dt_ms=0.25, record_last=True)
        arr = np.array(trace)
        u = arr[:, 1]
        assert u.max() > -30.0              # depolarizes
        assert abs(u[-1] - vent.p.u_rest_mV) < 3.0   # returns to rest

    def test_thousand_cycle_limit_cycle(self, vent):
        _, _, deltas = paced_single_cell(vent, 1000, 800.0, dt_ms=0.5)
        assert deltas[-1] < 1e-4


class TestStateIo:
    def test_csv_round_trip(self, tmp_path, vent):
        st = vent.resting_state(5)
        st.w[:, 2] = np.linspace(0.1, 0.5, 5)
        p = tmp_path / "w.csv"
        write_state_csv(p, st)
        back = read_state_csv(p, st.calcium_index)
        assert np.array_equal(back.w, st.w)


class TestRegistry:
    def test_unknown_model(self):
        with pytest.raises(ConfigError):
            make_model("crn-full")

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError):
            make_model("reduced", bogus_param=1.0)

    def test_calcium_rescale_hook(self):
        m = make_model("reduced", region="ventricular", calcium_rescale=0.48)
        st = m.resting_state(1)
        st.w[0, 2] = 1.0
        assert m.calcium_uM(st)[0] == pytest.approx(0.48)
