"""Active force generation: sarcomere kinetics, tension, contractility."""

import numpy as np
import pytest

from cardioem.activation import (
    ATRIAL_ACTIVATION,
    VENTRICULAR_ACTIVATION,
    A_XB_LV_PA,
    A_XB_RV_PA,
    ActivationParams,
    ActivationState,
    SarcomereInputs,
    active_tension,
    build_contractility_field,
    compute_sl,
    crossbridge_stiffness,
    steady_state,
    step_activation,
)
from cardioem.errors import ConfigError


def constant_inputs(n, ca, sl, dsl=0.0):
    return SarcomereInputs(
        ca_uM=np.full(n, ca), sl_um=np.full(n, sl), dsl_dt_um_per_s=np.full(n, dsl)
    )


class TestComputeSl:
    def test_identity_gives_rest_length(self):
        F = np.tile(np.eye(3), (3, 1, 1))
        f0 = np.tile([1.0, 0, 0], (3, 1))
        assert np.allclose(compute_sl(F, f0, 1.9), 1.9)

    def test_uniform_stretch(self):
        F = np.tile(1.1 * np.eye(3), (1, 1, 1))
        f0 = np.array([[0.0, 1.0, 0.0]])
        assert compute_sl(F, f0, 1.9)[0] == pytest.approx(2.09)

    def test_constant_deformation_zero_rate(self):
        F = np.tile(1.05 * np.eye(3), (4, 1, 1))
        f0 = np.tile([1.0, 0, 0], (4, 1))
        sl1 = compute_sl(F, f0, 1.9)
        sl2 = compute_sl(F, f0, 1.9)
        assert np.all((sl2 - sl1) == 0.0)


class TestKinetics:
    def test_no_calcium_no_activation(self):
        st = ActivationState.zeros(3)
        out = step_activation(st, constant_inputs(3, 0.0, 2.2), 1e-3,
                              VENTRICULAR_ACTIVATION)
        assert np.all(out.p == 0.0)
        assert np.all(out.m0 == 0.0)
        assert np.all(out.m1 == 0.0)

    def test_steady_state_matches_long_ode_run(self):
        params = VENTRICULAR_ACTIVATION
        inputs = constant_inputs(1, 0.1, 2.2)
        st = ActivationState.zeros(1)
        for _ in range(40000):
            st = step_activation(st, inputs, 5e-4, params)
        ss = steady_state(params, 0.1, 2.2)
        assert st.p[0] == pytest.approx(ss.p[0], rel=1e-6, abs=1e-12)
        assert st.m0[0] == pytest.approx(ss.m0[0], rel=1e-6, abs=1e-12)
        assert st.m1[0] == pytest.approx(ss.m1[0], rel=1e-6, abs=1e-12)

    def test_steady_tension_reproducible_bit_identical(self):
        params = ATRIAL_ACTIVATION
        runs = []
        for _ in range(2):
            st = ActivationState.zeros(1)
            for _ in range(2000):
                st = step_activation(st, constant_inputs(1, 0.1, 2.2), 1e-3, params)
            runs.append(active_tension(st, np.full(1, 2.2), 1.0, params)[0])
        assert runs[0] == runs[1]

    def test_ranges_preserved(self):
        rng = np.random.default_rng(5)
        st = ActivationState(rng.uniform(0, 1, 20), rng.uniform(0, 0.3, 20),
                             rng.uniform(-0.01, 0.01, 20))
        inputs = SarcomereInputs(rng.uniform(0, 2, 20), rng.uniform(1.7, 2.3, 20),
                                 rng.uniform(-2, 2, 20))
        out = step_activation(st, inputs, 1e-3, VENTRICULAR_ACTIVATION)
        out.check_ranges()

    def test_doubling_gamma_steepens_hill_curve(self):
        ca = np.logspace(-1.2, 0.5, 60)

        def hill_slope(params):
            t = steady_state(params, ca, 2.2).p
            # max log-log slope of p/(1-p) equals the Hill coefficient
            y = np.clip(t, 1e-12, 1 - 1e-12)
            lr = np.log(y / (1 - y))
            return np.max(np.diff(lr) / np.diff(np.log(ca)))

        base = hill_slope(VENTRICULAR_ACTIVATION)
        import dataclasses

        steeper = hill_slope(dataclasses.replace(VENTRICULAR_ACTIVATION, gamma=60.0))
        assert steeper > 1.5 * base

    def test_monotone_in_calcium(self):
        ca = np.logspace(-2, 1, 40)
        for params in (VENTRICULAR_ACTIVATION, ATRIAL_ACTIVATION):
            st = steady_state(params, ca, 2.2)
            ta = active_tension(st, np.full_like(ca, 2.2), 1.0, params)
            assert np.all(np.diff(ta) >= -1e-15)

    def test_dt_positive_required(self):
        with pytest.raises(ConfigError):
            step_activation(ActivationState.zeros(1), constant_inputs(1, 0.1, 2.0),
                            0.0, VENTRICULAR_ACTIVATION)


class TestTension:
    def test_zero_state_zero_tension(self):
        st = ActivationState.zeros(2)
        assert np.all(active_tension(st, np.full(2, 2.0), A_XB_LV_PA,
                                     VENTRICULAR_ACTIVATION) == 0.0)
        assert np.all(crossbridge_stiffness(st, A_XB_LV_PA) == 0.0)

    def test_linear_in_contractility(self):
        st = steady_state(VENTRICULAR_ACTIVATION, 0.6, 2.2)
        t1 = active_tension(st, np.full(1, 2.2), 1e6, VENTRICULAR_ACTIVATION)
        t2 = active_tension(st, np.full(1, 2.2), 2e6, VENTRICULAR_ACTIVATION)
        assert t2[0] == pytest.approx(2 * t1[0], rel=1e-14)
        k1 = crossbridge_stiffness(st, 1e6)
        k2 = crossbridge_stiffness(st, 2e6)
        assert k2[0] == pytest.approx(2 * k1[0], rel=1e-14)

    def test_shortening_lowers_tension(self):
        params = VENTRICULAR_ACTIVATION
        inputs_hold = constant_inputs(1, 0.8, 2.2, dsl=0.0)
        inputs_short = constant_inputs(1, 0.8, 2.2, dsl=-1.0)
        st_hold = ActivationState.zeros(1)
        st_short = ActivationState.zeros(1)
        for _ in range(3000):
            st_hold = step_activation(st_hold, inputs_hold, 1e-3, params)
            st_short = step_activation(st_short, inputs_short, 1e-3, params)
        ta_hold = active_tension(st_hold, np.full(1, 2.2), 1.0, params)[0]
        ta_short = active_tension(st_short, np.full(1, 2.2), 1.0, params)[0]
        assert ta_short < ta_hold

    def test_tension_nondecreasing_in_stretch_rate(self):
        # force-velocity orientation: faster shortening (more negative rate)
        # must never increase the developed tension
        params = VENTRICULAR_ACTIVATION
        rates = [-2.0, -1.0, 0.0, 1.0]
        tensions = []
        for r in rates:
            st = steady_state(params, 0.8, 2.2, dsl_dt_um_per_s=r)
            tensions.append(active_tension(st, np.full(1, 2.2), 1.0, params)[0])
        assert np.all(np.diff(tensions) >= 0)

    def test_stiffness_positive_with_tension(self):
        params = VENTRICULAR_ACTIVATION
        st = ActivationState.zeros(1)
        for k in range(600):
            ca = 0.1 + 0.7 * np.sin(np.pi * k / 600) ** 2
            st = step_activation(st, constant_inputs(1, ca, 2.1), 1e-3, params)
            ta = active_tension(st, np.full(1, 2.1), 1.0, params)[0]
            ks = crossbridge_stiffness(st, 1.0)[0]
            if ta > 1e-12:
                assert ks > 0.0


class TestContractility:
    def test_lv_value(self):
        assert build_contractility_field(np.array([1.0]), A_XB_LV_PA, 0.7)[0] == 15.0e8

    def test_rv_value_from_ratio(self):
        c_lrv = A_XB_RV_PA / A_XB_LV_PA
        out = build_contractility_field(np.array([0.0]), A_XB_LV_PA, c_lrv)
        assert out[0] == pytest.approx(10.5e8)

    def test_affine_midpoint(self):
        out = build_contractility_field(np.array([0.5]), A_XB_LV_PA, 0.7)
        assert out[0] == pytest.approx(12.75e8)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            build_contractility_field(np.array([1.5]), A_XB_LV_PA, 0.7)
