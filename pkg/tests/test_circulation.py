"""Closed-loop 0D model: valves, conservation, limit cycles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioem.circulation import (
    CHAMBERS,
    IDX,
    CircParams,
    Trace,
    TRACE_HEADER,
    chamber_net_inflow,
    chamber_net_inflow_jacobian,
    circ_rhs,
    default_elastances,
    default_initial_state,
    read_trace_csv,
    run_0d,
    step_circulation,
    total_stressed_volume,
    valve_flux,
)
from cardioem.errors import ConfigError


class TestValveFlux:
    def test_zero_at_equal_pressures(self):
        assert valve_flux(10.0, 10.0, 0.0075, 75000.0) == 0.0

    def test_open_flow_table_values(self):
        assert float(valve_flux(17.5, 10.0, 0.0075, 75000.0)) == pytest.approx(1000.0)

    def test_closed_leak_table_values(self):
        assert float(valve_flux(0.0, 75.0, 0.0075, 75000.0)) == pytest.approx(-1e-3)

    def test_paper_literal_branch_swaps(self):
        open_flow = float(valve_flux(17.5, 10.0, 0.0075, 75000.0, paper_literal=True))
        assert open_flow == pytest.approx(7.5 / 75000.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-100, 100, allow_nan=False))
    def test_continuity_at_switch(self, dp):
        eps = 1e-9
        up = float(valve_flux(dp + eps, 0.0, 0.0075, 75000.0))
        down = float(valve_flux(dp - eps, 0.0, 0.0075, 75000.0))
        if abs(dp) > 2 * eps:
            assert abs(up - down) <= 1.1 * (2 * eps / 0.0075) + 1e-10 * abs(dp)
        else:
            # across the switch the flux is continuous at 0
            assert abs(up) <= 1.1 * (2 * eps / 0.0075)
            assert abs(down) <= 1.1 * (2 * eps / 0.0075)


def random_state_and_pressures(seed):
    rng = np.random.default_rng(seed)
    c = np.concatenate([
        rng.uniform(20, 200, 4),      # volumes
        rng.uniform(1, 120, 4),       # compartment pressures
        rng.uniform(-200, 600, 4),    # fluxes
    ])
    p = {k: float(rng.uniform(0, 130)) for k in CHAMBERS}
    return c, p


class TestCircRhs:
    def test_global_equilibrium(self):
        params = CircParams()
        c = default_initial_state()
        c[4:8] = 10.0
        c[8:] = 0.0
        p = {k: 10.0 for k in CHAMBERS}
        d = circ_rhs(0.0, c, p, params)
        assert np.allclose(d, 0.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_volume_flux_telescoping(self, seed):
        params = CircParams()
        c, p = random_state_and_pressures(seed)
        d = circ_rhs(0.0, c, p, params)
        total = (
            d[IDX["V_RA"]] + d[IDX["V_LA"]] + d[IDX["V_RV"]] + d[IDX["V_LV"]]
            + params.C_AR_SYS * d[IDX["p_AR_SYS"]]
            + params.C_VEN_SYS * d[IDX["p_VEN_SYS"]]
            + params.C_AR_PUL * d[IDX["p_AR_PUL"]]
            + params.C_VEN_PUL * d[IDX["p_VEN_PUL"]]
        )
        scale = np.abs(d[:4]).max() + 1.0
        assert abs(total) <= 1e-10 * scale

    def test_matches_independent_transcription(self):
        # independent hand transcription of the twelve equations
        params = CircParams()
        c, p = random_state_and_pressures(123)

        def vflux(p1, p2):
            return (p1 - p2) / (params.R_min if p1 >= p2 else params.R_max)

        (V_RA, V_LA, V_RV, V_LV, pas, pvs, pap, pvp, qas, qvs, qap, qvp) = c
        q_tv = vflux(p["RA"], p["RV"])
        q_mv = vflux(p["LA"], p["LV"])
        q_pv = vflux(p["RV"], pap)
        q_av = vflux(p["LV"], pas)
        expected = np.array([
            qvs - q_tv,
            qvp - q_mv,
            q_tv - q_pv,
            q_mv - q_av,
            (q_av - qas) / params.C_AR_SYS,
            (qas - qvs) / params.C_VEN_SYS,
            (q_pv - qap) / params.C_AR_PUL,
            (qap - qvp) / params.C_VEN_PUL,
            (params.R_AR_SYS / params.L_AR_SYS) * (-qas - (pvs - pas) / params.R_AR_SYS),
            (params.R_VEN_SYS / params.L_VEN_SYS) * (-qvs - (p["RA"] - pvs) / params.R_VEN_SYS),
            (params.R_AR_PUL / params.L_AR_PUL) * (-qap - (pvp - pap) / params.R_AR_PUL),
            (params.R_VEN_PUL / params.L_VEN_PUL) * (-qvp - (p["LA"] - pvp) / params.R_VEN_PUL),
        ])
        got = circ_rhs(0.0, c, p, params)
        assert np.allclose(got, expected, rtol=1e-14, atol=1e-14)


class TestStep:
    def test_equilibrium_unchanged(self):
        params = CircParams()
        c = default_initial_state()
        c[4:8] = 10.0
        c[8:] = 0.0
        p = {k: 10.0 for k in CHAMBERS}
        out = step_circulation(c, p, 1e-3, params)
        assert np.allclose(out, c, atol=1e-14)

    def test_first_order_in_dt(self):
        params = CircParams()
        c, p = random_state_and_pressures(7)
        d = circ_rhs(0.0, c, p, params)
        out = step_circulation(c, p, 1e-4, params)
        assert np.allclose(out, c + 1e-4 * d, rtol=1e-14)

    def test_dt_positive(self):
        with pytest.raises(ConfigError):
            step_circulation(default_initial_state(), {k: 0.0 for k in CHAMBERS}, 0.0,
                             CircParams())


class TestConservation:
    def test_stressed_volume_arithmetic(self):
        params = CircParams()
        c = np.zeros(12)
        c[:4] = 10.0
        assert total_stressed_volume(c, params) == pytest.approx(40.0)
        c[IDX["p_AR_SYS"]] += 2.0
        assert total_stressed_volume(c, params) == pytest.approx(40.0 + params.C_AR_SYS * 2.0)

    def test_exact_conservation_over_20_beats(self):
        params = CircParams()
        elast = default_elastances()
        dt = 1e-3
        c = default_initial_state()
        v0 = total_stressed_volume(c, params)
        worst = 0.0
        t = 0.0
        for _ in range(int(20 * 0.8 / dt)):
            p = {k: elast[k].pressure(t, c[IDX[f"V_{k}"]]) for k in CHAMBERS}
            c2 = step_circulation(c, p, dt, params, t)
            worst = max(worst, abs(total_stressed_volume(c2, params)
                                   - total_stressed_volume(c, params)))
            c = c2
            t += dt
        assert worst <= 1e-8
        assert abs(total_stressed_volume(c, params) - v0) <= 1e-6


class TestRun0d:
    def test_constant_elastance_decays_to_equilibrium(self):
        from cardioem.circulation import ElastanceChamber

        params = CircParams()
        elast = {
            k: ElastanceChamber(0.2, 0.0, 5.0, 0.0, 0.1, 0.1) for k in CHAMBERS
        }
        # slowest mode ~ venous R*C (tens of seconds): check exponential decay
        tr = run_0d(params, elast, 80.0, 2e-3)
        arr = tr.array()
        cols = TRACE_HEADER.split(",")
        for q in ("Q_AR_SYS", "Q_VEN_SYS", "Q_AR_PUL", "Q_VEN_PUL"):
            col = np.abs(arr[:, cols.index(q)])
            early = col[: len(col) // 8].max()
            late = col[-len(col) // 8 :].max()
            assert late < 0.02 * max(early, 1e-9) + 1e-6

    def test_limit_cycle_within_20_beats(self):
        params = CircParams()
        tr = run_0d(params, default_elastances(), 20 * 0.8, 1e-3)
        arr = tr.array()
        per = int(0.8 / 1e-3)
        last = arr[-per:, 1:13]
        prev = arr[-2 * per:-per, 1:13]
        num = np.linalg.norm(last - prev)
        den = np.linalg.norm(prev)
        assert num / den < 1e-3

    def test_zero_elastance_variation_no_net_flow(self):
        from cardioem.circulation import ElastanceChamber

        params = CircParams()
        elast = {k: ElastanceChamber(0.15, 0.0, 5.0, 0.0, 0.1, 0.1) for k in CHAMBERS}
        tr = run_0d(params, elast, 30.0, 1e-3)
        per = int(0.8 / 1e-3)
        q_av = tr.column("Q_AV")[-per:]
        assert abs(np.trapz(q_av, dx=1e-3)) < 1e-3  # no stroke volume

    def test_valve_rectification_in_periodic_regime(self):
        params = CircParams()
        tr = run_0d(params, default_elastances(), 20 * 0.8, 1e-3)
        per = int(0.8 / 1e-3)
        for name in ("Q_TV", "Q_MV", "Q_PV", "Q_AV"):
            q = tr.column(name)[-per:]
            assert np.trapz(q, dx=1e-3) >= 0.0

    def test_physiological_pressures(self):
        params = CircParams()
        tr = run_0d(params, default_elastances(), 20 * 0.8, 1e-3)
        per = int(0.8 / 1e-3)
        p_lv = tr.column("p_LV")[-per:]
        assert 60.0 < p_lv.max() < 220.0

    def test_missing_chamber_rejected(self):
        el = default_elastances()
        del el["LV"]
        with pytest.raises(ConfigError):
            run_0d(CircParams(), el, 1.0, 1e-3)


class TestTraceCsv:
    def test_header_exact_and_round_trip(self, tmp_path):
        params = CircParams()
        tr = run_0d(params, default_elastances(), 0.05, 1e-3)
        path = tmp_path / "trace.csv"
        tr.write_csv(path)
        first = path.read_text().splitlines()[0]
        assert first == TRACE_HEADER
        back = read_trace_csv(path)
        assert np.allclose(back.array(), tr.array(), rtol=1e-10)


class TestCouplingHelpers:
    def test_net_inflow_matches_rhs_volume_rows(self):
        params = CircParams()
        c, p = random_state_and_pressures(99)
        net = chamber_net_inflow(params, c, p)
        d = circ_rhs(0.0, c, p, params)
        assert net["RA"] == pytest.approx(d[IDX["V_RA"]])
        assert net["LA"] == pytest.approx(d[IDX["V_LA"]])
        assert net["RV"] == pytest.approx(d[IDX["V_RV"]])
        assert net["LV"] == pytest.approx(d[IDX["V_LV"]])

    def test_jacobian_matches_finite_differences(self):
        params = CircParams()
        c, p = random_state_and_pressures(5)
        J = chamber_net_inflow_jacobian(params, c, p)
        # large step avoids cancellation on the closed-valve conductances;
        # all pressure gaps for this seed are tens of mmHg, far from kinks
        h = 1e-2
        for j in CHAMBERS:
            pp = dict(p)
            pm = dict(p)
            pp[j] += h
            pm[j] -= h
            up = chamber_net_inflow(params, c, pp)
            dn = chamber_net_inflow(params, c, pm)
            for k in CHAMBERS:
                fd = (up[k] - dn[k]) / (2 * h)
                assert J[k][j] == pytest.approx(fd, rel=1e-6, abs=1e-9)
