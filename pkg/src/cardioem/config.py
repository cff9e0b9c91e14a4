"""Structured run configuration.

Every physical quantity key carries an explicit unit suffix; a bare TOML
file with no overrides reproduces the tabulated defaults (conductivities,
stimulation protocol, force-generation constants, material moduli,
circulation parameters, solver tolerances).  Unknown keys are refused
with the offending key path and, when locatable, its line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from cardioem.errors import ConfigError


@dataclass
class Toggles:
    atrial_contraction: bool = True
    stretch_rate_feedback: bool = True
    stab_active_stress: bool = True
    stab_circulation: bool = True
    mef: bool = False


@dataclass
class SimulationConfig:
    beats: int = 1
    dt_us: float = 1000.0
    tau_us: float = 50.0
    t_hb_s: float = 0.8
    toggles: Toggles = field(default_factory=Toggles)
    threads: int = 1

    def __post_init__(self):
        n_sub = self.dt_us / self.tau_us
        if abs(n_sub - round(n_sub)) > 1e-9 or round(n_sub) < 1:
            raise ConfigError(
                f"dt ({self.dt_us} us) must be an exact positive multiple of "
                f"tau ({self.tau_us} us)"
            )

    @property
    def n_sub(self):
        return int(round(self.dt_us / self.tau_us))

    @property
    def dt_s(self):
        return self.dt_us * 1e-6

    @property
    def tau_s(self):
        return self.tau_us * 1e-6


@dataclass
class GeometryConfig:
    kind: str = "toy-two-chamber"
    resolution_m: float = 1.2e-2
    dimensions_m: dict = field(default_factory=dict)


@dataclass
class EpConfig:
    sigma_v_fast_m2_per_s: list = field(default_factory=lambda: [8.00e-4, 4.40e-4, 2.20e-4])
    sigma_v_myo_m2_per_s: list = field(default_factory=lambda: [2.00e-4, 1.10e-4, 0.55e-4])
    sigma_a_m2_per_s: list = field(default_factory=lambda: [7.00e-4, 1.41e-4, 1.41e-4])
    fast_layer_eps: float = 0.05
    chi_m_per_m: float = 1.0
    c_m_F_per_m2: float = 1.0
    solver_method: str = "direct"        # direct | CG
    solver_abs_tol: float = 1e-10


@dataclass
class StimulusConfig:
    center_m: list = None                # explicit point, or null for site-based
    site: str = ""                       # "atrium" | "ventricle-endo" | ...
    radius_m: float = 3e-3
    start_ms: float = 0.0
    duration_ms: float = 3.0
    amplitude_V_per_s: float = 25.71
    period_s: float = 0.8


def default_stimulus_protocol():
    """Tabulated timing: atria at 0; LV endo at 160 ms, RV at 165/172 ms."""
    return [
        StimulusConfig(site="atrium", start_ms=0.0),
        StimulusConfig(site="lv-endo", start_ms=160.0),
        StimulusConfig(site="rv-endo", start_ms=165.0),
        StimulusConfig(site="rv-endo-late", start_ms=172.0),
    ]


@dataclass
class IonicConfig:
    model: str = "reduced"
    n_init_cycles: int = 10              # 1000-cycle protocol available via config
    init_dt_ms: float = 0.25
    params: dict = field(default_factory=dict)


@dataclass
class ActivationRegionConfig:
    sl0_um: float = 1.9
    k_d_uM: float = 0.36
    alpha_kd_uM_per_um: float = -0.2083
    gamma: float = 30.0
    k_off_per_s: float = 8.0
    k_basic_per_s: float = 4.0
    mu0_fp_per_s: float = 32.225
    mu1_fp_per_s: float = 0.768
    mu0_gp_per_s: float = 100.0


def default_atrial_activation():
    return ActivationRegionConfig(
        k_d_uM=0.865, alpha_kd_uM_per_um=-1.25, gamma=20.0,
        k_off_per_s=180.0, k_basic_per_s=20.0,
    )


@dataclass
class ContractilityConfig:
    a_xb_lv_Pa: float = 15.0e8
    a_xb_rv_Pa: float = 10.5e8
    a_xb_la_Pa: float = 30.0e7
    a_xb_ra_Pa: float = 30.0e7
    scale: float = 1.0                   # desk-scale knob applied to all four


@dataclass
class MechanicsConfig:
    bulk_Pa: float = 50e3
    b_ff: float = 8.0
    b_ss: float = 6.0
    b_nn: float = 3.0
    b_fs: float = 12.0
    b_fn: float = 3.0
    b_sn: float = 3.0
    c_v_Pa: float = 0.88e3
    c_ra_Pa: float = 1.47e3
    c_la_Pa: float = 1.76e3
    mu_valve_caps_Pa: float = 10e5
    kappa_valve_caps_Pa: float = 50e5
    mu_vessels_Pa: float = 5.25e5
    kappa_vessels_Pa: float = 10e5
    rho_kg_per_m3: float = 1e3
    share_f: float = 1.0
    share_s: float = 0.0
    share_n: float = 0.4
    k_perp_pf_Pa_per_m: float = 2e5
    c_perp_pf_Pa_s_per_m: float = 2e3
    k_perp_eat_Pa_per_m: float = 2e2
    c_perp_eat_Pa_s_per_m: float = 2e0
    newton_rel_tol: float = 1e-8
    newton_abs_tol: float = 1e-6
    stiffness_scale: float = 1.0         # desk-scale benchmark knob


@dataclass
class ReferenceRecoveryConfig:
    p_ra_Pa: float = 900.0
    p_la_Pa: float = 1200.0
    p_rv_Pa: float = 650.0
    p_lv_Pa: float = 1150.0
    p_ao_Pa: float = 9500.0
    p_pt_Pa: float = 1700.0
    scale: float = 1.0


@dataclass
class CirculationConfig:
    r_ar_sys_mmHg_s_per_mL: float = 0.48
    r_ar_pul_mmHg_s_per_mL: float = 0.032116
    r_ven_sys_mmHg_s_per_mL: float = 0.26
    r_ven_pul_mmHg_s_per_mL: float = 0.035684
    c_ar_sys_mL_per_mmHg: float = 1.50
    c_ar_pul_mL_per_mmHg: float = 10.0
    c_ven_sys_mL_per_mmHg: float = 60.0
    c_ven_pul_mL_per_mmHg: float = 16.0
    l_ar_sys_mmHg_s2_per_mL: float = 5e-3
    l_ar_pul_mmHg_s2_per_mL: float = 5e-4
    l_ven_sys_mmHg_s2_per_mL: float = 5e-4
    l_ven_pul_mmHg_s2_per_mL: float = 5e-4
    r_min_mmHg_s_per_mL: float = 0.0075
    r_max_mmHg_s_per_mL: float = 75000.0
    paper_literal_branches: bool = False
    initial_state: list = None

    def params(self):
        from cardioem.circulation import CircParams

        return CircParams(
            R_AR_SYS=self.r_ar_sys_mmHg_s_per_mL,
            R_AR_PUL=self.r_ar_pul_mmHg_s_per_mL,
            R_VEN_SYS=self.r_ven_sys_mmHg_s_per_mL,
            R_VEN_PUL=self.r_ven_pul_mmHg_s_per_mL,
            C_AR_SYS=self.c_ar_sys_mL_per_mmHg,
            C_AR_PUL=self.c_ar_pul_mL_per_mmHg,
            C_VEN_SYS=self.c_ven_sys_mL_per_mmHg,
            C_VEN_PUL=self.c_ven_pul_mL_per_mmHg,
            L_AR_SYS=self.l_ar_sys_mmHg_s2_per_mL,
            L_AR_PUL=self.l_ar_pul_mmHg_s2_per_mL,
            L_VEN_SYS=self.l_ven_sys_mmHg_s2_per_mL,
            L_VEN_PUL=self.l_ven_pul_mmHg_s2_per_mL,
            R_min=self.r_min_mmHg_s_per_mL,
            R_max=self.r_max_mmHg_s_per_mL,
            paper_literal_branches=self.paper_literal_branches,
        )


@dataclass
class FiberRuleConfig:
    alpha_endo_deg: float = 60.0
    alpha_epi_deg: float = -60.0
    beta_endo_deg: float = 0.0
    beta_epi_deg: float = 0.0


@dataclass
class OutputConfig:
    directory: str = "out"
    vtk_stride: int = 0                 # 0 disables VTK snapshots
    write_traces: bool = True


@dataclass
class RunConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    ep: EpConfig = field(default_factory=EpConfig)
    stimuli: list = field(default_factory=default_stimulus_protocol)
    ionic_atria: IonicConfig = field(default_factory=IonicConfig)
    ionic_ventricles: IonicConfig = field(default_factory=IonicConfig)
    activation_atria: ActivationRegionConfig = field(default_factory=default_atrial_activation)
    activation_ventricles: ActivationRegionConfig = field(default_factory=ActivationRegionConfig)
    contractility: ContractilityConfig = field(default_factory=ContractilityConfig)
    mechanics: MechanicsConfig = field(default_factory=MechanicsConfig)
    reference_recovery: ReferenceRecoveryConfig = field(default_factory=ReferenceRecoveryConfig)
    circulation: CirculationConfig = field(default_factory=CirculationConfig)
    fibers: FiberRuleConfig = field(default_factory=FiberRuleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTION_KEYS = {
    "ionic.atria": "ionic_atria",
    "ionic.ventricles": "ionic_ventricles",
    "activation.atria": "activation_atria",
    "activation.ventricles": "activation_ventricles",
    "activation.contractility": "contractility",
}


def _find_line(text, key):
    if text is None:
        return None
    short = key.split(".")[-1]
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#")[0]
        if stripped.strip().startswith(short) or f"[{key}]" in stripped:
            return i
    return None


def _apply(obj, data, path, text):
    if dataclasses.is_dataclass(obj) and isinstance(data, dict):
        fields = {f.name: f for f in dataclasses.fields(obj)}
        for key, value in data.items():
            if key not in fields:
                line = _find_line(text, f"{path}.{key}".lstrip("."))
                where = f" (line {line})" if line else ""
                raise ConfigError(
                    f"unknown config key {(path + '.' + key).lstrip('.')!r}{where}; "
                    f"known keys: {sorted(fields)}"
                )
            cur = getattr(obj, key)
            if dataclasses.is_dataclass(cur) and isinstance(value, dict):
                _apply(cur, value, f"{path}.{key}", text)
            else:
                setattr(obj, key, value)
        return obj
    raise ConfigError(f"section {path!r} must be a table")


def load_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig; defaults encode the tabulated parameters exactly."""
    cfg = RunConfig()
    text = None
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config parse failure in {path}: {e}")
    if overrides:
        data = _merge(data, overrides)

    # flatten the nested section spellings used in config files
    for dotted, attr in _SECTION_KEYS.items():
        outer, inner = dotted.split(".")
        if outer in data and inner in data.get(outer, {}):
            data.setdefault(attr, data[outer].pop(inner))
    for leftover in ("ionic", "activation"):
        if leftover in data:
            if data[leftover]:
                key = next(iter(data[leftover]))
                raise ConfigError(
                    f"unknown config section {leftover}.{key!r}"
                )
            del data[leftover]

    if "stimuli" in data:
        stims = data.pop("stimuli")
        cfg.stimuli = []
        for i, s in enumerate(stims):
            sc = StimulusConfig()
            _apply(sc, s, f"stimuli[{i}]", text)
            cfg.stimuli.append(sc)

    _apply(cfg, data, "", text)
    # re-run validation on the simulation block
    SimulationConfig(**{f.name: getattr(cfg.simulation, f.name)
                        for f in dataclasses.fields(SimulationConfig)})
    return cfg


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def ablate(cfg: RunConfig, feature: str) -> RunConfig:
    """Copy of the config with exactly one toggle flipped off."""
    import copy

    known = {f.name for f in dataclasses.fields(Toggles)}
    name = feature.replace("-", "_")
    if name.startswith("no_"):
        name = name[3:]
    if name not in known:
        raise ConfigError(f"unknown ablation feature {feature!r}; known: {sorted(known)}")
    out = copy.deepcopy(cfg)
    setattr(out.simulation.toggles, name, False)
    return out
