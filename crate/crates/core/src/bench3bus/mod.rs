//! Three-bus benchmark: a grid-forming VSM converter and a grid-following
//! converter feed a resistive load next to a Thevenin grid.
//!
//! All quantities are SI in a frame rotating at the nominal frequency, so
//! every angle is measured relative to that frame.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    current_control_block, droop_q_block, frame_rotation_block, lift_trig, pll_block, power_block, pq_control_block,
    resistive_load_block, rl_branch_block, rotation_block, virtual_admittance_block, vsm_block, AdmittanceInput, Base,
    CurrentControlParams, DampingSign, IntegralGain, DroopParams, LoadParams, PllParams, PowerParams, PqParams, RlBranchParams,
    RotatedPair, SendingEnd, TrigLift, VirtualAdmittanceParams, VsmParams,
};
use crate::cpn1::{compose, var, Cpn1Model, ModelBuilder, Poly, SignalVector};
use crate::dae::{consistent_init_with, InitOptions};
use crate::error::{Error, Result};
use crate::linearize::{EquilibriumTol, OperatingPoint};

pub mod nti;
mod scenario;
mod sweep;

pub use scenario::{
    compare_series, run_scenario, simulate_descriptor, terminal_offset, BenchEvent, Deviation, Scenario, ScenarioReport,
    ScenarioResult, Series, SignalDeviation, MONITORED,
};
pub use sweep::{
    bifurcation_sweep, envelope_growth, linear_grid, refine_crossing, sweep_point, HopfCrossing, SweepPoint, SweepResult,
};

/// Input names in model order.
pub const INPUTS: [&str; 6] = ["p_ref_gfm", "q_ref_gfm", "omega_ref", "v_ref", "p_ref_gfl", "q_ref_gfl"];

const GFM_STATES: [&str; 9] =
    ["gfm_omega", "gfm_theta", "gfm_zc", "gfm_zs", "gfm_xq", "gfm_xva_d", "gfm_xva_q", "gfm_xi_d", "gfm_xi_q"];
const GFL_STATES: [&str; 9] =
    ["gfl_z1", "gfl_z2", "gfl_z3", "gfl_theta", "gfl_xp", "gfl_xq", "gfl_xi_d", "gfl_xi_q", "theta_g"];
const GRID_STATES: [&str; 8] = ["ig_D", "ig_Q", "igfm_D", "igfm_Q", "igfl_D", "igfl_Q", "zcg", "zsg"];

/// Converter set-points and the voltage reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct References {
    /// Per-unit.
    pub p_ref_gfm: f64,
    /// var.
    pub q_ref_gfm: f64,
    /// Per-unit.
    pub omega_ref: f64,
    /// Peak phase voltage, V.
    pub v_ref: f64,
    /// Per-unit.
    pub p_ref_gfl: f64,
    /// Per-unit.
    pub q_ref_gfl: f64,
}

impl Default for References {
    fn default() -> Self {
        Self { p_ref_gfm: 0.4, q_ref_gfm: 0.0, omega_ref: 1.0, v_ref: Base::default().v_peak(), p_ref_gfl: 0.4, q_ref_gfl: 0.0 }
    }
}

impl References {
    pub fn values(&self) -> [f64; 6] {
        [self.p_ref_gfm, self.q_ref_gfm, self.omega_ref, self.v_ref, self.p_ref_gfl, self.q_ref_gfl]
    }

    pub fn with_p_ref(&self, target: SweepTarget, p: f64) -> Self {
        let mut r = self.clone();
        if matches!(target, SweepTarget::Both | SweepTarget::Gfm) {
            r.p_ref_gfm = p;
        }
        if matches!(target, SweepTarget::Both | SweepTarget::Gfl) {
            r.p_ref_gfl = p;
        }
        r
    }
}

/// Complete parameter set of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub base: Base,
    pub scr: f64,
    pub x_over_r: f64,
    /// Converter filter resistance, per-unit.
    pub r_f_pu: f64,
    /// Converter filter inductance, per-unit.
    pub l_f_pu: f64,
    /// Load resistance, Ω.
    pub r_load: f64,
    /// Multiplier on the Thevenin source magnitude `v_peak`.
    pub source_scale: f64,
    pub vsm: VsmParams,
    pub droop: DroopParams,
    pub admittance: VirtualAdmittanceParams,
    pub current: CurrentControlParams,
    pub pll: PllParams,
    pub pq: PqParams,
    pub power: PowerParams,
    pub references: References,
}

impl Default for BenchParams {
    fn default() -> Self {
        let base = Base::default();
        Self {
            base,
            scr: 5.0,
            x_over_r: 10.0,
            r_f_pu: 0.02,
            l_f_pu: 0.07,
            r_load: base.z() / 0.8,
            source_scale: 1.0,
            vsm: VsmParams { frame: 1.0, damping: DampingSign::Restoring, omega_b: base.omega(), s_b: base.s_b, ..VsmParams::default() },
            droop: DroopParams::default(),
            admittance: VirtualAdmittanceParams {
                input: AdmittanceInput::VoltageError,
                omega_b: base.omega(),
                ..VirtualAdmittanceParams::default()
            },
            current: CurrentControlParams { l_f: 0.07 * base.l(), omega_b: base.omega(), integral: IntegralGain::Single, ..CurrentControlParams::default() },
            pll: PllParams { k_p: 1.065e-4, k_i: 0.0011 },
            pq: PqParams { s_b: base.s_b, ..PqParams::default() },
            power: PowerParams::default(),
            references: References { v_ref: base.v_peak(), ..References::default() },
        }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scr", self.scr),
            ("x_over_r", self.x_over_r),
            ("r_f_pu", self.r_f_pu),
            ("l_f_pu", self.l_f_pu),
            ("r_load", self.r_load),
            ("source_scale", self.source_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter { name: name.into(), value: v, reason: "must be positive" });
            }
        }
        if self.references.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("references".into()));
        }
        Ok(())
    }

    /// Thevenin source magnitude, V.
    pub fn source_voltage(&self) -> f64 {
        self.source_scale * self.base.v_peak()
    }

    /// Filter `(r, l)` of the converter branches.
    pub fn filter(&self) -> (f64, f64) {
        (self.r_f_pu * self.base.z(), self.l_f_pu * self.base.l())
    }

    pub fn thevenin(&self) -> (f64, f64) {
        self.base.thevenin(self.scr, self.x_over_r)
    }
}

/// Which converters are included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assembly {
    #[default]
    Full,
    GfmOnly,
    GflOnly,
}

/// Model dimensions `(n, m, p + q, R, N_φ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n: usize,
    pub m: usize,
    pub p_plus_q: usize,
    pub r: usize,
    pub n_phi: usize,
}

impl Assembly {
    /// Expected dimensions of each assembly.
    pub fn reference_counts(self) -> Counts {
        match self {
            Assembly::Full => Counts { n: 26, m: 6, p_plus_q: 32, r: 165, n_phi: 58 },
            Assembly::GfmOnly => Counts { n: 16, m: 6, p_plus_q: 17, r: 87, n_phi: 33 },
            Assembly::GflOnly => Counts { n: 15, m: 6, p_plus_q: 17, r: 95, n_phi: 32 },
        }
    }
}

/// Assembled benchmark model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCase {
    pub assembly: Assembly,
    pub composite: Cpn1Model,
    pub params: BenchParams,
    /// State names of each subsystem (`gfm`, `gfl`, `grid`).
    pub groups: Vec<(String, Vec<String>)>,
}

impl NetworkCase {
    pub fn counts(&self) -> Counts {
        let p = self.composite.partition();
        Counts { n: p.n(), m: p.m(), p_plus_q: p.p() + p.q(), r: self.composite.r(), n_phi: self.composite.n_eq() }
    }

    pub fn group(&self, name: &str) -> Option<&[String]> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, s)| s.as_slice())
    }

    /// Same assembly with other parameters (same partition).
    pub fn with_params(&self, params: BenchParams) -> Result<Self> {
        assemble(&params, self.assembly)
    }
}

fn with_prefix(prefix: &str, local: &[(&str, &str)]) -> Vec<(String, String)> {
    local.iter().map(|(a, b)| (a.to_string(), format!("{prefix}{b}"))).collect()
}

fn map_block(model: Cpn1Model, map: Vec<(String, String)>) -> Result<Cpn1Model> {
    let lookup: HashMap<String, String> = map.into_iter().collect();
    let p = model.partition();
    for i in p.state_range().start..p.nv() {
        if !lookup.contains_key(p.name(i)) {
            return Err(Error::InvalidModel(format!("no benchmark name for block signal `{}`", p.name(i))));
        }
    }
    model.renamed(|n| lookup.get(n).cloned().unwrap_or_else(|| n.to_string()))
}

fn rename(model: Cpn1Model, map: &[(&str, &str)]) -> Result<Cpn1Model> {
    map_block(model, map.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect())
}

fn current_control(p: &CurrentControlParams, prefix: &str, omega: &str) -> Result<Cpn1Model> {
    let mut map = with_prefix(
        prefix,
        &[
            ("x_i_d", "xi_d"),
            ("x_i_q", "xi_q"),
            ("i_ref_d", "isd"),
            ("i_ref_q", "isq"),
            ("i_d", "id"),
            ("i_q", "iq"),
            ("v_d", "vd"),
            ("v_q", "vq"),
            ("u_d", "ud"),
            ("u_q", "uq"),
        ],
    );
    map.push(("omega".into(), omega.into()));
    map_block(current_control_block(p)?, map)
}

fn power(p: &PowerParams, prefix: &str) -> Result<Cpn1Model> {
    let map = with_prefix(prefix, &[("v_d", "vd"), ("v_q", "vq"), ("i_d", "id"), ("i_q", "iq"), ("p", "p"), ("q", "q")]);
    map_block(power_block(p)?, map)
}

fn converter_branch(params: &BenchParams, prefix: &str) -> Result<Cpn1Model> {
    let (r, l) = params.filter();
    let b = rl_branch_block(&RlBranchParams { r, l, omega_g: params.base.omega(), sending: SendingEnd::Signals })?;
    let map = vec![
        ("i_D".to_string(), format!("i{prefix}D")),
        ("i_Q".to_string(), format!("i{prefix}Q")),
        ("v_k_D".to_string(), format!("{prefix}uD")),
        ("v_k_Q".to_string(), format!("{prefix}uQ")),
        ("v_l_D".to_string(), "vL_D".to_string()),
        ("v_l_Q".to_string(), "vL_Q".to_string()),
    ];
    map_block(b, map)
}

fn pair(from: (&str, &str), to: (&str, &str), inverse: bool) -> RotatedPair {
    RotatedPair { from: (from.0.into(), from.1.into()), to: (to.0.into(), to.1.into()), inverse }
}

fn gfm_blocks(params: &BenchParams) -> Result<Vec<Cpn1Model>> {
    let vsm = rename(
        vsm_block(&params.vsm)?,
        &[
            ("omega", "gfm_omega"),
            ("theta", "gfm_theta"),
            ("zc", "gfm_zc"),
            ("zs", "gfm_zs"),
            ("p", "gfm_p"),
            ("p_ref", "p_ref_gfm"),
            ("omega_ref", "omega_ref"),
        ],
    )?;
    let droop = rename(
        droop_q_block(&params.droop)?,
        &[("x_qfilt", "gfm_xq"), ("q", "gfm_q"), ("q_ref", "q_ref_gfm"), ("v_ref", "v_ref"), ("vd_star", "gfm_vds")],
    )?;
    let va = rename(
        virtual_admittance_block(&VirtualAdmittanceParams { input: AdmittanceInput::VoltageError, ..params.admittance.clone() })?,
        &[
            ("x_va_d", "gfm_xva_d"),
            ("x_va_q", "gfm_xva_q"),
            ("vd_star", "gfm_vds"),
            ("vd", "gfm_vd"),
            ("vq", "gfm_vq"),
            ("i_ref_d", "gfm_isd"),
            ("i_ref_q", "gfm_isq"),
        ],
    )?;
    let cc = current_control(&params.current, "gfm_", "gfm_omega")?;
    let pw = power(&params.power, "gfm_")?;
    let rot = rotation_block(
        &TrigLift::new(None, "gfm_zc", "gfm_zs"),
        &TrigLift::new(None, "zcg", "zsg"),
        ("gfm_h1", "gfm_h2"),
        &[
            pair(("vL_D", "vL_Q"), ("gfm_vd", "gfm_vq"), false),
            pair(("igfm_D", "igfm_Q"), ("gfm_id", "gfm_iq"), false),
            pair(("gfm_ud", "gfm_uq"), ("gfm_uD", "gfm_uQ"), true),
        ],
    )?;
    Ok(vec![vsm, droop, va, cc, pw, rot])
}

/// PLL angle and frequency: `θ' = −(z3 − k_p v_q)`, `ω = 1 + θ'/ω_b`.
fn pll_frequency_block(p: &PllParams, omega_b: f64) -> Result<Cpn1Model> {
    let rate = var("gfl_z3") - p.k_p * var("gfl_vq");
    let mut b = ModelBuilder::new();
    b.state("gfl_theta").input("gfl_z3").input("gfl_vq").algebraic("gfl_wp");
    b.equation("der gfl_theta", Poly::der("gfl_theta") + rate.clone());
    b.equation("gfl_wp", var("gfl_wp") - 1.0 + (1.0 / omega_b) * rate);
    b.build()
}

fn gfl_blocks(params: &BenchParams) -> Result<Vec<Cpn1Model>> {
    let pll = rename(
        pll_block(&params.pll)?,
        &[
            ("z1", "gfl_z1"),
            ("z2", "gfl_z2"),
            ("z3", "gfl_z3"),
            ("u1", "vL_D"),
            ("u2", "vL_Q"),
            ("a1", "gfl_a1"),
            ("a2", "gfl_a2"),
        ],
    )?;
    let freq = pll_frequency_block(&params.pll, params.base.omega())?;
    let rot = frame_rotation_block(
        "gfl_z1",
        "gfl_z2",
        &[
            pair(("vL_D", "vL_Q"), ("gfl_vd", "gfl_vq"), true),
            pair(("igfl_D", "igfl_Q"), ("gfl_id", "gfl_iq"), true),
            pair(("gfl_ud", "gfl_uq"), ("gfl_uD", "gfl_uQ"), false),
        ],
    )?;
    let pw = power(&params.power, "gfl_")?;
    let pq = rename(
        pq_control_block(&params.pq)?,
        &[
            ("x_p", "gfl_xp"),
            ("x_q", "gfl_xq"),
            ("p", "gfl_p"),
            ("q", "gfl_q"),
            ("p_ref", "p_ref_gfl"),
            ("q_ref", "q_ref_gfl"),
            ("i_ref_d", "gfl_isd"),
            ("i_ref_q", "gfl_isq"),
        ],
    )?;
    let cc = current_control(&params.current, "gfl_", "gfl_wp")?;
    Ok(vec![pll, freq, rot, pw, pq, cc])
}

fn grid_blocks(params: &BenchParams, assembly: Assembly) -> Result<Vec<Cpn1Model>> {
    let lift = lift_trig(&TrigLift::new(Some("theta_g"), "zcg", "zsg"), &Poly::zero())?;
    let (r, l) = params.thevenin();
    let source = SendingEnd::Source { magnitude: params.source_voltage(), cos: "zcg".into(), sin: "zsg".into() };
    let grid = rename(
        rl_branch_block(&RlBranchParams { r, l, omega_g: params.base.omega(), sending: source })?,
        &[("i_D", "ig_D"), ("i_Q", "ig_Q"), ("zcg", "zcg"), ("zsg", "zsg"), ("v_l_D", "vL_D"), ("v_l_Q", "vL_Q")],
    )?;
    let mut out = vec![lift, grid];
    let mut currents = vec![("ig_D".to_string(), "ig_Q".to_string(), 1.0)];
    if assembly != Assembly::GflOnly {
        out.push(converter_branch(params, "gfm_")?);
        currents.push(("igfm_D".into(), "igfm_Q".into(), 1.0));
    }
    if assembly != Assembly::GfmOnly {
        out.push(converter_branch(params, "gfl_")?);
        currents.push(("igfl_D".into(), "igfl_Q".into(), 1.0));
    }
    let mut map: Vec<(String, String)> = vec![("v_D".into(), "vL_D".into()), ("v_Q".into(), "vL_Q".into())];
    for (d, q, _) in &currents {
        map.push((d.clone(), d.clone()));
        map.push((q.clone(), q.clone()));
    }
    out.push(map_block(resistive_load_block(&LoadParams { r_load: params.r_load, currents })?, map)?);
    Ok(out)
}

/// Full benchmark: GFM, GFL and grid.
pub fn assemble_3bus(params: &BenchParams) -> Result<NetworkCase> {
    assemble(params, Assembly::Full)
}

/// Assembles the benchmark or one of its single-converter sub-assemblies and
/// checks the state, input and equation counts.
pub fn assemble(params: &BenchParams, assembly: Assembly) -> Result<NetworkCase> {
    params.validate()?;
    let mut parts: Vec<Cpn1Model> = Vec::new();
    if assembly != Assembly::GflOnly {
        parts.extend(gfm_blocks(params)?);
    }
    if assembly != Assembly::GfmOnly {
        parts.extend(gfl_blocks(params)?);
    }
    parts.extend(grid_blocks(params, assembly)?);
    let refs: Vec<&Cpn1Model> = parts.iter().collect();
    let composite = compose(&refs, &[])?.with_inputs(&INPUTS)?;

    let keep = |list: &[&str]| -> Vec<String> {
        list.iter().filter(|s| composite.partition().index_of(s).is_some()).map(|s| s.to_string()).collect()
    };
    let gfm = keep(&GFM_STATES);
    let gfl = keep(&GFL_STATES);
    let grid = keep(&GRID_STATES);
    let mut states: Vec<String> = gfm.iter().chain(&gfl).chain(&grid).cloned().collect();
    if !states.iter().any(|s| s == "theta_g") {
        states.push("theta_g".into());
    }
    let p = composite.partition();
    let inputs: Vec<String> = INPUTS.iter().map(|s| s.to_string()).collect();
    let composite = composite.with_signal_order(&states, &inputs, p.output_names(), p.algebraic_names())?;

    let mut groups = Vec::new();
    match assembly {
        Assembly::Full => {
            groups.push(("gfm".to_string(), gfm));
            groups.push(("gfl".to_string(), gfl));
            groups.push(("grid".to_string(), grid));
        }
        Assembly::GfmOnly => {
            groups.push(("gfm".to_string(), gfm));
            let mut g = grid;
            g.push("theta_g".into());
            groups.push(("grid".to_string(), g));
        }
        Assembly::GflOnly => {
            groups.push(("gfl".to_string(), gfl));
            groups.push(("grid".to_string(), grid));
        }
    }
    let case = NetworkCase { assembly, composite, params: params.clone(), groups };
    let got = case.counts();
    let want = assembly.reference_counts();
    let sizes: Vec<usize> = case.groups.iter().map(|(_, s)| s.len()).collect();
    let want_sizes: &[usize] = match assembly {
        Assembly::Full => &[9, 9, 8],
        Assembly::GfmOnly => &[9, 7],
        Assembly::GflOnly => &[9, 6],
    };
    if sizes != want_sizes {
        let which: Vec<String> = case
            .groups
            .iter()
            .zip(want_sizes)
            .filter(|((_, s), w)| s.len() != **w)
            .map(|((g, s), w)| format!("{g}: {} states, expected {w}", s.len()))
            .collect();
        return Err(Error::InvalidModel(format!("subsystem sizes deviate ({})", which.join("; "))));
    }
    if (got.n, got.m, got.p_plus_q, got.n_phi) != (want.n, want.m, want.p_plus_q, want.n_phi) {
        return Err(Error::InvalidModel(format!(
            "assembled dimensions n={}, m={}, p+q={}, N_phi={} differ from n={}, m={}, p+q={}, N_phi={}",
            got.n, got.m, got.p_plus_q, got.n_phi, want.n, want.m, want.p_plus_q, want.n_phi
        )));
    }
    Ok(case)
}

/// Signals held fixed while solving for an equilibrium: inputs, derivative
/// slots, the free angle integrators and the global frame lift.
fn frozen_signals(case: &NetworkCase) -> Vec<String> {
    let p = case.composite.partition();
    let mut out: Vec<String> = p.input_names().to_vec();
    out.extend(p.derivative_range().map(|i| p.name(i).to_string()));
    for s in ["theta_g", "gfm_theta", "gfl_theta", "zcg", "zsg"] {
        if p.index_of(s).is_some() {
            out.push(s.to_string());
        }
    }
    out
}

fn set_if(v: &mut SignalVector, name: &str, value: f64) {
    if v.partition().index_of(name).is_some() {
        v.set(name, value).expect("present");
    }
}

/// Rough operating point: nominal voltage at the load bus, converters
/// aligned with the grid and carrying their reference power.
pub fn initial_guess(case: &NetworkCase, refs: &References) -> SignalVector {
    let part = case.composite.partition_arc().clone();
    let mut v = SignalVector::zeros(part);
    let prm = &case.params;
    let vl = refs.v_ref;
    for (name, value) in INPUTS.iter().zip(refs.values()) {
        set_if(&mut v, name, value);
    }
    for (name, value) in [
        ("zcg", 1.0),
        ("gfm_zc", 1.0),
        ("gfl_z1", 1.0),
        ("gfl_a1", 1.0),
        ("gfm_h1", 1.0),
        ("gfm_omega", 1.0),
        ("gfl_wp", 1.0),
        ("vL_D", vl),
        ("gfm_vd", vl),
        ("gfl_vd", vl),
        ("gfm_vds", vl),
        ("gfm_ud", vl),
        ("gfl_ud", vl),
        ("gfm_uD", vl),
        ("gfl_uD", vl),
    ] {
        set_if(&mut v, name, value);
    }
    let s_b = prm.base.s_b;
    let i_gfm = refs.p_ref_gfm * s_b / (prm.power.gain * vl);
    let i_gfl = refs.p_ref_gfl * s_b / (prm.power.gain * vl);
    let mut inj = 0.0;
    if case.assembly != Assembly::GflOnly {
        for n in ["igfm_D", "gfm_id", "gfm_isd"] {
            set_if(&mut v, n, i_gfm);
        }
        set_if(&mut v, "gfm_p", refs.p_ref_gfm * s_b);
        inj += i_gfm;
    }
    if case.assembly != Assembly::GfmOnly {
        for n in ["igfl_D", "gfl_id", "gfl_isd"] {
            set_if(&mut v, n, i_gfl);
        }
        set_if(&mut v, "gfl_p", refs.p_ref_gfl * s_b);
        inj += i_gfl;
    }
    set_if(&mut v, "ig_D", vl / prm.r_load - inj);
    v
}

fn solve_point(case: &NetworkCase, guess: &SignalVector, refs: &References) -> Result<SignalVector> {
    let mut g = guess.clone();
    for (name, value) in INPUTS.iter().zip(refs.values()) {
        set_if(&mut g, name, value);
    }
    let p = case.composite.partition();
    for i in p.derivative_range() {
        g[i] = 0.0;
    }
    for (a, b) in [("theta_g", 0.0), ("zcg", 1.0), ("zsg", 0.0)] {
        set_if(&mut g, a, b);
    }
    let frozen = frozen_signals(case);
    let frozen: Vec<&str> = frozen.iter().map(String::as_str).collect();
    let opts = InitOptions { tol: EquilibriumTol::TermRelative(1e-12), lift_tol: 1e-12, max_iters: 60, enforce_lifts: true };
    let mut v = consistent_init_with(&case.composite, &g, &frozen, &opts)?;
    if p.index_of("gfm_theta").is_some() {
        let a = v.get("gfm_zs")?.atan2(v.get("gfm_zc")?);
        v.set("gfm_theta", a)?;
    }
    if p.index_of("gfl_theta").is_some() {
        let a = -v.get("gfl_z2")?.atan2(v.get("gfl_z1")?);
        v.set("gfl_theta", a)?;
    }
    Ok(v)
}

/// Tolerance used to accept benchmark equilibria (term-relative).
pub const EQUILIBRIUM_TOL: EquilibriumTol = EquilibriumTol::TermRelative(1e-9);

/// Equilibrium for the given references, starting from [`initial_guess`].
///
/// If Newton fails, the active power references are ramped up from zero in
/// ten steps, each solve starting from the previous point.
pub fn find_equilibrium(case: &NetworkCase, refs: &References) -> Result<OperatingPoint> {
    find_equilibrium_from(case, refs, &initial_guess(case, refs))
}

/// Like [`find_equilibrium`] with an explicit starting point.
pub fn find_equilibrium_from(case: &NetworkCase, refs: &References, guess: &SignalVector) -> Result<OperatingPoint> {
    match solve_point(case, guess, refs) {
        Ok(v) => OperatingPoint::new(v),
        Err(first) => {
            let start = References { p_ref_gfm: 0.0, p_ref_gfl: 0.0, ..refs.clone() };
            let mut v = solve_point(case, &initial_guess(case, &start), &start).map_err(|_| first_err(&first))?;
            for k in 1..=10 {
                let a = k as f64 / 10.0;
                let step = References { p_ref_gfm: a * refs.p_ref_gfm, p_ref_gfl: a * refs.p_ref_gfl, ..refs.clone() };
                v = solve_point(case, &v, &step).map_err(|e| match e {
                    Error::NewtonDivergence { iterations, residual, detail } => Error::NewtonDivergence {
                        iterations,
                        residual,
                        detail: format!("{detail}; p_ref ramp stopped at {:.0}% of the target", 100.0 * (k - 1) as f64 / 10.0),
                    },
                    other => other,
                })?;
            }
            OperatingPoint::new(v)
        }
    }
}

fn first_err(e: &Error) -> Error {
    Error::NewtonDivergence {
        iterations: 0,
        residual: f64::NAN,
        detail: format!("; equilibrium search failed ({e}) and so did the zero-power start of the p_ref ramp"),
    }
}

/// Active power delivered by the Thevenin source, per-unit.
pub fn grid_power(case: &NetworkCase, v: &SignalVector) -> Result<f64> {
    let prm = &case.params;
    let p = prm.power.gain * prm.source_voltage() * (v.get("zcg")? * v.get("ig_D")? + v.get("zsg")? * v.get("ig_Q")?);
    Ok(p / prm.base.s_b)
}

/// Solves `r_load` so that the grid source delivers no active power at the
/// references of `params`, i.e. the converters supply the whole load.
pub fn solve_load(params: &BenchParams) -> Result<(NetworkCase, OperatingPoint)> {
    let mut prm = params.clone();
    let refs = prm.references.clone();
    let eval = |prm: &BenchParams, guess: Option<&SignalVector>| -> Result<(NetworkCase, OperatingPoint, f64)> {
        let case = assemble_3bus(prm)?;
        let op = match guess {
            Some(g) => find_equilibrium_from(&case, &refs, &SignalVector::new(case.composite.partition_arc().clone(), g.values().to_vec())?)?,
            None => find_equilibrium(&case, &refs)?,
        };
        let f = grid_power(&case, &op.v_bar)?;
        Ok((case, op, f))
    };
    let mut g0 = 1.0 / prm.r_load;
    let (mut case, mut op, mut f0) = eval(&prm, None)?;
    let mut g1 = g0 * 1.02;
    for _ in 0..30 {
        if f0.abs() < 1e-10 {
            return Ok((case, op));
        }
        prm.r_load = 1.0 / g1;
        let (c1, o1, f1) = eval(&prm, Some(&op.v_bar))?;
        let slope = (f1 - f0) / (g1 - g0);
        g0 = g1;
        f0 = f1;
        case = c1;
        op = o1;
        if !(slope.is_finite() && slope != 0.0) {
            break;
        }
        g1 = g0 - f0 / slope;
    }
    if f0.abs() < 1e-8 {
        return Ok((case, op));
    }
    Err(Error::NewtonDivergence { iterations: 30, residual: f0, detail: "; load resistance search for zero grid power".into() })
}

/// Which active power references a sweep moves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepTarget {
    #[default]
    Both,
    Gfm,
    Gfl,
}
