//! Multilinear building blocks: polynomial and trigonometric lifts, frame
//! rotations and the converter / network component library.
//!
//! Every block returns a self-contained [`Cpn1Model`] with fixed local signal
//! names (listed per block). Blocks are wired together by renaming signals
//! with [`Cpn1Model::rename_signals`] and stacking them with
//! [`compose`](crate::compose), which unifies equal names.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cpn1::{var, Cpn1Model, ModelBuilder, Poly};
use crate::error::{Error, Result};

/// Nominal angular frequency of a 50 Hz system, rad/s.
pub const OMEGA_B: f64 = 2.0 * PI * 50.0;

fn positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name: name.into(), value, reason: "must be positive" })
    }
}

fn nonnegative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name: name.into(), value, reason: "must be nonnegative" })
    }
}

fn finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name: name.into(), value, reason: "must be finite" })
    }
}

/// `x' = coef · ∏ v_j^{d_j}` rewritten with copy variables so every product is
/// multilinear.
///
/// Each power `d ≥ 2` of a signal `v` introduces `d − 1` algebraic copies
/// `v_pow1 … v_pow{d−1}` with constraints `0 = v − v_powk`. The signal `state`
/// becomes a state; every other signal in `powers` becomes an input.
pub fn lift_polynomial(state: &str, coef: f64, powers: &[(&str, i32)]) -> Result<Cpn1Model> {
    finite("coef", coef)?;
    let mut b = ModelBuilder::new();
    b.state(state);
    let mut product = Poly::constant(coef);
    let mut copies = Vec::new();
    for &(name, d) in powers {
        if d < 0 {
            return Err(Error::InvalidParameter {
                name: format!("power of {name}"),
                value: d as f64,
                reason: "powers must be nonnegative integers",
            });
        }
        if d == 0 {
            continue;
        }
        if name != state {
            b.input(name);
        }
        product = product * var(name);
        for k in 1..d {
            let copy = format!("{name}_pow{k}");
            product = product * var(&copy);
            copies.push((name.to_string(), copy));
        }
    }
    b.equation(format!("der {state}"), Poly::der(state) - product);
    for (name, copy) in copies {
        b.algebraic(&copy);
        b.equation(format!("copy {copy}"), var(&name) - var(&copy));
    }
    b.build()
}

/// Lifted angle `x` represented by the states `cos = cos x`, `sin = sin x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigLift {
    /// Keep the angle itself as a state with `x' = rate`.
    pub angle_name: Option<String>,
    pub cos_name: String,
    pub sin_name: String,
}

impl TrigLift {
    pub fn new(angle: Option<&str>, cos: &str, sin: &str) -> Self {
        Self { angle_name: angle.map(str::to_string), cos_name: cos.into(), sin_name: sin.into() }
    }
}

/// Equations of a trig lift, split so callers can interleave their own.
pub(crate) struct LiftEquations {
    pub angle: Option<(String, Poly)>,
    pub rotation: Vec<(String, Poly)>,
    pub copies: Vec<(String, String, Poly)>,
}

pub(crate) fn trig_lift_equations(lift: &TrigLift, rate: &Poly) -> Result<LiftEquations> {
    let (c, s) = (lift.cos_name.as_str(), lift.sin_name.as_str());
    if let Some(a) = &lift.angle_name {
        if rate.mentions(a) {
            return Err(Error::NotMultilinear(format!("rate of `{a}` depends on `{a}` itself")));
        }
    }
    let needs_copy = rate.mentions(c) || rate.mentions(s);
    let (mc, ms) = if needs_copy { (format!("{c}_copy"), format!("{s}_copy")) } else { (c.to_string(), s.to_string()) };
    let rotation = vec![
        (format!("der {c}"), Poly::der(c) + rate.clone() * var(&ms)),
        (format!("der {s}"), Poly::der(s) - rate.clone() * var(&mc)),
    ];
    let copies = if needs_copy {
        vec![(mc.clone(), format!("copy {mc}"), var(c) - var(&mc)), (ms.clone(), format!("copy {ms}"), var(s) - var(&ms))]
    } else {
        Vec::new()
    };
    let angle = lift.angle_name.as_ref().map(|a| (format!("der {a}"), Poly::der(a) - rate.clone()));
    Ok(LiftEquations { angle, rotation, copies })
}

/// Lifted rotation `cos' = −rate·sin`, `sin' = rate·cos` (plus `x' = rate`
/// when the angle is kept).
///
/// When `rate` itself contains the lifted states, the multiplying states are
/// replaced by algebraic copies `<cos>_copy`, `<sin>_copy`. Signals in `rate`
/// that are not part of the lift become inputs. The unit-circle constraint is
/// registered on the model.
pub fn lift_trig(lift: &TrigLift, rate: &Poly) -> Result<Cpn1Model> {
    let eqs = trig_lift_equations(lift, rate)?;
    let mut b = ModelBuilder::new();
    if let Some(a) = &lift.angle_name {
        b.state(a);
    }
    b.state(&lift.cos_name).state(&lift.sin_name);
    let own: Vec<&str> = [Some(lift.cos_name.as_str()), Some(lift.sin_name.as_str()), lift.angle_name.as_deref()]
        .into_iter()
        .flatten()
        .collect();
    for name in signals_of(rate) {
        if !own.contains(&name.as_str()) {
            b.input(name);
        }
    }
    if let Some((label, p)) = eqs.angle {
        b.equation(label, p);
    }
    for (label, p) in eqs.rotation {
        b.equation(label, p);
    }
    for (name, label, p) in eqs.copies {
        b.algebraic(name);
        b.equation(label, p);
    }
    b.lift(&lift.cos_name, &lift.sin_name);
    b.build()
}

fn signals_of(p: &Poly) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in p.terms() {
        for f in &t.factors {
            if !out.contains(f) {
                out.push(f.clone());
            }
        }
    }
    out
}

/// `(d, q) = R (D, Q)` with `R = [[c, s], [−s, c]]`, or the inverse
/// `(D, Q) = Rᵀ (d, q)`. Returns the two right-hand sides.
pub(crate) fn rotate(c: &Poly, s: &Poly, x: &Poly, y: &Poly, inverse: bool) -> (Poly, Poly) {
    if inverse {
        (c.clone() * x.clone() - s.clone() * y.clone(), s.clone() * x.clone() + c.clone() * y.clone())
    } else {
        (c.clone() * x.clone() + s.clone() * y.clone(), c.clone() * y.clone() - s.clone() * x.clone())
    }
}

/// One pair rotated by [`rotation_block`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedPair {
    pub from: (String, String),
    pub to: (String, String),
    /// Apply the inverse rotation (local `dq` to global `DQ`).
    #[serde(default)]
    pub inverse: bool,
}

/// Rotation between a device frame and the global frame.
///
/// Defines `h1 = cos_i cos_g + sin_i sin_g`, `h2 = sin_i cos_g − cos_i sin_g`
/// as algebraic variables (named by `h`) and rotates each pair with
/// `R = [[h1, h2], [−h2, h1]]` or its transpose. The lift states enter as
/// inputs, so the block composes with the blocks that own them.
pub fn rotation_block(local: &TrigLift, global: &TrigLift, h: (&str, &str), pairs: &[RotatedPair]) -> Result<Cpn1Model> {
    let (ci, si, cg, sg) = (&local.cos_name, &local.sin_name, &global.cos_name, &global.sin_name);
    let mut b = ModelBuilder::new();
    for n in [ci, si, cg, sg] {
        b.input(n);
    }
    b.algebraic(h.0).algebraic(h.1);
    b.equation(h.0, var(h.0) - (var(ci) * var(cg) + var(si) * var(sg)));
    b.equation(h.1, var(h.1) - (var(si) * var(cg) - var(ci) * var(sg)));
    rotate_pairs(&mut b, &var(h.0), &var(h.1), pairs);
    b.build()
}

/// Rotation of pairs by a frame given directly as `(c, s)` signals.
pub fn frame_rotation_block(c: &str, s: &str, pairs: &[RotatedPair]) -> Result<Cpn1Model> {
    let mut b = ModelBuilder::new();
    b.input(c).input(s);
    rotate_pairs(&mut b, &var(c), &var(s), pairs);
    b.build()
}

fn rotate_pairs(b: &mut ModelBuilder, c: &Poly, s: &Poly, pairs: &[RotatedPair]) {
    for p in pairs {
        b.input(&p.from.0).input(&p.from.1);
        b.output(&p.to.0).output(&p.to.1);
        let (x, y) = rotate(c, s, &var(&p.from.0), &var(&p.from.1), p.inverse);
        b.equation(&p.to.0, var(&p.to.0) - x);
        b.equation(&p.to.1, var(&p.to.1) - y);
    }
}

/// PLL gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PllParams {
    pub k_p: f64,
    pub k_i: f64,
}

impl Default for PllParams {
    fn default() -> Self {
        Self { k_p: 0.5, k_i: 9.0 }
    }
}

impl PllParams {
    pub fn validate(&self) -> Result<()> {
        nonnegative("k_p", self.k_p)?;
        nonnegative("k_i", self.k_i)
    }
}

/// Lifted PLL in implicit form.
///
/// States `z1 = cos δ`, `z2 = sin δ`, `z3 = x_I`; inputs `u1`, `u2`;
/// algebraic copies `a1`, `a2`:
///
/// ```text
/// 0 = z1' + (z3 − k_p (u1 z2 + u2 z1)) a2
/// 0 = z2' − (z3 − k_p (u1 z2 + u2 z1)) a1
/// 0 = z3' + k_i (u1 z2 + u2 z1)
/// 0 = z1 − a1
/// 0 = z2 − a2
/// ```
pub fn pll_block(p: &PllParams) -> Result<Cpn1Model> {
    p.validate()?;
    let forcing = var("u1") * var("z2") + var("u2") * var("z1");
    let rate = var("z3") - p.k_p * forcing.clone();
    let mut b = ModelBuilder::new();
    b.state("z1").state("z2").state("z3").input("u1").input("u2").algebraic("a1").algebraic("a2");
    b.equation("der z1", Poly::der("z1") + rate.clone() * var("a2"));
    b.equation("der z2", Poly::der("z2") - rate * var("a1"));
    b.equation("der z3", Poly::der("z3") + p.k_i * forcing);
    b.equation("copy a1", var("z1") - var("a1"));
    b.equation("copy a2", var("z2") - var("a2"));
    b.lift("z1", "z2");
    b.build()
}

/// Sign of the damping term of the swing equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingSign {
    /// `+k_d (ω − ω_ref)`.
    #[default]
    AsPrinted,
    /// `−k_d (ω − ω_ref)`, the usual restoring damping.
    Restoring,
}

impl DampingSign {
    pub fn factor(self) -> f64 {
        match self {
            DampingSign::AsPrinted => 1.0,
            DampingSign::Restoring => -1.0,
        }
    }
}

/// Virtual synchronous machine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsmParams {
    pub h: f64,
    pub k_d: f64,
    pub omega_b: f64,
    pub s_b: f64,
    /// Speed of the reference frame in per-unit: 0 for a stationary angle
    /// reference, 1 for angles measured against the nominal rotating frame.
    pub frame: f64,
    pub damping: DampingSign,
}

impl Default for VsmParams {
    fn default() -> Self {
        Self { h: 1.0, k_d: 50.0, omega_b: OMEGA_B, s_b: 100e6, frame: 0.0, damping: DampingSign::AsPrinted }
    }
}

impl VsmParams {
    pub fn validate(&self) -> Result<()> {
        positive("h", self.h)?;
        nonnegative("k_d", self.k_d)?;
        positive("omega_b", self.omega_b)?;
        positive("s_b", self.s_b)?;
        finite("frame", self.frame)
    }
}

/// Virtual synchronous machine with lifted angle.
///
/// States `omega`, `theta`, `zc`, `zs`; inputs `p` (W), `p_ref`, `omega_ref`
/// (per-unit).
pub fn vsm_block(p: &VsmParams) -> Result<Cpn1Model> {
    p.validate()?;
    let rate = p.omega_b * (var("omega") - p.frame);
    let lift = TrigLift::new(Some("theta"), "zc", "zs");
    let eqs = trig_lift_equations(&lift, &rate)?;
    let mut b = ModelBuilder::new();
    b.state("omega").state("theta").state("zc").state("zs");
    b.input("p").input("p_ref").input("omega_ref");
    let damping = p.damping.factor() * p.k_d * (var("omega") - var("omega_ref"));
    b.equation("swing", 2.0 * p.h * Poly::der("omega") - (var("p_ref") - var("p") * (1.0 / p.s_b)) - damping);
    if let Some((label, eq)) = eqs.angle {
        b.equation(label, eq);
    }
    for (label, eq) in eqs.rotation {
        b.equation(label, eq);
    }
    b.lift("zc", "zs");
    b.build()
}

/// Reactive power droop parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroopParams {
    pub omega_f: f64,
    pub k_q: f64,
}

impl Default for DroopParams {
    fn default() -> Self {
        Self { omega_f: 20.0, k_q: 3.7559e-4 }
    }
}

impl DroopParams {
    pub fn validate(&self) -> Result<()> {
        nonnegative("omega_f", self.omega_f)?;
        nonnegative("k_q", self.k_q)
    }
}

/// Filtered reactive power droop.
///
/// State `x_qfilt`; inputs `q` (var), `q_ref` (var), `v_ref` (V);
/// output `vd_star` (V).
pub fn droop_q_block(p: &DroopParams) -> Result<Cpn1Model> {
    p.validate()?;
    let mut b = ModelBuilder::new();
    b.state("x_qfilt").input("q").input("q_ref").input("v_ref").output("vd_star");
    b.equation("der x_qfilt", Poly::der("x_qfilt") + p.omega_f * var("x_qfilt") - p.omega_f * var("q"));
    b.equation("vd_star", var("vd_star") - var("v_ref") + p.k_q * (var("x_qfilt") - var("q_ref")));
    b.build()
}

/// What drives the virtual admittance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmittanceInput {
    /// Inputs `v_ref_d`, `v_ref_q` used directly.
    #[default]
    Reference,
    /// Inputs `vd_star`, `vd`, `vq`; drive `(vd_star − vd, −vq)`.
    VoltageError,
}

/// Sign of the `ω_b J₂` cross-coupling of the virtual admittance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingSign {
    /// `+ω_b J₂`.
    #[default]
    AsPrinted,
    /// `−ω_b J₂`, the coupling of a physical inductor in a rotating frame.
    Inductive,
}

/// Virtual admittance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualAdmittanceParams {
    pub r_v: f64,
    pub l_v: f64,
    pub omega_b: f64,
    pub input: AdmittanceInput,
    pub coupling: CouplingSign,
}

impl Default for VirtualAdmittanceParams {
    fn default() -> Self {
        Self { r_v: 0.30, l_v: 0.03, omega_b: OMEGA_B, input: AdmittanceInput::Reference, coupling: CouplingSign::AsPrinted }
    }
}

impl VirtualAdmittanceParams {
    pub fn validate(&self) -> Result<()> {
        positive("r_v", self.r_v)?;
        positive("l_v", self.l_v)?;
        nonnegative("omega_b", self.omega_b)
    }
}

/// Virtual admittance `x' = (−r_v/l_v ± ω_b J₂) x + v`, `i* = x / l_v`.
///
/// States `x_va_d`, `x_va_q`; outputs `i_ref_d`, `i_ref_q`.
pub fn virtual_admittance_block(p: &VirtualAdmittanceParams) -> Result<Cpn1Model> {
    p.validate()?;
    let mut b = ModelBuilder::new();
    b.state("x_va_d").state("x_va_q");
    let (ed, eq) = match p.input {
        AdmittanceInput::Reference => {
            b.input("v_ref_d").input("v_ref_q");
            (var("v_ref_d"), var("v_ref_q"))
        }
        AdmittanceInput::VoltageError => {
            b.input("vd_star").input("vd").input("vq");
            (var("vd_star") - var("vd"), -var("vq"))
        }
    };
    b.output("i_ref_d").output("i_ref_q");
    let a = p.r_v / p.l_v;
    let w = match p.coupling {
        CouplingSign::AsPrinted => p.omega_b,
        CouplingSign::Inductive => -p.omega_b,
    };
    b.equation("der x_va_d", Poly::der("x_va_d") + a * var("x_va_d") + w * var("x_va_q") - ed);
    b.equation("der x_va_q", Poly::der("x_va_q") + a * var("x_va_q") - w * var("x_va_d") - eq);
    b.equation("i_ref_d", var("i_ref_d") - (1.0 / p.l_v) * var("x_va_d"));
    b.equation("i_ref_q", var("i_ref_q") - (1.0 / p.l_v) * var("x_va_q"));
    b.build()
}

/// Where the integral gain of the current controller is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegralGain {
    /// On both the integrator input and its output, so the loop sees `k_i²`.
    #[default]
    AsPrinted,
    /// On the integrator input only.
    Single,
}

/// Current controller parameters. `l_f` is the filter inductance in henry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurrentControlParams {
    pub k_p: f64,
    pub k_i: f64,
    pub l_f: f64,
    pub omega_b: f64,
    pub integral: IntegralGain,
}

impl Default for CurrentControlParams {
    fn default() -> Self {
        let l_f = 0.07 * Base::default().l();
        Self { k_p: 117.87, k_i: 1058.0, l_f, omega_b: OMEGA_B, integral: IntegralGain::AsPrinted }
    }
}

impl CurrentControlParams {
    pub fn validate(&self) -> Result<()> {
        nonnegative("k_p", self.k_p)?;
        nonnegative("k_i", self.k_i)?;
        nonnegative("l_f", self.l_f)?;
        nonnegative("omega_b", self.omega_b)
    }
}

/// Current controller with frequency decoupling.
///
/// States `x_i_d`, `x_i_q`; inputs `i_ref_d`, `i_ref_q`, `i_d`, `i_q`, `v_d`,
/// `v_q`, `omega`; outputs `u_d`, `u_q`.
///
/// ```text
/// x_i' = k_i (i_ref − i)
/// u    = k_p (i_ref − i) + k_i x_i + l_f ω_b ω J₂ i + v
/// ```
///
/// With [`IntegralGain::Single`] the output uses `x_i` in place of `k_i x_i`.
pub fn current_control_block(p: &CurrentControlParams) -> Result<Cpn1Model> {
    p.validate()?;
    let mut b = ModelBuilder::new();
    b.state("x_i_d").state("x_i_q");
    for n in ["i_ref_d", "i_ref_q", "i_d", "i_q", "v_d", "v_q", "omega"] {
        b.input(n);
    }
    b.output("u_d").output("u_q");
    let ed = var("i_ref_d") - var("i_d");
    let eq = var("i_ref_q") - var("i_q");
    let w = p.l_f * p.omega_b * var("omega");
    let k_out = match p.integral {
        IntegralGain::AsPrinted => p.k_i,
        IntegralGain::Single => 1.0,
    };
    b.equation("der x_i_d", Poly::der("x_i_d") - p.k_i * ed.clone());
    b.equation("der x_i_q", Poly::der("x_i_q") - p.k_i * eq.clone());
    b.equation(
        "u_d",
        var("u_d") - (p.k_p * ed + k_out * var("x_i_d") - w.clone() * var("i_q") + var("v_d")),
    );
    b.equation("u_q", var("u_q") - (p.k_p * eq + k_out * var("x_i_q") + w * var("i_d") + var("v_q")));
    b.build()
}

/// Voltage source behind the sending end of a branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SendingEnd {
    /// Inputs `v_k_D`, `v_k_Q`.
    Signals,
    /// Source `magnitude · (cos, sin)` of a lifted angle (inputs named by the pair).
    Source { magnitude: f64, cos: String, sin: String },
}

/// RL branch parameters (SI).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlBranchParams {
    pub r: f64,
    pub l: f64,
    pub omega_g: f64,
    pub sending: SendingEnd,
}

impl Default for RlBranchParams {
    fn default() -> Self {
        let (r, l) = Base::default().thevenin(5.0, 10.0);
        Self { r, l, omega_g: OMEGA_B, sending: SendingEnd::Signals }
    }
}

impl RlBranchParams {
    pub fn validate(&self) -> Result<()> {
        positive("r", self.r)?;
        positive("l", self.l)?;
        nonnegative("omega_g", self.omega_g)?;
        if let SendingEnd::Source { magnitude, .. } = &self.sending {
            finite("magnitude", *magnitude)?;
        }
        Ok(())
    }
}

/// RL branch from node k to node l in the global frame:
/// `i' = (−r/l − ω_g J₂) i + (v_k − v_l)/l`.
///
/// States `i_D`, `i_Q`; inputs `v_l_D`, `v_l_Q` and the sending end.
pub fn rl_branch_block(p: &RlBranchParams) -> Result<Cpn1Model> {
    p.validate()?;
    let mut b = ModelBuilder::new();
    b.state("i_D").state("i_Q");
    let (vkd, vkq) = match &p.sending {
        SendingEnd::Signals => {
            b.input("v_k_D").input("v_k_Q");
            (var("v_k_D"), var("v_k_Q"))
        }
        SendingEnd::Source { magnitude, cos, sin } => {
            b.input(cos).input(sin);
            (*magnitude * var(cos), *magnitude * var(sin))
        }
    };
    b.input("v_l_D").input("v_l_Q");
    let a = p.r / p.l;
    let g = 1.0 / p.l;
    b.equation(
        "der i_D",
        Poly::der("i_D") + a * var("i_D") - p.omega_g * var("i_Q") - g * (vkd - var("v_l_D")),
    );
    b.equation(
        "der i_Q",
        Poly::der("i_Q") + a * var("i_Q") + p.omega_g * var("i_D") - g * (vkq - var("v_l_Q")),
    );
    b.build()
}

/// Resistive load parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadParams {
    pub r_load: f64,
    /// Currents flowing into the node, `(D name, Q name, sign)`.
    pub currents: Vec<(String, String, f64)>,
}

impl Default for LoadParams {
    fn default() -> Self {
        Self { r_load: 100.0, currents: vec![("i_D".into(), "i_Q".into(), 1.0)] }
    }
}

impl LoadParams {
    pub fn validate(&self) -> Result<()> {
        positive("r_load", self.r_load)?;
        for (d, _, s) in &self.currents {
            finite(&format!("sign of {d}"), *s)?;
        }
        Ok(())
    }
}

/// Node voltage of a resistive load, `v = r_load Δi`. Outputs `v_D`, `v_Q`.
pub fn resistive_load_block(p: &LoadParams) -> Result<Cpn1Model> {
    p.validate()?;
    let mut b = ModelBuilder::new();
    let (mut sd, mut sq) = (Poly::zero(), Poly::zero());
    for (d, q, s) in &p.currents {
        b.input(d).input(q);
        sd += *s * var(d);
        sq += *s * var(q);
    }
    b.output("v_D").output("v_Q");
    b.equation("v_D", var("v_D") - p.r_load * sd);
    b.equation("v_Q", var("v_Q") - p.r_load * sq);
    b.build()
}

/// Power computation gain: 1.5 for amplitude-invariant dq quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerParams {
    pub gain: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self { gain: 1.5 }
    }
}

/// Instantaneous power `p = g (v_d i_d + v_q i_q)`, `q = g (v_q i_d − v_d i_q)`.
///
/// Inputs `v_d`, `v_q`, `i_d`, `i_q`; outputs `p`, `q`.
pub fn power_block(p: &PowerParams) -> Result<Cpn1Model> {
    finite("gain", p.gain)?;
    let mut b = ModelBuilder::new();
    for n in ["v_d", "v_q", "i_d", "i_q"] {
        b.input(n);
    }
    b.output("p").output("q");
    b.equation("p", var("p") - p.gain * (var("v_d") * var("i_d") + var("v_q") * var("i_q")));
    b.equation("q", var("q") - p.gain * (var("v_q") * var("i_d") - var("v_d") * var("i_q")));
    b.build()
}

/// Power controller parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqParams {
    pub k_p: f64,
    pub k_i: f64,
    pub s_b: f64,
}

impl Default for PqParams {
    fn default() -> Self {
        Self { k_p: 10e-5, k_i: 1e-2, s_b: 100e6 }
    }
}

impl PqParams {
    pub fn validate(&self) -> Result<()> {
        nonnegative("k_p", self.k_p)?;
        nonnegative("k_i", self.k_i)?;
        positive("s_b", self.s_b)
    }
}

/// Two PI controllers from power errors to current references.
///
/// States `x_p`, `x_q`; inputs `p`, `q` (SI), `p_ref`, `q_ref` (per-unit);
/// outputs `i_ref_d`, `i_ref_q`. The `q` channel is negated so that a
/// positive reactive reference asks for a negative `q`-axis current.
pub fn pq_control_block(p: &PqParams) -> Result<Cpn1Model> {
    p.validate()?;
    let mut b = ModelBuilder::new();
    b.state("x_p").state("x_q");
    for n in ["p", "q", "p_ref", "q_ref"] {
        b.input(n);
    }
    b.output("i_ref_d").output("i_ref_q");
    let ep = p.s_b * var("p_ref") - var("p");
    let eq = p.s_b * var("q_ref") - var("q");
    b.equation("der x_p", Poly::der("x_p") - ep.clone());
    b.equation("der x_q", Poly::der("x_q") - eq.clone());
    b.equation("i_ref_d", var("i_ref_d") - p.k_p * ep - p.k_i * var("x_p"));
    b.equation("i_ref_q", var("i_ref_q") + p.k_p * eq + p.k_i * var("x_q"));
    b.build()
}

/// Electrical base quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Base {
    /// Line-to-line RMS voltage, V.
    pub v_ll: f64,
    /// Apparent power, VA.
    pub s_b: f64,
    pub f: f64,
}

impl Default for Base {
    fn default() -> Self {
        Self { v_ll: 230e3, s_b: 100e6, f: 50.0 }
    }
}

impl Base {
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f
    }
    /// Base impedance, Ω.
    pub fn z(&self) -> f64 {
        self.v_ll * self.v_ll / self.s_b
    }
    /// Base inductance, H.
    pub fn l(&self) -> f64 {
        self.z() / self.omega()
    }
    /// Peak line-to-ground voltage, V.
    pub fn v_peak(&self) -> f64 {
        self.v_ll * 2f64.sqrt() / 3f64.sqrt()
    }
    /// Thevenin `(r, l)` for a short-circuit ratio and X/R ratio.
    pub fn thevenin(&self, scr: f64, x_over_r: f64) -> (f64, f64) {
        let z = self.z() / scr;
        let r = z / (1.0 + x_over_r * x_over_r).sqrt();
        (r, x_over_r * r / self.omega())
    }
}

/// Names of the blocks accepted by [`build_block`].
pub const BLOCK_NAMES: &[&str] =
    &["pll", "vsm", "droop_q", "virtual_admittance", "current_control", "rl_branch", "resistive_load", "power", "pq_control"];

/// Builds a named block from its JSON parameter object.
pub fn build_block(name: &str, params: &serde_json::Value) -> Result<Cpn1Model> {
    fn parse<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
        Ok(serde_json::from_value(v.clone())?)
    }
    match name {
        "pll" => pll_block(&parse(params)?),
        "vsm" => vsm_block(&parse(params)?),
        "droop_q" => droop_q_block(&parse(params)?),
        "virtual_admittance" => virtual_admittance_block(&parse(params)?),
        "current_control" => current_control_block(&parse(params)?),
        "rl_branch" => rl_branch_block(&parse(params)?),
        "resistive_load" => resistive_load_block(&parse(params)?),
        "power" => power_block(&parse(params)?),
        "pq_control" => pq_control_block(&parse(params)?),
        other => Err(Error::InvalidModel(format!(
            "unknown block `{other}` (known: {})",
            BLOCK_NAMES.join(", ")
        ))),
    }
}

/// Default parameter object of a named block.
pub fn default_block_params(name: &str) -> Result<serde_json::Value> {
    let v = match name {
        "pll" => serde_json::to_value(PllParams::default()),
        "vsm" => serde_json::to_value(VsmParams::default()),
        "droop_q" => serde_json::to_value(DroopParams::default()),
        "virtual_admittance" => serde_json::to_value(VirtualAdmittanceParams::default()),
        "current_control" => serde_json::to_value(CurrentControlParams::default()),
        "rl_branch" => serde_json::to_value(RlBranchParams::default()),
        "resistive_load" => serde_json::to_value(LoadParams::default()),
        "power" => serde_json::to_value(PowerParams::default()),
        "pq_control" => serde_json::to_value(PqParams::default()),
        other => return Err(Error::InvalidModel(format!("unknown block `{other}`"))),
    };
    Ok(v?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SignalVector;

    fn eval(m: &Cpn1Model, pairs: &[(&str, f64)]) -> Vec<f64> {
        let v = SignalVector::from_named(m.partition_arc().clone(), pairs.iter().copied()).unwrap();
        m.eval_residual(&v).unwrap().iter().copied().collect()
    }

    #[test]
    fn square_lift_matches_fragment() {
        let m = lift_polynomial("x", 1.0, &[("x", 2)]).unwrap();
        assert_eq!(m.n_eq(), 2);
        assert_eq!(m.partition().q(), 1);
        let r = eval(&m, &[("der(x)", 4.0), ("x", 2.0), ("x_pow1", 2.0)]);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn cube_lift() {
        let m = lift_polynomial("x", 1.0, &[("x", 3)]).unwrap();
        let r = eval(&m, &[("x", 2.0), ("x_pow1", 2.0), ("x_pow2", 2.0)]);
        assert_eq!(r[0], -8.0);
        assert!(lift_polynomial("x", 1.0, &[("x", -1)]).is_err());
        let lin = lift_polynomial("x", 1.0, &[("x", 1)]).unwrap();
        assert_eq!(lin.n_eq(), 1);
    }

    #[test]
    fn pll_structure() {
        let m = pll_block(&PllParams::default()).unwrap();
        let p = m.partition();
        assert_eq!((p.n(), p.m(), p.p(), p.q(), m.n_eq()), (3, 2, 0, 2, 5));
        let r = eval(&m, &[("z1", 1.0), ("a1", 1.0), ("u1", 300.0)]);
        assert!(r.iter().all(|x| x.abs() < 1e-12));
        assert!(pll_block(&PllParams { k_p: -1.0, k_i: 1.0 }).is_err());
    }

    #[test]
    fn lift_trig_inserts_copies() {
        let rate = var("z3") - 0.5 * (var("u1") * var("z2") + var("u2") * var("z1"));
        let m = lift_trig(&TrigLift::new(None, "z1", "z2"), &rate).unwrap();
        assert_eq!(m.n_eq(), 4);
        assert_eq!(m.partition().q(), 2);
        let plain = lift_trig(&TrigLift::new(Some("th"), "c", "s"), &(2.0 * var("w"))).unwrap();
        assert_eq!(plain.n_eq(), 3);
        assert_eq!(plain.partition().q(), 0);
        let r = eval(&plain, &[("w", 1.5), ("c", 1.0), ("der(s)", 3.0), ("der(th)", 3.0)]);
        assert!(r.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn rotation_quarter_turn() {
        let pairs = [RotatedPair { from: ("vD".into(), "vQ".into()), to: ("vd".into(), "vq".into()), inverse: false }];
        let m = rotation_block(&TrigLift::new(None, "ci", "si"), &TrigLift::new(None, "cg", "sg"), ("h1", "h2"), &pairs)
            .unwrap();
        // θ_i − θ_g = 90°: h1 = 0, h2 = 1.
        let r = eval(
            &m,
            &[("ci", 0.0), ("si", 1.0), ("cg", 1.0), ("sg", 0.0), ("h1", 0.0), ("h2", 1.0), ("vD", 1.0), ("vd", 0.0), ("vq", -1.0)],
        );
        assert!(r.iter().all(|x| x.abs() < 1e-12), "{r:?}");
    }

    #[test]
    fn vsm_example() {
        let m = vsm_block(&VsmParams::default()).unwrap();
        let r = eval(&m, &[("der(omega)", 0.05), ("omega", 1.0), ("omega_ref", 1.0), ("p_ref", 0.1), ("zc", 1.0)]);
        assert!(r[0].abs() < 1e-12);
        assert!(vsm_block(&VsmParams { h: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn droop_example() {
        let m = droop_q_block(&DroopParams::default()).unwrap();
        let r = eval(&m, &[("x_qfilt", 1e4), ("v_ref", 1000.0), ("vd_star", 1000.0 - 3.7559), ("q", 1e4), ("der(x_qfilt)", 0.0)]);
        assert!(r.iter().all(|x| x.abs() < 1e-9), "{r:?}");
        assert!(droop_q_block(&DroopParams { omega_f: -1.0, k_q: 0.0 }).is_err());
    }

    #[test]
    fn admittance_dc_gain() {
        let p = VirtualAdmittanceParams { omega_b: 0.0, ..Default::default() };
        let m = virtual_admittance_block(&p).unwrap();
        let x = 10.0 * p.l_v / p.r_v;
        let r = eval(&m, &[("v_ref_d", 10.0), ("x_va_d", x), ("i_ref_d", 10.0 / p.r_v)]);
        assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
        assert!(virtual_admittance_block(&VirtualAdmittanceParams { l_v: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn current_control_tuning() {
        let p = CurrentControlParams::default();
        assert!((p.l_f / 1e-3 - 117.87).abs() < 0.05);
        let m = current_control_block(&p).unwrap();
        let r = eval(&m, &[("i_ref_d", 5.0), ("i_d", 5.0), ("v_d", 7.0), ("u_d", 7.0)]);
        assert!(r.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn branch_and_load() {
        let p = RlBranchParams { r: 2.0, l: 0.1, omega_g: 0.0, sending: SendingEnd::Signals };
        let m = rl_branch_block(&p).unwrap();
        let r = eval(&m, &[("v_k_D", 20.0), ("i_D", 10.0)]);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let (r_th, l_th) = Base::default().thevenin(5.0, 10.0);
        assert!(((r_th.powi(2) + (OMEGA_B * l_th).powi(2)).sqrt() - 105.8).abs() < 1e-9);
        let load = resistive_load_block(&LoadParams { r_load: 100.0, ..Default::default() }).unwrap();
        let r = eval(&load, &[("i_D", 10.0), ("v_D", 1000.0)]);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        assert!(rl_branch_block(&RlBranchParams { l: 0.0, ..Default::default() }).is_err());
        assert!(resistive_load_block(&LoadParams { r_load: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn named_blocks_build() {
        for name in BLOCK_NAMES {
            let params = default_block_params(name).unwrap();
            build_block(name, &params).unwrap();
        }
        assert!(build_block("nope", &serde_json::json!({})).is_err());
    }
}
