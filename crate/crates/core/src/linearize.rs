//! Analytic Jacobians of CPN1 models and linear descriptor (LDSS) extraction.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cpn1::{Cpn1Model, SignalPartition, SignalVector};
use crate::error::{Error, Result};

/// The point `v̄` a model is linearized at.
#[derive(Clone, Debug)]
pub struct OperatingPoint {
    pub v_bar: SignalVector,
}

/// Points compare by signal names and values.
impl PartialEq for OperatingPoint {
    fn eq(&self, other: &Self) -> bool {
        self.v_bar.values() == other.v_bar.values()
            && self.v_bar.partition().names() == other.v_bar.partition().names()
    }
}

#[derive(Serialize, Deserialize)]
struct PointFile {
    names: Vec<String>,
    values: Vec<f64>,
}

impl Serialize for OperatingPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PointFile { names: self.v_bar.partition().names().to_vec(), values: self.v_bar.values().to_vec() }
            .serialize(s)
    }
}

/// Stored points only carry names; the partition is rebuilt with every
/// signal marked as an input.
impl<'de> Deserialize<'de> for OperatingPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = PointFile::deserialize(d)?;
        if f.values.iter().any(|x| !x.is_finite()) {
            return Err(D::Error::custom("non-finite operating point"));
        }
        let part = SignalPartition::new::<String>(&[], &f.names, &[], &[]).map_err(D::Error::custom)?;
        let v = SignalVector::new(Arc::new(part), f.values).map_err(D::Error::custom)?;
        Ok(OperatingPoint { v_bar: v })
    }
}

impl OperatingPoint {
    pub fn new(v_bar: SignalVector) -> Result<Self> {
        if let Some(i) = v_bar.values().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("operating point signal `{}`", v_bar.partition().name(i))));
        }
        Ok(Self { v_bar })
    }

    pub fn values(&self) -> &[f64] {
        self.v_bar.values()
    }
}

/// Jacobian `∂h/∂v` at a point, with columns in partition order.
#[derive(Clone, Debug)]
pub struct JacobianResult {
    pub j: DMatrix<f64>,
    pub point: OperatingPoint,
    pub names: Vec<String>,
    /// Number of factor evaluations performed; equals nnz(S) for one pass.
    pub factor_visits: usize,
}

/// Computes `J = Φ (D ⊙ s̃)ᵀ` in one pass over the nonzeros of `(Φ, S)`.
pub fn jacobian(model: &Cpn1Model, point: &OperatingPoint) -> Result<JacobianResult> {
    let v = point.values();
    if v.len() != model.nv() {
        return Err(Error::Dimension { what: "operating point length (N_v)".into(), expected: model.nv(), got: v.len() });
    }
    let mut j = DMatrix::zeros(model.n_eq(), model.nv());
    let visits = jacobian_into(model, v, &mut j);
    Ok(JacobianResult {
        j,
        point: point.clone(),
        names: model.partition().names().to_vec(),
        factor_visits: visits,
    })
}

/// Jacobian on a raw slice; no finiteness check.
pub fn jacobian_slice(model: &Cpn1Model, v: &[f64]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(model.n_eq(), model.nv());
    jacobian_into(model, v, &mut j);
    j
}

pub(crate) fn jacobian_into(model: &Cpn1Model, v: &[f64], j: &mut DMatrix<f64>) -> usize {
    j.fill(0.0);
    let mut visits = 0;
    let mut f: Vec<f64> = Vec::new();
    for r in 0..model.r() {
        let phi = model.phi_support(r);
        if phi.is_empty() {
            continue;
        }
        let col = model.factor_support(r);
        visits += col.len();
        f.clear();
        let mut zeros = 0;
        let mut zero_at = 0;
        let mut prod = 1.0;
        for (idx, &(i, s)) in col.iter().enumerate() {
            let x = 1.0 - s.abs() + s * v[i];
            if x == 0.0 {
                zeros += 1;
                zero_at = idx;
            } else {
                prod *= x;
            }
            f.push(x);
        }
        match zeros {
            0 => {
                for (idx, &(i, s)) in col.iter().enumerate() {
                    let d = s * prod / f[idx];
                    for &(k, c) in phi {
                        j[(k, i)] += c * d;
                    }
                }
            }
            1 => {
                let (i, s) = col[zero_at];
                let d = s * prod;
                for &(k, c) in phi {
                    j[(k, i)] += c * d;
                }
            }
            _ => {}
        }
    }
    visits
}

/// Central finite-difference Jacobian of the residual; used as an oracle and
/// as the baseline for performance comparison.
pub fn finite_difference_jacobian(model: &Cpn1Model, v: &[f64], step: f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(model.n_eq(), model.nv());
    let mut x = v.to_vec();
    for i in 0..v.len() {
        let h = step * (1.0 + v[i].abs());
        x[i] = v[i] + h;
        let fp = model.residual_unchecked(&x);
        x[i] = v[i] - h;
        let fm = model.residual_unchecked(&x);
        x[i] = v[i];
        j.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    j
}

/// `J_lift · J_inner`, mapping perturbations of original coordinates through a lift.
pub fn chain_rule_jacobian(j_lift: &JacobianResult, j_inner: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if j_inner.nrows() != j_lift.j.ncols() {
        return Err(Error::Dimension {
            what: "rows of inner Jacobian vs columns of lift Jacobian".into(),
            expected: j_lift.j.ncols(),
            got: j_inner.nrows(),
        });
    }
    Ok(&j_lift.j * j_inner)
}

/// How the equilibrium residual is measured before extraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "tol")]
pub enum EquilibriumTol {
    /// `‖h(v̄)‖∞ ≤ tol`.
    Absolute(f64),
    /// `max_k |h_k| / (1 + Σ_r |Φ_kr s_r|) ≤ tol`.
    TermRelative(f64),
}

impl Default for EquilibriumTol {
    fn default() -> Self {
        EquilibriumTol::Absolute(1e-8)
    }
}

impl EquilibriumTol {
    pub fn value(&self) -> f64 {
        match *self {
            EquilibriumTol::Absolute(t) | EquilibriumTol::TermRelative(t) => t,
        }
    }

    /// Residual measure under this policy.
    pub fn measure(&self, model: &Cpn1Model, v: &[f64]) -> f64 {
        match self {
            EquilibriumTol::Absolute(_) => model.residual_unchecked(v).amax(),
            EquilibriumTol::TermRelative(_) => model.relative_residual(v),
        }
    }
}

/// Linear descriptor model `E ẋ = A x + B u` about an operating point.
///
/// `x` stacks the states, outputs and algebraic variables; all are
/// deviations from the operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSystem {
    #[serde(with = "crate::serde_rows")]
    pub e: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub b: DMatrix<f64>,
    pub point: OperatingPoint,
    /// Names of the descriptor variables `x`.
    pub names: Vec<String>,
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Number of leading entries of `x` that are model states.
    #[serde(default)]
    pub n_states: usize,
}

impl DescriptorSystem {
    pub fn dim(&self) -> usize {
        self.e.nrows()
    }

    /// Builds a system from bare matrices (for hand-written pencils).
    pub fn from_matrices(e: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = e.nrows();
        if e.ncols() != n || a.nrows() != n || a.ncols() != n {
            return Err(Error::Dimension { what: "E and A must be square and equal".into(), expected: n, got: a.nrows() });
        }
        if b.nrows() != n {
            return Err(Error::Dimension { what: "rows of B".into(), expected: n, got: b.nrows() });
        }
        let names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let inputs: Vec<String> = (0..b.ncols()).map(|i| format!("u{i}")).collect();
        let part = SignalPartition::new::<String>(&[], &[], &[], &names)?;
        let point = OperatingPoint { v_bar: SignalVector::zeros(Arc::new(part)) };
        let n_states = (0..n).filter(|&i| e.column(i).iter().any(|x| *x != 0.0)).count();
        Ok(Self { e, a, b, point, names, inputs, n_states })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.e.nrows();
        if self.e.ncols() != n || self.a.shape() != (n, n) {
            return Err(Error::Dimension { what: "E and A must be square and equal".into(), expected: n, got: self.a.nrows() });
        }
        if self.b.nrows() != n {
            return Err(Error::Dimension { what: "rows of B".into(), expected: n, got: self.b.nrows() });
        }
        Ok(())
    }

    /// Rank of E by SVD with a relative threshold.
    pub fn rank_e(&self) -> usize {
        if self.e.is_empty() {
            return 0;
        }
        let sv = self.e.clone().singular_values();
        let tol = sv.max() * self.e.nrows() as f64 * f64::EPSILON;
        sv.iter().filter(|x| **x > tol).count()
    }
}

/// Extracts `(E, A, B)` at an equilibrium.
pub fn extract_ldss(model: &Cpn1Model, point: &OperatingPoint, tol: EquilibriumTol) -> Result<DescriptorSystem> {
    let part = model.partition();
    let v = point.values();
    if v.len() != model.nv() {
        return Err(Error::Dimension { what: "operating point length (N_v)".into(), expected: model.nv(), got: v.len() });
    }
    let (n, m) = (part.n(), part.m());
    let dim = n + part.p() + part.q();
    if model.n_eq() != dim {
        return Err(Error::NotSquare { equations: model.n_eq(), unknowns: dim });
    }
    let res = tol.measure(model, v);
    let zd = part.derivative_range().map(|i| v[i].abs()).fold(0.0, f64::max);
    if !(res <= tol.value()) || zd > tol.value() {
        let h = model.residual_unchecked(v);
        let worst = h.iamax();
        let detail = if zd > tol.value() {
            format!("; derivative slots are nonzero (max {zd:.3e})")
        } else {
            format!("; largest in `{}`", model.equation_label(worst))
        };
        return Err(Error::NotEquilibrium { residual: res.max(zd), tol: tol.value(), detail });
    }
    let jr = jacobian(model, point)?;
    let j = &jr.j;
    let mut e = DMatrix::zeros(dim, dim);
    for c in 0..n {
        e.set_column(c, &(-j.column(c)));
    }
    let mut a = DMatrix::zeros(dim, dim);
    for c in 0..n {
        a.set_column(c, &j.column(part.state_range().start + c));
    }
    let alg_start = part.output_range().start;
    for c in 0..part.p() + part.q() {
        a.set_column(n + c, &j.column(alg_start + c));
    }
    let b = j.columns(part.input_range().start, m).into_owned();
    let mut names: Vec<String> = part.state_names().to_vec();
    names.extend(part.output_names().iter().cloned());
    names.extend(part.algebraic_names().iter().cloned());
    Ok(DescriptorSystem {
        e,
        a,
        b,
        point: point.clone(),
        names,
        inputs: part.input_names().to_vec(),
        n_states: n,
    })
}
