use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::partition::{SignalKind, SignalPartition, SignalVector};
use crate::error::{Error, Result};

/// A unit-circle constraint `cos² + sin² − 1 = 0` between two lifted states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftConstraint {
    pub cos: String,
    pub sin: String,
}

impl LiftConstraint {
    pub fn new(cos: impl Into<String>, sin: impl Into<String>) -> Self {
        Self { cos: cos.into(), sin: sin.into() }
    }
}

/// Implicit multilinear model in CPN1 form: `0 = Φ · s(v)` with
/// `s_r(v) = ∏_i (1 − |S_ir| + S_ir v_i)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct Cpn1Model {
    partition: Arc<SignalPartition>,
    phi: DMatrix<f64>,
    s: DMatrix<f64>,
    equations: Vec<String>,
    lifts: Vec<LiftConstraint>,
    s_cols: Vec<Vec<(usize, f64)>>,
    phi_cols: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for Cpn1Model {
    fn eq(&self, other: &Self) -> bool {
        self.partition == other.partition
            && self.phi == other.phi
            && self.s == other.s
            && self.equations == other.equations
            && self.lifts == other.lifts
    }
}

fn check_finite(what: &str, m: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = m.iter().position(|x| !x.is_finite()) {
        let (r, c) = (pos % m.nrows(), pos / m.nrows());
        return Err(Error::NonFinite(format!("{what}[{r}][{c}]")));
    }
    Ok(())
}

impl Cpn1Model {
    pub fn new(partition: SignalPartition, phi: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        Self::with_metadata(Arc::new(partition), phi, s, Vec::new(), Vec::new())
    }

    /// Full constructor. `equations` is either empty or one label per row of Φ.
    pub fn with_metadata(
        partition: Arc<SignalPartition>,
        phi: DMatrix<f64>,
        s: DMatrix<f64>,
        equations: Vec<String>,
        lifts: Vec<LiftConstraint>,
    ) -> Result<Self> {
        if s.nrows() != partition.nv() {
            return Err(Error::Dimension {
                what: "rows of S (N_v)".into(),
                expected: partition.nv(),
                got: s.nrows(),
            });
        }
        if phi.ncols() != s.ncols() {
            return Err(Error::Dimension {
                what: "columns of Φ vs columns of S (R)".into(),
                expected: s.ncols(),
                got: phi.ncols(),
            });
        }
        check_finite("phi", &phi)?;
        check_finite("s", &s)?;
        if !equations.is_empty() && equations.len() != phi.nrows() {
            return Err(Error::Dimension {
                what: "equation labels".into(),
                expected: phi.nrows(),
                got: equations.len(),
            });
        }
        for l in &lifts {
            for name in [&l.cos, &l.sin] {
                let i = partition.require(name)?;
                if partition.kind(i) != SignalKind::State {
                    return Err(Error::InvalidModel(format!("lift signal `{name}` is not a state")));
                }
            }
        }
        let s_cols = (0..s.ncols())
            .map(|r| {
                s.column(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(i, &x)| (i, x))
                    .collect()
            })
            .collect();
        let phi_cols = (0..phi.ncols())
            .map(|r| {
                phi.column(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(k, &x)| (k, x))
                    .collect()
            })
            .collect();
        Ok(Self { partition, phi, s, equations, lifts, s_cols, phi_cols })
    }

    pub fn partition(&self) -> &SignalPartition {
        &self.partition
    }
    pub fn partition_arc(&self) -> &Arc<SignalPartition> {
        &self.partition
    }
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }
    /// Factor count R.
    pub fn r(&self) -> usize {
        self.s.ncols()
    }
    /// Equation count N_φ.
    pub fn n_eq(&self) -> usize {
        self.phi.nrows()
    }
    /// Algebraic-equation count Q = N_φ − n − p.
    pub fn q_eq(&self) -> usize {
        self.n_eq().saturating_sub(self.partition.n() + self.partition.p())
    }
    pub fn nv(&self) -> usize {
        self.partition.nv()
    }
    pub fn lifts(&self) -> &[LiftConstraint] {
        &self.lifts
    }

    /// Label of equation `k` (`eq<k>` when unlabeled).
    pub fn equation_label(&self, k: usize) -> String {
        self.equations.get(k).cloned().unwrap_or_else(|| format!("eq{k}"))
    }
    pub fn equation_labels(&self) -> Vec<String> {
        (0..self.n_eq()).map(|k| self.equation_label(k)).collect()
    }

    /// Nonzero `(signal, S_ir)` entries of column `r`.
    pub fn factor_support(&self, r: usize) -> &[(usize, f64)] {
        &self.s_cols[r]
    }
    /// Nonzero `(equation, Φ_kr)` entries of column `r`.
    pub fn phi_support(&self, r: usize) -> &[(usize, f64)] {
        &self.phi_cols[r]
    }

    /// Returns a copy with the same structure and a new Φ.
    pub fn with_phi(&self, phi: DMatrix<f64>) -> Result<Self> {
        Self::with_metadata(
            self.partition.clone(),
            phi,
            self.s.clone(),
            self.equations.clone(),
            self.lifts.clone(),
        )
    }

    /// Returns a copy with extra unit-circle constraints registered.
    pub fn with_lifts(&self, lifts: impl IntoIterator<Item = LiftConstraint>) -> Result<Self> {
        let mut all = self.lifts.clone();
        for l in lifts {
            if !all.contains(&l) {
                all.push(l);
            }
        }
        Self::with_metadata(self.partition.clone(), self.phi.clone(), self.s.clone(), self.equations.clone(), all)
    }

    /// Renames every signal through `f`. Derivative slots follow their
    /// state, so `der(x)` becomes `der(f(x))`.
    pub fn renamed(&self, f: impl Fn(&str) -> String) -> Result<Self> {
        let p = &self.partition;
        let names = p
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| match p.kind(i) {
                SignalKind::Derivative => super::partition::der(&f(p.name(i + p.n()))),
                _ => f(name),
            })
            .collect();
        let partition = SignalPartition::from_parts(p.n(), p.m(), p.p(), p.q(), names)?;
        let lifts = self.lifts.iter().map(|l| LiftConstraint::new(f(&l.cos), f(&l.sin))).collect();
        Self::with_metadata(Arc::new(partition), self.phi.clone(), self.s.clone(), self.equations.clone(), lifts)
    }

    /// Renames the signals listed in `map`; others keep their names.
    pub fn rename_signals(&self, map: &[(&str, &str)]) -> Result<Self> {
        let lookup: HashMap<&str, &str> = map.iter().copied().collect();
        self.renamed(|n| lookup.get(n).map_or_else(|| n.to_string(), |t| t.to_string()))
    }

    /// Appends input slots that no equation uses, keeping the model's
    /// residual unchanged. Names already present are skipped.
    pub fn with_inputs<S: AsRef<str>>(&self, extra: &[S]) -> Result<Self> {
        let p = &self.partition;
        let mut inputs: Vec<String> = p.input_names().to_vec();
        for e in extra {
            if p.index_of(e.as_ref()).is_none() && !inputs.iter().any(|i| i == e.as_ref()) {
                inputs.push(e.as_ref().to_string());
            }
        }
        let part = SignalPartition::new(p.state_names(), &inputs, p.output_names(), p.algebraic_names())?;
        let mut s = DMatrix::zeros(part.nv(), self.r());
        for r in 0..self.r() {
            for &(i, v) in &self.s_cols[r] {
                s[(part.index_of(p.name(i)).expect("kept"), r)] = v;
            }
        }
        Self::with_metadata(Arc::new(part), self.phi.clone(), s, self.equations.clone(), self.lifts.clone())
    }

    /// Same model over a reordered partition. Each list must be a
    /// permutation of the current names of that kind.
    pub fn with_signal_order<S: AsRef<str>>(&self, states: &[S], inputs: &[S], outputs: &[S], algebraics: &[S]) -> Result<Self> {
        let p = &self.partition;
        let same = |want: &[S], have: &[String], kind: &str| -> Result<()> {
            let mut a: Vec<&str> = want.iter().map(AsRef::as_ref).collect();
            let mut b: Vec<&str> = have.iter().map(String::as_str).collect();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(Error::InvalidModel(format!("reordering changes the set of {kind} signals")));
            }
            Ok(())
        };
        same(states, p.state_names(), "state")?;
        same(inputs, p.input_names(), "input")?;
        same(outputs, p.output_names(), "output")?;
        same(algebraics, p.algebraic_names(), "algebraic")?;
        let part = SignalPartition::new(states, inputs, outputs, algebraics)?;
        let mut s = DMatrix::zeros(part.nv(), self.r());
        for r in 0..self.r() {
            for &(i, v) in &self.s_cols[r] {
                s[(part.index_of(p.name(i)).expect("same names"), r)] = v;
            }
        }
        Self::with_metadata(Arc::new(part), self.phi.clone(), s, self.equations.clone(), self.lifts.clone())
    }

    fn check_vector(&self, v: &SignalVector) -> Result<()> {
        if !Arc::ptr_eq(v.partition(), &self.partition) && **v.partition() != *self.partition {
            if v.values().len() != self.nv() {
                return Err(Error::Dimension {
                    what: "signal count of vector vs model".into(),
                    expected: self.nv(),
                    got: v.values().len(),
                });
            }
            return Err(Error::InvalidModel("signal vector belongs to a different partition".into()));
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.nv() {
            return Err(Error::Dimension {
                what: "signal count (N_v)".into(),
                expected: self.nv(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Factor values `s(v)`.
    pub fn eval_factors(&self, v: &SignalVector) -> Result<DVector<f64>> {
        self.check_vector(v)?;
        Ok(self.factors_unchecked(v.values()))
    }

    /// Residual `h(v) = Φ s(v)`.
    pub fn eval_residual(&self, v: &SignalVector) -> Result<DVector<f64>> {
        self.check_vector(v)?;
        Ok(self.residual_unchecked(v.values()))
    }

    /// Residual on a raw slice ordered like the partition.
    pub fn residual_slice(&self, v: &[f64]) -> Result<DVector<f64>> {
        self.check_len(v)?;
        Ok(self.residual_unchecked(v))
    }

    pub fn factors_slice(&self, v: &[f64]) -> Result<DVector<f64>> {
        self.check_len(v)?;
        Ok(self.factors_unchecked(v))
    }

    pub(crate) fn factors_unchecked(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.r(),
            self.s_cols
                .iter()
                .map(|col| col.iter().map(|&(i, s)| 1.0 - s.abs() + s * v[i]).product::<f64>()),
        )
    }

    pub(crate) fn residual_unchecked(&self, v: &[f64]) -> DVector<f64> {
        let mut h = DVector::zeros(self.n_eq());
        self.residual_into(v, h.as_mut_slice());
        h
    }

    pub(crate) fn residual_into(&self, v: &[f64], h: &mut [f64]) {
        h.iter_mut().for_each(|x| *x = 0.0);
        for (col, phi) in self.s_cols.iter().zip(&self.phi_cols) {
            if phi.is_empty() {
                continue;
            }
            let sr: f64 = col.iter().map(|&(i, s)| 1.0 - s.abs() + s * v[i]).product();
            for &(k, c) in phi {
                h[k] += c * sr;
            }
        }
    }

    /// Per-equation term scale `Σ_r |Φ_kr s_r(v)|`, used to make residual
    /// tolerances relative to the magnitude of the terms that cancel.
    pub fn term_scale(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_eq());
        for (col, phi) in self.s_cols.iter().zip(&self.phi_cols) {
            let sr: f64 = col.iter().map(|&(i, s)| 1.0 - s.abs() + s * v[i]).product();
            for &(k, c) in phi {
                out[k] += (c * sr).abs();
            }
        }
        out
    }

    /// Max over equations of `|h_k| / (1 + Σ_r |Φ_kr s_r|)`.
    pub fn relative_residual(&self, v: &[f64]) -> f64 {
        let h = self.residual_unchecked(v);
        let sc = self.term_scale(v);
        h.iter().zip(sc.iter()).map(|(a, b)| a.abs() / (1.0 + b)).fold(0.0, f64::max)
    }

    /// Residual of each registered lift constraint.
    pub fn lift_residuals(&self, v: &[f64]) -> Vec<f64> {
        self.lifts
            .iter()
            .map(|l| {
                let c = v[self.partition.index_of(&l.cos).expect("validated")];
                let s = v[self.partition.index_of(&l.sin).expect("validated")];
                c * c + s * s - 1.0
            })
            .collect()
    }

    /// Evaluates the residual at many points, in parallel when enabled.
    pub fn eval_residual_batch(&self, points: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        for p in points {
            self.check_len(p)?;
        }
        Ok(crate::par::map(points, |p| self.residual_unchecked(p)))
    }

    pub fn sparsity_report(&self) -> SparsityReport {
        let column_degrees: Vec<usize> = self.s_cols.iter().map(Vec::len).collect();
        SparsityReport {
            r: self.r(),
            nv: self.nv(),
            n_phi: self.n_eq(),
            n: self.partition.n(),
            m: self.partition.m(),
            p: self.partition.p(),
            q: self.partition.q(),
            nnz_phi: self.phi_cols.iter().map(Vec::len).sum(),
            nnz_s: column_degrees.iter().sum(),
            max_degree: column_degrees.iter().copied().max().unwrap_or(0),
            column_degrees,
        }
    }

    /// Expands every rank-one column into the dense monomial tensor.
    pub fn to_full_tensor(&self) -> Result<FullTensorModel> {
        let nv = self.nv();
        if nv > FullTensorModel::MAX_NV {
            return Err(Error::TensorTooLarge { nv, limit: FullTensorModel::MAX_NV });
        }
        let n_eq = self.n_eq();
        let mut entries = vec![0.0; n_eq << nv];
        for (col, phi) in self.s_cols.iter().zip(&self.phi_cols) {
            let k = col.len();
            for subset in 0u32..(1u32 << k) {
                let mut coef = 1.0;
                let mut mono = 0usize;
                for (j, &(i, s)) in col.iter().enumerate() {
                    if subset >> j & 1 == 1 {
                        coef *= s;
                        mono |= 1 << i;
                    } else {
                        coef *= 1.0 - s.abs();
                    }
                }
                if coef == 0.0 {
                    continue;
                }
                for &(eq, c) in phi {
                    entries[mono * n_eq + eq] += c * coef;
                }
            }
        }
        Ok(FullTensorModel { nv, n_eq, entries })
    }
}

/// Structural summary of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub r: usize,
    pub nv: usize,
    pub n_phi: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub nnz_phi: usize,
    pub nnz_s: usize,
    pub max_degree: usize,
    pub column_degrees: Vec<usize>,
}

/// Dense parameter tensor `H` over all `2^N_v` multilinear monomials.
///
/// Monomial index convention: bit `i` of the index is set when signal `i`
/// (partition order) appears in the monomial, so index 0 is the constant
/// term and index `1 << i` is `v_i` alone. Entry `(mono, k)` is stored at
/// `entries[mono * n_eq + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullTensorModel {
    nv: usize,
    n_eq: usize,
    entries: Vec<f64>,
}

impl FullTensorModel {
    pub const MAX_NV: usize = 16;

    pub fn zeros(nv: usize, n_eq: usize) -> Result<Self> {
        if nv > Self::MAX_NV {
            return Err(Error::TensorTooLarge { nv, limit: Self::MAX_NV });
        }
        Ok(Self { nv, n_eq, entries: vec![0.0; n_eq << nv] })
    }

    pub fn from_entries(nv: usize, n_eq: usize, entries: Vec<f64>) -> Result<Self> {
        if nv > Self::MAX_NV {
            return Err(Error::TensorTooLarge { nv, limit: Self::MAX_NV });
        }
        if entries.len() != n_eq << nv {
            return Err(Error::Dimension {
                what: "tensor entries (N_φ·2^N_v)".into(),
                expected: n_eq << nv,
                got: entries.len(),
            });
        }
        Ok(Self { nv, n_eq, entries })
    }

    pub fn nv(&self) -> usize {
        self.nv
    }
    pub fn n_eq(&self) -> usize {
        self.n_eq
    }
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
    pub fn get(&self, mono: usize, eq: usize) -> f64 {
        self.entries[mono * self.n_eq + eq]
    }
    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|x| **x != 0.0).count()
    }

    /// Nonzero entries as `(monomial index, equation, value)`.
    pub fn nonzeros(&self) -> Vec<(usize, usize, f64)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, &x)| (i / self.n_eq, i % self.n_eq, x))
            .collect()
    }
}

/// Contracted product `⟨H | M(v)⟩` of a dense tensor with the monomial tensor of `v`.
pub fn contract_full(tensor: &FullTensorModel, v: &[f64]) -> Result<DVector<f64>> {
    if v.len() != tensor.nv {
        return Err(Error::Dimension {
            what: "signal count vs tensor order".into(),
            expected: tensor.nv,
            got: v.len(),
        });
    }
    let count = 1usize << tensor.nv;
    let mut mono = vec![1.0; count];
    for m in 1..count {
        let low = m.trailing_zeros() as usize;
        mono[m] = mono[m & (m - 1)] * v[low];
    }
    let mut h = DVector::zeros(tensor.n_eq);
    for (m, val) in mono.iter().enumerate() {
        let row = &tensor.entries[m * tensor.n_eq..(m + 1) * tensor.n_eq];
        for (k, c) in row.iter().enumerate() {
            h[k] += c * val;
        }
    }
    Ok(h)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    partition: SignalPartition,
    phi: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    equations: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    lifts: Vec<LiftConstraint>,
}

fn rows_to_matrix(what: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Dimension { what: format!("rows of {what}"), expected: nrows, got: rows.len() });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Dimension { what: format!("length of {what} row {i}"), expected: ncols, got: row.len() });
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl TryFrom<ModelFile> for Cpn1Model {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let r = f.phi.first().or(f.s.first()).map_or(0, Vec::len);
        let nv = f.partition.nv();
        let phi = rows_to_matrix("phi", &f.phi, f.phi.len(), r)?;
        let s = rows_to_matrix("s", &f.s, nv, r)?;
        Cpn1Model::with_metadata(Arc::new(f.partition), phi, s, f.equations, f.lifts)
    }
}

impl From<Cpn1Model> for ModelFile {
    fn from(m: Cpn1Model) -> Self {
        let rows = |x: &DMatrix<f64>| (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
        ModelFile {
            partition: (*m.partition).clone(),
            phi: rows(&m.phi),
            s: rows(&m.s),
            equations: m.equations,
            lifts: m.lifts,
        }
    }
}

/// Stacks models block-diagonally over a name-unified partition and adds one
/// equation `0 = a − b` per link `(a, b)`.
///
/// Signals with the same name are shared. A name defined (as a state,
/// output or algebraic variable) by one part may appear as an input of
/// others. A linked target that is still an input becomes an algebraic
/// variable of the composite.
pub fn compose(models: &[&Cpn1Model], links: &[(&str, &str)]) -> Result<Cpn1Model> {
    let mut kind: HashMap<String, (SignalKind, usize)> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for (pi, model) in models.iter().enumerate() {
        let part = model.partition();
        for (i, name) in part.names().iter().enumerate() {
            let k = part.kind(i);
            match kind.get(name) {
                None => {
                    kind.insert(name.clone(), (k, pi));
                    order.push(name.clone());
                }
                Some(&(prev, pj)) => {
                    if k == SignalKind::Input {
                        continue;
                    }
                    if prev != SignalKind::Input {
                        return Err(Error::InvalidModel(format!(
                            "signal `{name}` is defined by both part {pj} and part {pi}"
                        )));
                    }
                    kind.insert(name.clone(), (k, pi));
                }
            }
        }
    }

    let mut targets = HashSet::new();
    for &(a, b) in links {
        for name in [a, b] {
            if !kind.contains_key(name) {
                return Err(Error::UnknownSignal(name.to_string()));
            }
        }
        if !targets.insert(b) {
            return Err(Error::DuplicateLink(b.to_string()));
        }
    }

    let pick = |want: SignalKind| -> Vec<String> {
        order.iter().filter(|n| kind[*n].0 == want && !(want == SignalKind::Input && targets.contains(n.as_str()))).cloned().collect()
    };
    let states = pick(SignalKind::State);
    let inputs = pick(SignalKind::Input);
    let outputs = pick(SignalKind::Output);
    let mut algebraics = pick(SignalKind::Algebraic);
    algebraics.extend(
        order.iter().filter(|n| kind[*n].0 == SignalKind::Input && targets.contains(n.as_str())).cloned(),
    );
    for name in &order {
        if kind[name].0 == SignalKind::Derivative {
            let base = name.strip_prefix("der(").and_then(|s| s.strip_suffix(')'));
            if !base.is_some_and(|b| states.iter().any(|s| s == b)) {
                return Err(Error::InvalidModel(format!("derivative `{name}` has no matching state")));
            }
        }
    }
    let partition = Arc::new(SignalPartition::new(&states, &inputs, &outputs, &algebraics)?);

    let n_eq: usize = models.iter().map(|m| m.n_eq()).sum::<usize>() + links.len();
    let r: usize = models.iter().map(|m| m.r()).sum::<usize>() + 2 * links.len();
    let mut phi = DMatrix::zeros(n_eq, r);
    let mut s = DMatrix::zeros(partition.nv(), r);
    let mut labels = Vec::with_capacity(n_eq);
    let mut lifts: Vec<LiftConstraint> = Vec::new();
    let (mut row0, mut col0) = (0, 0);
    for model in models {
        let map: Vec<usize> = model
            .partition()
            .names()
            .iter()
            .map(|n| partition.index_of(n).expect("unified"))
            .collect();
        for c in 0..model.r() {
            for &(k, v) in model.phi_support(c) {
                phi[(row0 + k, col0 + c)] = v;
            }
            for &(i, v) in model.factor_support(c) {
                s[(map[i], col0 + c)] = v;
            }
        }
        labels.extend(model.equation_labels());
        for l in model.lifts() {
            if !lifts.contains(l) {
                lifts.push(l.clone());
            }
        }
        row0 += model.n_eq();
        col0 += model.r();
    }
    for &(a, b) in links {
        let ia = partition.index_of(a).expect("checked");
        let ib = partition.index_of(b).expect("checked");
        phi[(row0, col0)] = 1.0;
        s[(ia, col0)] = 1.0;
        phi[(row0, col0 + 1)] = -1.0;
        s[(ib, col0 + 1)] = 1.0;
        labels.push(format!("link({a}->{b})"));
        row0 += 1;
        col0 += 2;
    }
    Cpn1Model::with_metadata(partition, phi, s, labels, lifts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 0 = p − v_a i_a − v_b i_b − v_c i_c
    fn power_model() -> Cpn1Model {
        let part = SignalPartition::new(&[], &["va", "vb", "vc", "ia", "ib", "ic"], &["p"], &[]).unwrap();
        let phi = DMatrix::from_row_slice(1, 4, &[1.0, -1.0, -1.0, -1.0]);
        let mut s = DMatrix::zeros(7, 4);
        s[(6, 0)] = 1.0;
        s[(0, 1)] = 1.0;
        s[(3, 1)] = 1.0;
        s[(1, 2)] = 1.0;
        s[(4, 2)] = 1.0;
        s[(2, 3)] = 1.0;
        s[(5, 3)] = 1.0;
        Cpn1Model::new(part, phi, s).unwrap()
    }

    fn vec_for(m: &Cpn1Model, pairs: &[(&str, f64)]) -> SignalVector {
        SignalVector::from_named(m.partition_arc().clone(), pairs.iter().copied()).unwrap()
    }

    #[test]
    fn factors_of_power_model() {
        let m = power_model();
        let v = vec_for(&m, &[("va", 2.0), ("ia", 3.0)]);
        let s = m.eval_factors(&v).unwrap();
        assert_eq!(s[1], 6.0);
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn zero_structure_gives_unit_factors() {
        let part = SignalPartition::new(&["x"], &[], &[], &[]).unwrap();
        let m = Cpn1Model::new(part, DMatrix::zeros(1, 3), DMatrix::zeros(2, 3)).unwrap();
        let v = vec_for(&m, &[("x", 5.0)]);
        assert_eq!(m.eval_factors(&v).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn power_residual() {
        let m = power_model();
        let mut v = vec_for(&m, &[("va", 1.0), ("vb", 2.0), ("vc", 3.0), ("ia", 4.0), ("ib", 5.0), ("ic", 6.0)]);
        v.set("p", 32.0).unwrap();
        assert_eq!(m.eval_residual(&v).unwrap()[0], 0.0);
        v.set("p", 33.0).unwrap();
        assert_eq!(m.eval_residual(&v).unwrap()[0], 1.0);
    }

    #[test]
    fn power_tensor_and_report() {
        let m = power_model();
        let t = m.to_full_tensor().unwrap();
        let mut vals: Vec<f64> = t.nonzeros().iter().map(|x| x.2).collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![-1.0, -1.0, -1.0, 1.0]);
        assert_eq!(t.get(1 << 6, 0), 1.0);
        assert_eq!(t.get((1 << 0) | (1 << 3), 0), -1.0);
        let rep = m.sparsity_report();
        assert_eq!((rep.r, rep.nv, rep.n_phi), (4, 7, 1));
        assert_eq!(rep.nnz_s, 7);
    }

    #[test]
    fn single_term_tensor() {
        let part = SignalPartition::new(&[], &[], &["x"], &[]).unwrap();
        let m = Cpn1Model::new(part, DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let t = m.to_full_tensor().unwrap();
        assert_eq!(t.nonzeros(), vec![(1, 0, 1.0)]);
    }

    #[test]
    fn empty_model_report() {
        let part = SignalPartition::new::<&str>(&[], &[], &[], &[]).unwrap();
        let m = Cpn1Model::new(part, DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)).unwrap();
        let rep = m.sparsity_report();
        assert_eq!((rep.r, rep.nv, rep.n_phi, rep.nnz_phi, rep.nnz_s), (0, 0, 0, 0, 0));
    }

    #[test]
    fn tensor_guard() {
        let names: Vec<String> = (0..17).map(|i| format!("u{i}")).collect();
        let part = SignalPartition::new(&[], &names, &[], &[]).unwrap();
        let m = Cpn1Model::new(part, DMatrix::zeros(1, 0), DMatrix::zeros(17, 0)).unwrap();
        assert!(matches!(m.to_full_tensor(), Err(Error::TensorTooLarge { nv: 17, .. })));
    }

    #[test]
    fn contraction_of_zero_tensor() {
        let t = FullTensorModel::zeros(3, 2).unwrap();
        assert_eq!(contract_full(&t, &[1.0, 2.0, 3.0]).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn example_monomial_order() {
        // n = 1, q = 1: v = (ż, z, α), 8 monomials.
        let mut e = vec![0.0; 8];
        for (i, x) in e.iter_mut().enumerate() {
            *x = i as f64;
        }
        let t = FullTensorModel::from_entries(3, 1, e).unwrap();
        let (zd, z, a) = (2.0, 3.0, 5.0);
        let expect = 1.0 * zd + 2.0 * z + 3.0 * zd * z + 4.0 * a + 5.0 * zd * a + 6.0 * z * a + 7.0 * zd * z * a;
        assert_eq!(contract_full(&t, &[zd, z, a]).unwrap()[0], expect);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = power_model();
        assert!(matches!(m.residual_slice(&[1.0; 3]), Err(Error::Dimension { expected: 7, got: 3, .. })));
        let other = Arc::new(SignalPartition::new(&["x"], &[], &[], &[]).unwrap());
        assert!(m.eval_residual(&SignalVector::zeros(other)).is_err());
    }

    #[test]
    fn json_round_trip_and_nan_rejection() {
        let m = power_model();
        let txt = serde_json::to_string(&m).unwrap();
        let back: Cpn1Model = serde_json::from_str(&txt).unwrap();
        assert_eq!(m, back);
        let bad = txt.replacen("-1.0", "1e999", 1);
        assert!(serde_json::from_str::<Cpn1Model>(&bad).is_err());
    }

    fn gain(name_u: &str, name_y: &str, k: f64) -> Cpn1Model {
        let part = SignalPartition::new(&[], &[name_u], &[name_y], &[]).unwrap();
        let phi = DMatrix::from_row_slice(1, 2, &[1.0, -k]);
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        Cpn1Model::new(part, phi, s).unwrap()
    }

    #[test]
    fn series_gain_composition() {
        let g1 = gain("u1", "y1", 2.0);
        let g2 = gain("u2", "y2", 3.0);
        let c = compose(&[&g1, &g2], &[("y1", "u2")]).unwrap();
        let p = c.partition();
        assert_eq!((p.m(), p.p(), p.q(), c.n_eq()), (1, 2, 1, 3));
        let v = SignalVector::from_named(
            c.partition_arc().clone(),
            [("u1", 1.5), ("y1", 3.0), ("u2", 3.0), ("y2", 9.0)],
        )
        .unwrap();
        assert!(c.eval_residual(&v).unwrap().iter().all(|x| *x == 0.0));
        assert_eq!(v.get("y2").unwrap(), 6.0 * v.get("u1").unwrap());
    }

    #[test]
    fn compose_errors() {
        let g1 = gain("u1", "y1", 2.0);
        let g2 = gain("u2", "y2", 3.0);
        assert!(matches!(compose(&[&g1, &g2], &[("nope", "u2")]), Err(Error::UnknownSignal(_))));
        assert!(matches!(
            compose(&[&g1, &g2], &[("y1", "u2"), ("y1", "u2")]),
            Err(Error::DuplicateLink(_))
        ));
        assert!(compose(&[&g1, &g1], &[]).is_err());
    }

    #[test]
    fn compose_without_links_concatenates() {
        let g1 = gain("u1", "y1", 2.0);
        let g2 = gain("u2", "y2", 3.0);
        let c = compose(&[&g1, &g2], &[]).unwrap();
        let v = SignalVector::from_named(c.partition_arc().clone(), [("u1", 1.0), ("y1", 5.0), ("u2", 2.0), ("y2", 1.0)])
            .unwrap();
        let h = c.eval_residual(&v).unwrap();
        assert_eq!(h.as_slice(), &[3.0, -5.0]);
    }
}
