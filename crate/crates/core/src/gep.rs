//! Generalized eigenvalues of descriptor pencils, stability verdicts,
//! reduction to proper form and eigenvalue matching.

use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::linalg::evd::ComputeEigenvectors;
use faer::linalg::gevd;
use faer::{Mat, Par};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::DescriptorSystem;

/// Options for [`generalized_eig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GepOptions {
    /// `|β| ≤ infinite_tol · max(‖A‖, ‖E‖)` classifies an eigenvalue as infinite.
    pub infinite_tol: f64,
    /// Apply diagonal row/column scaling before the QZ step.
    pub balance: bool,
}

impl Default for GepOptions {
    fn default() -> Self {
        Self { infinite_tol: 1e-12, balance: true }
    }
}

/// Eigen-decomposition of the pencil `λE − A`.
///
/// Column `j` of `right_vectors` satisfies `A v = λ_j E v`; column `j` of
/// `left_vectors` satisfies `wᴴ A = λ_j wᴴ E`. `alphas[j] / betas[j]` is the
/// eigenvalue of column `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GepSolution {
    #[serde(with = "complex_list")]
    pub finite: Vec<Complex64>,
    pub infinite_count: usize,
    /// Column index of each entry of `finite`.
    pub finite_index: Vec<usize>,
    #[serde(with = "complex_list")]
    pub alphas: Vec<Complex64>,
    pub betas: Vec<f64>,
    #[serde(with = "complex_rows")]
    pub right_vectors: DMatrix<Complex64>,
    #[serde(with = "complex_rows")]
    pub left_vectors: DMatrix<Complex64>,
}

impl GepSolution {
    pub fn dim(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_infinite(&self, j: usize) -> bool {
        !self.finite_index.contains(&j)
    }

    /// Finite eigenvalues whose magnitude exceeds `tol`.
    pub fn nonzero_finite(&self, tol: f64) -> Vec<Complex64> {
        self.finite.iter().copied().filter(|l| l.norm() > tol).collect()
    }
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Diagonal scalings `(dl, dr)` (powers of two) that even out row and
/// column magnitudes of `|A| + |E|`.
fn balance(a: &DMatrix<f64>, e: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut dl = vec![1.0; n];
    let mut dr = vec![1.0; n];
    let mag = |i: usize, j: usize, dl: &[f64], dr: &[f64]| (a[(i, j)].abs() + e[(i, j)].abs()) * dl[i] * dr[j];
    for _ in 0..8 {
        let mut changed = false;
        for i in 0..n {
            let s: f64 = (0..n).map(|j| mag(i, j, &dl, &dr)).fold(0.0, f64::max);
            if s > 0.0 {
                let f = (-s.log2()).round().exp2();
                if f != 1.0 {
                    dl[i] *= f;
                    changed = true;
                }
            }
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| mag(i, j, &dl, &dr)).fold(0.0, f64::max);
            if s > 0.0 {
                let f = (-s.log2()).round().exp2();
                if f != 1.0 {
                    dr[j] *= f;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (dl, dr)
}

/// Real-form eigenvector block from the QZ routine to complex columns.
/// `sign` is the sign of the imaginary part taken for the first column of a pair.
fn unpack(vecs: &Mat<f64>, im: &[f64], scale: &[f64], sign: f64) -> DMatrix<Complex64> {
    let n = vecs.nrows();
    let mut out = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let mut j = 0;
    while j < n {
        if im[j] != 0.0 && j + 1 < n {
            for i in 0..n {
                let re = vecs[(i, j)] * scale[i];
                let ii = sign * vecs[(i, j + 1)] * scale[i];
                out[(i, j)] = Complex64::new(re, ii);
                out[(i, j + 1)] = Complex64::new(re, -ii);
            }
            j += 2;
        } else {
            for i in 0..n {
                out[(i, j)] = Complex64::new(vecs[(i, j)] * scale[i], 0.0);
            }
            j += 1;
        }
    }
    for mut c in out.column_iter_mut() {
        let nrm = c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm > 0.0 {
            c /= Complex64::new(nrm, 0.0);
        }
    }
    out
}

/// Solves `A v = λ E v` with a dense QZ iteration.
pub fn generalized_eig(sys: &DescriptorSystem, opts: GepOptions) -> Result<GepSolution> {
    sys.validate()?;
    pencil_eig(&sys.e, &sys.a, opts)
}

/// Like [`generalized_eig`] on bare matrices.
pub fn pencil_eig(e: &DMatrix<f64>, a: &DMatrix<f64>, opts: GepOptions) -> Result<GepSolution> {
    let n = a.nrows();
    if e.shape() != (n, n) || a.ncols() != n {
        return Err(Error::Dimension { what: "pencil must be square".into(), expected: n, got: e.nrows() });
    }
    if a.iter().chain(e.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pencil matrices".into()));
    }
    let empty = || DMatrix::from_element(0, 0, Complex64::new(0.0, 0.0));
    if n == 0 {
        return Ok(GepSolution {
            finite: vec![],
            infinite_count: 0,
            finite_index: vec![],
            alphas: vec![],
            betas: vec![],
            right_vectors: empty(),
            left_vectors: empty(),
        });
    }
    let (dl, dr) = if opts.balance { balance(a, e) } else { (vec![1.0; n], vec![1.0; n]) };
    let ab = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * dl[i] * dr[j]);
    let eb = DMatrix::from_fn(n, n, |i, j| e[(i, j)] * dl[i] * dr[j]);
    let norm = ab.norm().max(eb.norm());

    let mut fa = to_faer(&ab);
    let mut fe = to_faer(&eb);
    let mut re = faer::diag::Diag::<f64>::zeros(n);
    let mut im = faer::diag::Diag::<f64>::zeros(n);
    let mut beta = faer::diag::Diag::<f64>::zeros(n);
    let mut ul = Mat::<f64>::zeros(n, n);
    let mut ur = Mat::<f64>::zeros(n, n);
    let par = Par::Seq;
    // The scratch estimate of the eigenvector back-transformation is short
    // for some sizes; pad it.
    let req = gevd::gevd_scratch::<f64>(n, ComputeEigenvectors::Yes, ComputeEigenvectors::Yes, par, Default::default())
        .and(StackReq::new::<f64>(8 * n * n + 16 * n + 64));
    let mut buf = MemBuffer::new(req);
    gevd::gevd_real(
        fa.as_mut(),
        fe.as_mut(),
        re.as_mut(),
        im.as_mut(),
        beta.as_mut(),
        Some(ul.as_mut()),
        Some(ur.as_mut()),
        par,
        MemStack::new(&mut buf),
        Default::default(),
    )
    .map_err(|e| Error::Eigen(format!("{e:?}")))?;

    let im_v: Vec<f64> = (0..n).map(|i| im[i]).collect();
    let mut alphas: Vec<Complex64> = (0..n).map(|i| Complex64::new(re[i], im[i])).collect();
    let mut betas: Vec<f64> = (0..n).map(|i| beta[i]).collect();
    // The second member of a 2x2 block can come back with a beta that does
    // not match its alpha; both share the first member's beta instead.
    let mut j = 0;
    while j < n {
        if im_v[j] != 0.0 && j + 1 < n && im_v[j + 1] * im_v[j] < 0.0 {
            alphas[j + 1] = alphas[j].conj();
            betas[j + 1] = betas[j];
            j += 2;
        } else {
            j += 1;
        }
    }
    let thr = opts.infinite_tol * norm;
    let mut finite = Vec::new();
    let mut finite_index = Vec::new();
    for j in 0..n {
        if alphas[j].norm() <= thr && betas[j].abs() <= thr {
            return Err(Error::SingularPencil(format!(
                "pair {j} has alpha = {:.3e}, beta = {:.3e}",
                alphas[j].norm(),
                betas[j]
            )));
        }
        if betas[j].abs() > thr {
            finite.push(alphas[j] / betas[j]);
            finite_index.push(j);
        }
    }
    // v = Dr ṽ, w = Dl w̃. The kernel's left vectors satisfy wᵀA = λwᵀE,
    // so they are conjugated here.
    let right_vectors = unpack(&ur, &im_v, &dr, 1.0);
    let left_vectors = unpack(&ul, &im_v, &dl, -1.0);
    Ok(GepSolution {
        infinite_count: n - finite.len(),
        finite,
        finite_index,
        alphas,
        betas,
        right_vectors,
        left_vectors,
    })
}

/// Small-signal verdict for a set of generalized eigenvalues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    /// Some nonzero eigenvalue lies on the imaginary axis within `tol`.
    pub marginal: bool,
    /// Largest real part among finite eigenvalues.
    pub margin: f64,
    pub zero_eigs: usize,
    /// Nonzero finite eigenvalue(s) with the largest real part.
    #[serde(with = "complex_list")]
    pub dominant: Vec<Complex64>,
    pub tol: f64,
}

/// Default verdict tolerance `1e-6 · max(1, ρ)` with `ρ` the largest finite magnitude.
pub fn default_tol(sol: &GepSolution) -> f64 {
    let rho = sol.finite.iter().map(|l| l.norm()).fold(0.0, f64::max);
    1e-6 * rho.max(1.0)
}

/// Unstable iff some finite eigenvalue has `Re λ > tol`. Eigenvalues with
/// `|λ| ≤ tol` are counted as zeros and do not affect stability.
pub fn stability_verdict(sol: &GepSolution, tol: f64) -> StabilityVerdict {
    let margin = sol.finite.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let zero_eigs = sol.finite.iter().filter(|l| l.norm() <= tol).count();
    let nonzero: Vec<Complex64> = sol.finite.iter().copied().filter(|l| l.norm() > tol).collect();
    let top = nonzero.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let dominant: Vec<Complex64> = nonzero.iter().copied().filter(|l| (l.re - top).abs() <= tol).collect();
    let stable = sol.finite.iter().all(|l| l.re <= tol);
    let marginal = stable && nonzero.iter().any(|l| l.re.abs() <= tol);
    StabilityVerdict {
        stable,
        marginal,
        margin: if sol.finite.is_empty() { f64::NEG_INFINITY } else { margin },
        zero_eigs,
        dominant,
        tol,
    }
}

/// Standard state-space model `ẋ₁ = A x₁ + B u` obtained by eliminating the
/// algebraic part of a descriptor system, with `x₂ = C x₁ + D u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProperSystem {
    #[serde(with = "crate::serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub d: DMatrix<f64>,
    pub kept: Vec<String>,
    pub eliminated: Vec<String>,
}

fn rank_defect(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    // Equilibrate rows and columns first so the verdict does not depend on
    // the units of the variables.
    let mut w = m.clone();
    for _ in 0..4 {
        for mut r in w.row_iter_mut() {
            let s = r.amax();
            if s > 0.0 {
                r /= s;
            }
        }
        for mut c in w.column_iter_mut() {
            let s = c.amax();
            if s > 0.0 {
                c /= s;
            }
        }
    }
    let sv = w.singular_values();
    let tol = sv.max() * m.nrows().max(m.ncols()) as f64 * 1e-13;
    sv.iter().filter(|x| **x <= tol).count()
}

/// Reduces a descriptor system to `E = I` form by block elimination.
///
/// Variables whose column of `E` is zero are eliminated; the remaining
/// columns of `E` must have full column rank and the resulting algebraic
/// block must be invertible.
pub fn to_proper(sys: &DescriptorSystem) -> Result<ProperSystem> {
    sys.validate()?;
    let n = sys.dim();
    let m = sys.b.ncols();
    let dyn_cols: Vec<usize> = (0..n).filter(|&j| sys.e.column(j).iter().any(|x| *x != 0.0)).collect();
    let alg_cols: Vec<usize> = (0..n).filter(|j| !dyn_cols.contains(j)).collect();
    let k = dyn_cols.len();
    let pick = |mat: &DMatrix<f64>, cols: &[usize]| DMatrix::from_fn(mat.nrows(), cols.len(), |i, j| mat[(i, cols[j])]);
    let e1 = pick(&sys.e, &dyn_cols);
    let a1 = pick(&sys.a, &dyn_cols);
    let a2 = pick(&sys.a, &alg_cols);

    // Row compression: P E1 = L U with L unit lower trapezoidal, completed by
    // an identity block to an invertible T⁻¹.
    let lu = e1.clone().lu();
    let u = lu.u();
    let l = lu.l();
    let defect = (0..k).filter(|&i| u[(i, i)].abs() <= 1e-13 * e1.amax().max(1e-300)).count();
    if defect > 0 {
        return Err(Error::AlgebraicRankDefect { defect, size: k });
    }
    let mut lfull = DMatrix::<f64>::identity(n, n);
    lfull.view_mut((0, 0), (n, k)).copy_from(&l);
    let lfull_inv = lfull.try_inverse().ok_or_else(|| Error::Eigen("row compression failed".into()))?;
    let apply = |mat: &DMatrix<f64>| {
        let mut x = mat.clone();
        lu.p().permute_rows(&mut x);
        &lfull_inv * x
    };
    let ta1 = apply(&a1);
    let ta2 = apply(&a2);
    let tb = apply(&sys.b);
    let r = n - k;
    let a11 = ta1.rows(0, k).into_owned();
    let a21 = ta1.rows(k, r).into_owned();
    let a12 = ta2.rows(0, k).into_owned();
    let a22 = ta2.rows(k, r).into_owned();
    let b1 = tb.rows(0, k).into_owned();
    let b2 = tb.rows(k, r).into_owned();

    let (c, d) = if r == 0 {
        (DMatrix::zeros(0, k), DMatrix::zeros(0, m))
    } else {
        let defect = rank_defect(&a22);
        if defect > 0 {
            return Err(Error::AlgebraicRankDefect { defect, size: r });
        }
        let f = a22.lu();
        let c = -f.solve(&a21).ok_or(Error::AlgebraicRankDefect { defect: 1, size: r })?;
        let d = -f.solve(&b2).ok_or(Error::AlgebraicRankDefect { defect: 1, size: r })?;
        (c, d)
    };
    let u1 = u.try_inverse().ok_or(Error::AlgebraicRankDefect { defect: 1, size: k })?;
    let a = &u1 * (&a11 + &a12 * &c);
    let b = &u1 * (&b1 + &a12 * &d);
    Ok(ProperSystem {
        a,
        b,
        c,
        d,
        kept: dyn_cols.iter().map(|&j| sys.names[j].clone()).collect(),
        eliminated: alg_cols.iter().map(|&j| sys.names[j].clone()).collect(),
    })
}

/// One matched pair of eigenvalues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigPair {
    #[serde(with = "complex_one")]
    pub a: Complex64,
    #[serde(with = "complex_one")]
    pub b: Complex64,
    pub distance: f64,
    /// `distance / max(|a|, |b|, 1)`.
    pub relative: f64,
    pub within_tol: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub pairs: Vec<EigPair>,
    #[serde(with = "complex_list")]
    pub unmatched_a: Vec<Complex64>,
    #[serde(with = "complex_list")]
    pub unmatched_b: Vec<Complex64>,
    pub max_distance: f64,
    pub max_relative: f64,
    pub tol: f64,
}

impl CompareReport {
    pub fn all_within(&self) -> bool {
        self.pairs.iter().all(|p| p.within_tol)
    }
}

/// Greedy global nearest-neighbour pairing of two eigenvalue sets.
/// Pairs are accepted in order of increasing distance; `tol` bounds the
/// relative distance of each pair.
pub fn eig_compare(a: &[Complex64], b: &[Complex64], tol: f64) -> CompareReport {
    let mut cand: Vec<(f64, usize, usize)> =
        a.iter().enumerate().flat_map(|(i, x)| b.iter().enumerate().map(move |(j, y)| ((x - y).norm(), i, j))).collect();
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in cand {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        let relative = d / a[i].norm().max(b[j].norm()).max(1.0);
        pairs.push(EigPair { a: a[i], b: b[j], distance: d, relative, within_tol: relative <= tol });
    }
    pairs.sort_by(|x, y| x.a.re.total_cmp(&y.a.re).then(x.a.im.total_cmp(&y.a.im)));
    let unmatched_a = a.iter().zip(&used_a).filter(|(_, u)| !**u).map(|(x, _)| *x).collect();
    let unmatched_b = b.iter().zip(&used_b).filter(|(_, u)| !**u).map(|(x, _)| *x).collect();
    CompareReport {
        max_distance: pairs.iter().map(|p| p.distance).fold(0.0, f64::max),
        max_relative: pairs.iter().map(|p| p.relative).fold(0.0, f64::max),
        pairs,
        unmatched_a,
        unmatched_b,
        tol,
    }
}

mod complex_one {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        [z.re, z.im].serialize(s)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(Complex64::new(re, im))
    }
}

pub(crate) mod complex_list {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>().serialize(s)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Complex64>, D::Error> {
        Ok(Vec::<[f64; 2]>::deserialize(d)?.into_iter().map(|[re, im]| Complex64::new(re, im)).collect())
    }
}

mod complex_rows {
    use nalgebra::DMatrix;
    use num_complex::Complex64;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Parts {
        re: Vec<Vec<f64>>,
        im: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<Complex64>, s: S) -> Result<S::Ok, S::Error> {
        let rows = |f: fn(&Complex64) -> f64| (0..m.nrows()).map(|i| m.row(i).iter().map(f).collect()).collect();
        Parts { re: rows(|z| z.re), im: rows(|z| z.im) }.serialize(s)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<Complex64>, D::Error> {
        let p = Parts::deserialize(d)?;
        let re = crate::serde_rows::from_rows(&p.re, 0).ok_or_else(|| D::Error::custom("ragged rows"))?;
        let im = crate::serde_rows::from_rows(&p.im, 0).ok_or_else(|| D::Error::custom("ragged rows"))?;
        if re.shape() != im.shape() {
            return Err(D::Error::custom("re/im shape mismatch"));
        }
        Ok(DMatrix::from_fn(re.nrows(), re.ncols(), |i, j| Complex64::new(re[(i, j)], im[(i, j)])))
    }
}
