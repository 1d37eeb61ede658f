use std::collections::HashMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use nalgebra::DMatrix;

use super::model::{Cpn1Model, LiftConstraint};
use super::partition::{der, SignalPartition};
use crate::error::{Error, Result};

/// One product term `coef · ∏ factors`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub coef: f64,
    /// Signal names, sorted. Repeats are kept so the builder can reject them.
    pub factors: Vec<String>,
}

/// Polynomial over named signals, used to write block equations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly {
    terms: Vec<Term>,
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn var(name: impl Into<String>) -> Self {
        Self { terms: vec![Term { coef: 1.0, factors: vec![name.into()] }] }
    }

    /// The derivative slot of state `name`.
    pub fn der(name: &str) -> Self {
        Self::var(der(name))
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: vec![Term { coef: c, factors: Vec::new() }] }.normalized()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// True when some term contains `name`.
    pub fn mentions(&self, name: &str) -> bool {
        self.terms.iter().any(|t| t.factors.iter().any(|f| f == name))
    }

    /// Replaces every occurrence of signal `from` by `to`.
    pub fn rename(&self, from: &str, to: &str) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut factors: Vec<String> =
                    t.factors.iter().map(|f| if f == from { to.to_string() } else { f.clone() }).collect();
                factors.sort();
                Term { coef: t.coef, factors }
            })
            .collect();
        Self { terms }.normalized()
    }

    /// Evaluates with a lookup for signal values.
    pub fn eval(&self, value: impl Fn(&str) -> f64) -> f64 {
        self.terms.iter().map(|t| t.coef * t.factors.iter().map(|f| value(f)).product::<f64>()).sum()
    }

    fn normalized(self) -> Self {
        let mut index: HashMap<Vec<String>, usize> = HashMap::new();
        let mut out: Vec<Term> = Vec::new();
        for t in self.terms {
            match index.get(&t.factors) {
                Some(&i) => out[i].coef += t.coef,
                None => {
                    index.insert(t.factors.clone(), out.len());
                    out.push(t);
                }
            }
        }
        out.retain(|t| t.coef != 0.0);
        Self { terms: out }
    }
}

impl From<f64> for Poly {
    fn from(c: f64) -> Self {
        Poly::constant(c)
    }
}

impl Add for Poly {
    type Output = Poly;
    fn add(mut self, rhs: Poly) -> Poly {
        self.terms.extend(rhs.terms);
        self.normalized()
    }
}

impl AddAssign for Poly {
    fn add_assign(&mut self, rhs: Poly) {
        *self = std::mem::take(self) + rhs;
    }
}

impl Sub for Poly {
    type Output = Poly;
    fn sub(self, rhs: Poly) -> Poly {
        self + (-rhs)
    }
}

impl SubAssign for Poly {
    fn sub_assign(&mut self, rhs: Poly) {
        *self = std::mem::take(self) - rhs;
    }
}

impl Neg for Poly {
    type Output = Poly;
    fn neg(mut self) -> Poly {
        for t in &mut self.terms {
            t.coef = -t.coef;
        }
        self
    }
}

impl Mul for Poly {
    type Output = Poly;
    fn mul(self, rhs: Poly) -> Poly {
        let mut terms = Vec::with_capacity(self.terms.len() * rhs.terms.len());
        for a in &self.terms {
            for b in &rhs.terms {
                let mut factors = a.factors.clone();
                factors.extend(b.factors.iter().cloned());
                factors.sort();
                terms.push(Term { coef: a.coef * b.coef, factors });
            }
        }
        Poly { terms }.normalized()
    }
}

impl Mul<f64> for Poly {
    type Output = Poly;
    fn mul(mut self, c: f64) -> Poly {
        for t in &mut self.terms {
            t.coef *= c;
        }
        self.normalized()
    }
}

impl Mul<Poly> for f64 {
    type Output = Poly;
    fn mul(self, p: Poly) -> Poly {
        p * self
    }
}

impl Add<f64> for Poly {
    type Output = Poly;
    fn add(self, c: f64) -> Poly {
        self + Poly::constant(c)
    }
}

impl Sub<f64> for Poly {
    type Output = Poly;
    fn sub(self, c: f64) -> Poly {
        self - Poly::constant(c)
    }
}

/// Shorthand for [`Poly::var`].
pub fn var(name: &str) -> Poly {
    Poly::var(name)
}

/// Assembles a CPN1 model from named signals and polynomial equations.
///
/// Identical monomials within one builder share a factor column.
#[derive(Clone, Debug, Default)]
pub struct ModelBuilder {
    states: Vec<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    algebraics: Vec<String>,
    equations: Vec<(String, Poly)>,
    lifts: Vec<LiftConstraint>,
}

impl ModelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&mut self, name: impl Into<String>) -> &mut Self {
        self.states.push(name.into());
        self
    }
    pub fn input(&mut self, name: impl Into<String>) -> &mut Self {
        self.inputs.push(name.into());
        self
    }
    pub fn output(&mut self, name: impl Into<String>) -> &mut Self {
        self.outputs.push(name.into());
        self
    }
    pub fn algebraic(&mut self, name: impl Into<String>) -> &mut Self {
        self.algebraics.push(name.into());
        self
    }

    /// Adds the equation `0 = poly`.
    pub fn equation(&mut self, label: impl Into<String>, poly: Poly) -> &mut Self {
        self.equations.push((label.into(), poly));
        self
    }

    pub fn lift(&mut self, cos: impl Into<String>, sin: impl Into<String>) -> &mut Self {
        self.lifts.push(LiftConstraint::new(cos, sin));
        self
    }

    pub fn build(&self) -> Result<Cpn1Model> {
        let partition = SignalPartition::new(&self.states, &self.inputs, &self.outputs, &self.algebraics)?;
        let mut columns: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut supports: Vec<Vec<usize>> = Vec::new();
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (k, (label, poly)) in self.equations.iter().enumerate() {
            for t in poly.terms() {
                if let Some(w) = t.factors.windows(2).find(|w| w[0] == w[1]) {
                    return Err(Error::NotMultilinear(format!(
                        "`{}` appears twice in the term {} of equation `{label}`",
                        w[0],
                        t.factors.join("*")
                    )));
                }
                let mut key = Vec::with_capacity(t.factors.len());
                for f in &t.factors {
                    let i = partition.index_of(f).ok_or_else(|| {
                        Error::UnknownSignal(format!("{f} (in equation `{label}`)"))
                    })?;
                    key.push(i);
                }
                key.sort_unstable();
                let col = *columns.entry(key.clone()).or_insert_with(|| {
                    supports.push(key);
                    supports.len() - 1
                });
                entries.push((k, col, t.coef));
            }
        }
        let r = supports.len();
        let mut phi = DMatrix::zeros(self.equations.len(), r);
        for (k, c, v) in entries {
            phi[(k, c)] += v;
        }
        let mut s = DMatrix::zeros(partition.nv(), r);
        for (c, sup) in supports.iter().enumerate() {
            for &i in sup {
                s[(i, c)] = 1.0;
            }
        }
        let labels = self.equations.iter().map(|(l, _)| l.clone()).collect();
        Cpn1Model::with_metadata(Arc::new(partition), phi, s, labels, self.lifts.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_algebra() {
        let p = (var("x") + 1.0) * (var("y") - 2.0);
        assert_eq!(p.terms().len(), 4);
        assert_eq!(p.eval(|n| if n == "x" { 3.0 } else { 5.0 }), 12.0);
        let z = var("x") - var("x");
        assert!(z.is_zero());
    }

    #[test]
    fn builder_dedupes_monomials() {
        let mut b = ModelBuilder::new();
        b.state("x").input("u");
        b.equation("a", Poly::der("x") + var("x") * var("u"));
        b.equation("b", var("x") * var("u") - var("u"));
        let m = b.build().unwrap();
        assert_eq!(m.r(), 3);
        assert_eq!(m.n_eq(), 2);
    }

    #[test]
    fn builder_rejects_square() {
        let mut b = ModelBuilder::new();
        b.state("x");
        b.equation("sq", Poly::der("x") - var("x") * var("x"));
        let err = b.build().unwrap_err();
        assert!(matches!(err, Error::NotMultilinear(ref s) if s.contains("x*x")));
    }

    #[test]
    fn builder_rejects_unknown() {
        let mut b = ModelBuilder::new();
        b.state("x");
        b.equation("e", var("y"));
        assert!(matches!(b.build(), Err(Error::UnknownSignal(_))));
    }
}
