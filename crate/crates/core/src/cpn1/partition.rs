use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a slot in the signal vector `v = (ż, z, u, y, α)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Derivative,
    State,
    Input,
    Output,
    Algebraic,
}

/// Name of the derivative slot paired with state `name`.
pub fn der(name: &str) -> String {
    format!("der({name})")
}

/// Ordered signal layout of an iMTI model.
///
/// Slots are laid out as `n` derivatives, `n` states, `m` inputs, `p`
/// outputs and `q` algebraic variables. Derivative `i` is paired with state
/// `i`. Lookup is by name; positions change under composition.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PartitionFile", into = "PartitionFile")]
pub struct SignalPartition {
    n: usize,
    m: usize,
    p: usize,
    q: usize,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    n: usize,
    m: usize,
    p: usize,
    q: usize,
    names: Vec<String>,
}

impl TryFrom<PartitionFile> for SignalPartition {
    type Error = Error;

    fn try_from(f: PartitionFile) -> Result<Self> {
        SignalPartition::from_parts(f.n, f.m, f.p, f.q, f.names)
    }
}

impl From<SignalPartition> for PartitionFile {
    fn from(p: SignalPartition) -> Self {
        PartitionFile {
            n: p.n,
            m: p.m,
            p: p.p,
            q: p.q,
            names: p.names,
        }
    }
}

impl PartialEq for SignalPartition {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.m == other.m
            && self.p == other.p
            && self.q == other.q
            && self.names == other.names
    }
}

impl SignalPartition {
    /// Builds a partition from state, input, output and algebraic names.
    /// Derivative slots are named `der(<state>)`.
    pub fn new<S: AsRef<str>>(
        states: &[S],
        inputs: &[S],
        outputs: &[S],
        algebraics: &[S],
    ) -> Result<Self> {
        let mut names = Vec::with_capacity(2 * states.len() + inputs.len() + outputs.len() + algebraics.len());
        names.extend(states.iter().map(|s| der(s.as_ref())));
        names.extend(states.iter().map(|s| s.as_ref().to_string()));
        names.extend(inputs.iter().map(|s| s.as_ref().to_string()));
        names.extend(outputs.iter().map(|s| s.as_ref().to_string()));
        names.extend(algebraics.iter().map(|s| s.as_ref().to_string()));
        Self::from_parts(states.len(), inputs.len(), outputs.len(), algebraics.len(), names)
    }

    pub fn from_parts(n: usize, m: usize, p: usize, q: usize, names: Vec<String>) -> Result<Self> {
        let nv = 2 * n + m + p + q;
        if names.len() != nv {
            return Err(Error::Dimension {
                what: "partition names (2n+m+p+q)".into(),
                expected: nv,
                got: names.len(),
            });
        }
        let mut index = HashMap::with_capacity(nv);
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidModel(format!("signal {i} has an empty name")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate signal name `{name}`")));
            }
        }
        Ok(Self { n, m, p, q, names, index })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn q(&self) -> usize {
        self.q
    }
    /// Total signal count `N_v = 2n + m + p + q`.
    pub fn nv(&self) -> usize {
        self.names.len()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::UnknownSignal(name.to_string()))
    }

    pub fn derivative_range(&self) -> Range<usize> {
        0..self.n
    }
    pub fn state_range(&self) -> Range<usize> {
        self.n..2 * self.n
    }
    pub fn input_range(&self) -> Range<usize> {
        2 * self.n..2 * self.n + self.m
    }
    pub fn output_range(&self) -> Range<usize> {
        let s = 2 * self.n + self.m;
        s..s + self.p
    }
    pub fn algebraic_range(&self) -> Range<usize> {
        let s = 2 * self.n + self.m + self.p;
        s..s + self.q
    }

    pub fn kind(&self, i: usize) -> SignalKind {
        let n = self.n;
        if i < n {
            SignalKind::Derivative
        } else if i < 2 * n {
            SignalKind::State
        } else if i < 2 * n + self.m {
            SignalKind::Input
        } else if i < 2 * n + self.m + self.p {
            SignalKind::Output
        } else {
            SignalKind::Algebraic
        }
    }

    /// State names in slot order.
    pub fn state_names(&self) -> &[String] {
        &self.names[self.state_range()]
    }
    pub fn input_names(&self) -> &[String] {
        &self.names[self.input_range()]
    }
    pub fn output_names(&self) -> &[String] {
        &self.names[self.output_range()]
    }
    pub fn algebraic_names(&self) -> &[String] {
        &self.names[self.algebraic_range()]
    }

    /// Index of the derivative slot paired with state slot `state_idx`.
    pub fn derivative_of(&self, state_idx: usize) -> Option<usize> {
        self.state_range().contains(&state_idx).then(|| state_idx - self.n)
    }
}

/// Values of every signal slot, tied to the partition that names them.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalVector {
    values: Vec<f64>,
    partition: Arc<SignalPartition>,
}

impl SignalVector {
    pub fn new(partition: Arc<SignalPartition>, values: Vec<f64>) -> Result<Self> {
        if values.len() != partition.nv() {
            return Err(Error::Dimension {
                what: "signal vector length (N_v)".into(),
                expected: partition.nv(),
                got: values.len(),
            });
        }
        Ok(Self { values, partition })
    }

    pub fn zeros(partition: Arc<SignalPartition>) -> Self {
        let values = vec![0.0; partition.nv()];
        Self { values, partition }
    }

    /// Builds a vector from `(name, value)` pairs; unnamed slots are zero.
    pub fn from_named<'a>(
        partition: Arc<SignalPartition>,
        pairs: impl IntoIterator<Item = (&'a str, f64)>,
    ) -> Result<Self> {
        let mut v = Self::zeros(partition);
        for (name, value) in pairs {
            v.set(name, value)?;
        }
        Ok(v)
    }

    pub fn partition(&self) -> &Arc<SignalPartition> {
        &self.partition
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(self.values[self.partition.require(name)?])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self.partition.require(name)?;
        self.values[i] = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for SignalVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for SignalVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_kinds() {
        let p = SignalPartition::new(&["x"], &["u"], &["y"], &["a"]).unwrap();
        assert_eq!(p.nv(), 5);
        assert_eq!(p.names(), &["der(x)", "x", "u", "y", "a"]);
        assert_eq!(p.kind(0), SignalKind::Derivative);
        assert_eq!(p.kind(1), SignalKind::State);
        assert_eq!(p.kind(4), SignalKind::Algebraic);
        assert_eq!(p.derivative_of(1), Some(0));
        assert_eq!(p.derivative_of(2), None);
    }

    #[test]
    fn rejects_duplicates_and_bad_counts() {
        assert!(SignalPartition::new(&["x"], &["x"], &[], &[]).is_err());
        assert!(SignalPartition::from_parts(1, 0, 0, 0, vec!["a".into()]).is_err());
    }

    #[test]
    fn vector_length_checked() {
        let p = Arc::new(SignalPartition::new(&["x"], &[], &[], &[]).unwrap());
        assert!(SignalVector::new(p.clone(), vec![0.0]).is_err());
        let v = SignalVector::from_named(p, [("x", 2.0)]).unwrap();
        assert_eq!(v.get("x").unwrap(), 2.0);
        assert!(v.get("nope").is_err());
    }
}
