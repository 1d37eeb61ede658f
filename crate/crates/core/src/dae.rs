//! Fully implicit DAE simulation of iMTI models.
//!
//! [`consistent_init`] solves `h(v) = 0` (plus registered unit-circle
//! constraints) for the free signals. [`simulate`] advances the model with the
//! trapezoidal rule or implicit Euler, solving each step by Newton with the
//! analytic Jacobian.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cpn1::{Cpn1Model, SignalKind, SignalPartition, SignalVector};
use crate::error::{Error, Result};
use crate::linearize::{jacobian_into, EquilibriumTol};

/// One-step integration rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ImplicitEuler,
    #[default]
    Trapezoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Step size used whenever Newton converges, s.
    pub max_step: f64,
    /// Term-relative residual accepted as converged.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub method: Method,
    /// Project lifted pairs back onto the unit circle after every step.
    pub project: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            max_step: 1e-4,
            newton_tol: 1e-10,
            newton_max_iters: 20,
            method: Method::Trapezoidal,
            project: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("max_step", self.max_step),
            ("newton_tol", self.newton_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter { name: name.into(), value: v, reason: "must be positive" });
            }
        }
        if self.newton_max_iters == 0 {
            return Err(Error::InvalidParameter { name: "newton_max_iters".into(), value: 0.0, reason: "must be positive" });
        }
        Ok(())
    }
}

/// Options of [`consistent_init_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct InitOptions {
    pub tol: EquilibriumTol,
    /// Allowed `|cos² + sin² − 1|` on registered lifts.
    pub lift_tol: f64,
    pub max_iters: usize,
    /// Include the registered unit-circle constraints in the solve.
    pub enforce_lifts: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { tol: EquilibriumTol::Absolute(1e-10), lift_tol: 1e-10, max_iters: 50, enforce_lifts: true }
    }
}

fn lift_indices(model: &Cpn1Model) -> Vec<(usize, usize)> {
    let p = model.partition();
    model
        .lifts()
        .iter()
        .map(|l| (p.index_of(&l.cos).expect("validated"), p.index_of(&l.sin).expect("validated")))
        .collect()
}

/// Consistent point near `guess` with the `frozen` signals held fixed.
pub fn consistent_init(model: &Cpn1Model, guess: &SignalVector, frozen: &[&str]) -> Result<SignalVector> {
    consistent_init_with(model, guess, frozen, &InitOptions::default())
}

/// Gauss-Newton on `h(v) = 0` and the lift constraints over the non-frozen
/// signals.
///
/// Rows are scaled by their term magnitude and columns by the signal
/// magnitude; each step is the minimum-norm least-squares step from an SVD,
/// so redundant equations and free directions are tolerated.
pub fn consistent_init_with(
    model: &Cpn1Model,
    guess: &SignalVector,
    frozen: &[&str],
    opts: &InitOptions,
) -> Result<SignalVector> {
    let part = model.partition();
    if guess.values().len() != model.nv() {
        return Err(Error::Dimension { what: "guess length (N_v)".into(), expected: model.nv(), got: guess.values().len() });
    }
    if !guess.is_finite() {
        return Err(Error::NonFinite("initial guess".into()));
    }
    let mut fixed = vec![false; model.nv()];
    for name in frozen {
        fixed[part.require(name)?] = true;
    }
    let free: Vec<usize> = (0..model.nv()).filter(|&i| !fixed[i]).collect();
    let lifts = if opts.enforce_lifts { lift_indices(model) } else { Vec::new() };
    let mut x = guess.values().to_vec();
    let n_eq = model.n_eq();
    let rows = n_eq + lifts.len();
    let mut jfull = DMatrix::zeros(n_eq, model.nv());

    let residuals = |x: &[f64], w: &[f64]| -> DVector<f64> {
        let h = model.residual_unchecked(x);
        let mut f = DVector::zeros(rows);
        for k in 0..n_eq {
            f[k] = w[k] * h[k];
        }
        for (l, &(c, s)) in lifts.iter().enumerate() {
            f[n_eq + l] = x[c] * x[c] + x[s] * x[s] - 1.0;
        }
        f
    };
    let converged = |x: &[f64]| -> (bool, f64) {
        let res = opts.tol.measure(model, x);
        let lift = lifts.iter().map(|&(c, s)| (x[c] * x[c] + x[s] * x[s] - 1.0).abs()).fold(0.0, f64::max);
        (res <= opts.tol.value() && lift <= opts.lift_tol, res.max(lift))
    };

    let mut last = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let (ok, res) = converged(&x);
        last = res;
        if ok {
            return SignalVector::new(guess.partition().clone(), x);
        }
        if free.is_empty() {
            break;
        }
        let scale = model.term_scale(&x);
        let w: Vec<f64> = scale.iter().map(|s| 1.0 / (1.0 + s)).collect();
        let f = residuals(&x, &w);
        jacobian_into(model, &x, &mut jfull);
        let mut m = DMatrix::zeros(rows, free.len());
        for (c, &i) in free.iter().enumerate() {
            for k in 0..n_eq {
                m[(k, c)] = w[k] * jfull[(k, i)];
            }
            for (l, &(ci, si)) in lifts.iter().enumerate() {
                if i == ci {
                    m[(n_eq + l, c)] = 2.0 * x[ci];
                } else if i == si {
                    m[(n_eq + l, c)] = 2.0 * x[si];
                }
            }
        }
        let mut cs = vec![1.0; free.len()];
        for (c, s) in cs.iter_mut().enumerate() {
            let norm = m.column(c).norm();
            if norm > 0.0 {
                *s = 1.0 / norm;
                m.column_mut(c).scale_mut(*s);
            }
        }
        let svd = m.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * 1e-12;
        let u = svd.u.as_ref().expect("computed");
        let vt = svd.v_t.as_ref().expect("computed");
        let utf = u.transpose() * &f;
        let merit = f.norm_squared();
        let mut accepted = false;
        // Gauss-Newton first, then increasingly damped (Levenberg-Marquardt) steps.
        'damping: for mu in [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
            let mu = mu * smax * smax;
            let mut step = DVector::zeros(free.len());
            for (j, &sj) in svd.singular_values.iter().enumerate() {
                if sj > eps {
                    step -= vt.row(j).transpose() * (sj * utf[j] / (sj * sj + mu));
                }
            }
            let mut alpha = 1.0;
            for _ in 0..12 {
                let mut trial = x.clone();
                for (c, &i) in free.iter().enumerate() {
                    trial[i] = x[i] + alpha * step[c] * cs[c];
                }
                if trial.iter().all(|t| t.is_finite()) {
                    let ft = residuals(&trial, &w).norm_squared();
                    if ft < merit * (1.0 - 1e-4 * alpha) || ft == 0.0 {
                        x = trial;
                        accepted = true;
                        break 'damping;
                    }
                }
                alpha *= 0.5;
            }
        }
        if !accepted {
            let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
            if rank < free.len().min(rows) {
                return Err(Error::SingularIteration(deficient_rows(model, &svd, eps, n_eq)));
            }
            break;
        }
    }
    let (ok, res) = converged(&x);
    if ok {
        return SignalVector::new(guess.partition().clone(), x);
    }
    Err(Error::NewtonDivergence {
        iterations: opts.max_iters,
        residual: res.min(last),
        detail: worst_equation(model, &x),
    })
}

fn deficient_rows(model: &Cpn1Model, svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, eps: f64, n_eq: usize) -> String {
    let u = svd.u.as_ref().expect("computed");
    let mut score = vec![0.0; u.nrows()];
    for (j, s) in svd.singular_values.iter().enumerate() {
        if *s <= eps {
            for k in 0..u.nrows() {
                score[k] += u[(k, j)].abs();
            }
        }
    }
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|a, b| score[*b].total_cmp(&score[*a]));
    idx.iter()
        .take(3)
        .filter(|&&k| score[k] > 0.0)
        .map(|&k| if k < n_eq { model.equation_label(k) } else { format!("lift {}", k - n_eq) })
        .collect::<Vec<_>>()
        .join(", ")
}

fn worst_equation(model: &Cpn1Model, x: &[f64]) -> String {
    let h = model.residual_unchecked(x);
    let sc = model.term_scale(x);
    let (k, _) = h
        .iter()
        .zip(sc.iter())
        .map(|(a, b)| a.abs() / (1.0 + b))
        .enumerate()
        .fold((0, -1.0), |acc, (k, r)| if r > acc.1 { (k, r) } else { acc });
    format!("; largest residual in `{}`", model.equation_label(k))
}

/// A step change of one input at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputEvent {
    pub t: f64,
    pub signal: String,
    pub value: f64,
}

/// Piecewise-constant input schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub events: Vec<InputEvent>,
}

impl Schedule {
    pub fn new(mut events: Vec<InputEvent>) -> Self {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self { events }
    }

    /// Inputs held constant between `steps` equal increments from `from` to
    /// `to` over `[t0, t1]`.
    pub fn ramp(signal: &str, from: f64, to: f64, t0: f64, t1: f64, steps: usize) -> Vec<InputEvent> {
        (1..=steps)
            .map(|k| {
                let a = k as f64 / steps as f64;
                InputEvent { t: t0 + (t1 - t0) * (k - 1) as f64 / steps as f64, signal: signal.into(), value: from + (to - from) * a }
            })
            .collect()
    }
}

/// Counters collected while stepping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    pub rejected: usize,
    pub newton_iterations: usize,
    pub max_newton: usize,
    pub events: usize,
}

/// Simulated signal traces.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub partition: Arc<SignalPartition>,
    pub times: Vec<f64>,
    /// One full signal vector per accepted step.
    pub samples: Vec<Vec<f64>>,
    /// Max `|cos² + sin² − 1|` over registered lifts, per sample.
    pub drift: Vec<f64>,
    pub stats: SolverStats,
    /// Set when stepping stopped early; the samples up to that point are kept.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<SignalVector> {
        self.samples.last().map(|v| SignalVector::new(self.partition.clone(), v.clone()).expect("sized"))
    }

    /// Time series of one signal.
    pub fn series(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.partition.require(name)?;
        Ok(self.samples.iter().map(|s| s[i]).collect())
    }

    /// Value of `name` at `t`, interpolated linearly between samples.
    pub fn value_at(&self, name: &str, t: f64) -> Result<f64> {
        let i = self.partition.require(name)?;
        Ok(interpolate(&self.times, &self.samples, i, t))
    }

    /// Returns an error if the run stopped early.
    pub fn into_result(self) -> Result<Self> {
        match &self.aborted {
            None => Ok(self),
            Some(reason) => Err(Error::StepUnderflow { t: self.times.last().copied().unwrap_or(0.0), reason: reason.clone() }),
        }
    }

    /// Wide CSV: a `time` column followed by one column per signal.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["time".to_string()];
        header.extend(self.partition.names().iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for (t, s) in self.times.iter().zip(&self.samples) {
            let mut row = vec![format_num(*t)];
            row.extend(s.iter().map(|x| format_num(*x)));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long CSV with columns `time,signal,value`.
    pub fn write_csv_long<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "signal", "value"]).map_err(csv_err)?;
        for (t, s) in self.times.iter().zip(&self.samples) {
            for (name, x) in self.partition.names().iter().zip(s) {
                out.write_record([format_num(*t), name.clone(), format_num(*x)]).map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a wide CSV written by [`Trajectory::write_csv`]. Every column is
    /// treated as an algebraic signal; drift and stats are not stored.
    pub fn read_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::InvalidModel(format!("bad number `{s}`: {e}"))))
                .collect::<Result<_>>()?;
            times.push(vals[0]);
            rows.push(vals[1..].to_vec());
        }
        Ok((header, times, rows))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn format_num(x: f64) -> String {
    format!("{x:e}")
}

pub(crate) fn interpolate(times: &[f64], samples: &[Vec<f64>], i: usize, t: f64) -> f64 {
    if times.is_empty() {
        return f64::NAN;
    }
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return samples[0][i];
    }
    if k >= times.len() {
        return samples[times.len() - 1][i];
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
    samples[k - 1][i] * (1.0 - a) + samples[k][i] * a
}

/// Max over time and constraints of `|g(z(t))|`.
pub fn drift_metric(traj: &Trajectory) -> f64 {
    traj.drift.iter().copied().fold(0.0, f64::max)
}

/// Simulates `model` from the consistent point `v0` over `t_span`.
pub fn simulate(
    model: &Cpn1Model,
    v0: &SignalVector,
    schedule: &Schedule,
    t_span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    simulate_switched(&[(t_span.0, model)], v0, schedule, t_span, cfg)
}

/// Like [`simulate`], with the model replaced at given times.
///
/// `models[0]` is active from the start; each later entry `(t, m)` takes over
/// at `t`. All models must share one partition; typically they differ only in
/// Φ (a parameter change).
pub fn simulate_switched(
    models: &[(f64, &Cpn1Model)],
    v0: &SignalVector,
    schedule: &Schedule,
    t_span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let model = models.first().ok_or_else(|| Error::InvalidModel("no model to simulate".into()))?.1;
    let part = model.partition_arc().clone();
    for (_, m) in models {
        if m.partition() != &*part {
            return Err(Error::InvalidModel("switched models must share one partition".into()));
        }
    }
    let unknowns = part.n() + part.p() + part.q();
    if model.n_eq() != unknowns {
        return Err(Error::NotSquare { equations: model.n_eq(), unknowns });
    }
    if v0.values().len() != part.nv() {
        return Err(Error::Dimension { what: "initial vector length (N_v)".into(), expected: part.nv(), got: v0.values().len() });
    }
    if !v0.is_finite() {
        return Err(Error::NonFinite("initial vector".into()));
    }
    if !(t_span.1 > t_span.0) {
        return Err(Error::InvalidParameter { name: "t_end".into(), value: t_span.1, reason: "must exceed t_start" });
    }
    for e in &schedule.events {
        let i = part.require(&e.signal)?;
        if part.kind(i) != SignalKind::Input {
            return Err(Error::InvalidModel(format!("schedule event targets `{}`, which is not an input", e.signal)));
        }
        if !e.value.is_finite() || !e.t.is_finite() {
            return Err(Error::NonFinite(format!("schedule event for `{}`", e.signal)));
        }
    }

    let mut stepper = Stepper::new(model, cfg);
    let mut v = v0.values().to_vec();
    let mut events: Vec<&InputEvent> = schedule.events.iter().collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut ev = 0;
    while ev < events.len() && events[ev].t <= t_span.0 {
        v[part.require(&events[ev].signal)?] = events[ev].value;
        ev += 1;
    }
    let mut sw = 1;
    while sw < models.len() && models[sw].0 <= t_span.0 {
        stepper.model = models[sw].1;
        sw += 1;
    }
    let check_tol = (cfg.rel_tol * 1e-2).max(1e-8);
    let r0 = stepper.model.relative_residual(&v);
    if r0 > check_tol {
        return Err(Error::NotEquilibrium {
            residual: r0,
            tol: check_tol,
            detail: format!("; initial point is inconsistent{}", worst_equation(stepper.model, &v)),
        });
    }

    let mut traj = Trajectory {
        partition: part.clone(),
        times: vec![t_span.0],
        samples: vec![v.clone()],
        drift: vec![stepper.drift(&v)],
        stats: SolverStats::default(),
        aborted: None,
    };
    let mut t = t_span.0;
    let mut dt = cfg.max_step;
    let min_step = cfg.max_step / 1024.0;
    let eps_t = 1e-12 * (1.0 + t_span.1.abs());
    while t < t_span.1 - eps_t {
        let next_input = events.get(ev).map_or(f64::INFINITY, |e| e.t);
        let next_model = models.get(sw).map_or(f64::INFINITY, |m| m.0);
        let boundary = next_input.min(next_model).min(t_span.1);
        let mut h = dt.min(boundary - t);
        let hit = boundary - t <= dt + eps_t;
        if hit {
            h = boundary - t;
        }
        match stepper.step(&v, h) {
            Ok((vn, iters)) => {
                traj.stats.steps += 1;
                traj.stats.newton_iterations += iters;
                traj.stats.max_newton = traj.stats.max_newton.max(iters);
                t = if hit { boundary } else { t + h };
                v = vn;
                if cfg.project {
                    stepper.project(&mut v);
                }
                traj.times.push(t);
                traj.drift.push(stepper.drift(&v));
                traj.samples.push(v.clone());
                dt = (dt * 2.0).min(cfg.max_step);
                if hit && boundary < t_span.1 - eps_t || (hit && (next_input <= t + eps_t || next_model <= t + eps_t)) {
                    let mut changed = false;
                    while ev < events.len() && events[ev].t <= t + eps_t {
                        v[part.require(&events[ev].signal)?] = events[ev].value;
                        ev += 1;
                        changed = true;
                    }
                    while sw < models.len() && models[sw].0 <= t + eps_t {
                        stepper.model = models[sw].1;
                        sw += 1;
                        changed = true;
                    }
                    if changed {
                        traj.stats.events += 1;
                        match stepper.reinit(&v) {
                            Ok(vn) => v = vn,
                            Err(e) => {
                                traj.aborted = Some(format!("re-initialisation after event at t = {t}: {e}"));
                                return Ok(traj);
                            }
                        }
                        traj.times.push(t);
                        traj.drift.push(stepper.drift(&v));
                        traj.samples.push(v.clone());
                    }
                }
            }
            Err(reason) => {
                traj.stats.rejected += 1;
                dt = h / 2.0;
                if dt < min_step {
                    traj.aborted = Some(format!("step below {min_step:.3e} s at t = {t}: {reason}"));
                    return Ok(traj);
                }
            }
        }
    }
    Ok(traj)
}

struct Stepper<'a> {
    model: &'a Cpn1Model,
    cfg: &'a SolverConfig,
    lifts: Vec<(usize, usize)>,
    z: std::ops::Range<usize>,
    zd: std::ops::Range<usize>,
    unknowns: Vec<usize>,
    j: DMatrix<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a Cpn1Model, cfg: &'a SolverConfig) -> Self {
        let p = model.partition();
        let unknowns: Vec<usize> = p.state_range().chain(p.output_range()).chain(p.algebraic_range()).collect();
        Self {
            model,
            cfg,
            lifts: lift_indices(model),
            z: p.state_range(),
            zd: p.derivative_range(),
            unknowns,
            j: DMatrix::zeros(model.n_eq(), model.nv()),
        }
    }

    fn drift(&self, v: &[f64]) -> f64 {
        self.lifts.iter().map(|&(c, s)| (v[c] * v[c] + v[s] * v[s] - 1.0).abs()).fold(0.0, f64::max)
    }

    fn project(&self, v: &mut [f64]) {
        for &(c, s) in &self.lifts {
            let r = (v[c] * v[c] + v[s] * v[s]).sqrt();
            if r > 0.0 {
                v[c] /= r;
                v[s] /= r;
            }
        }
    }

    /// Solves for derivatives, outputs and algebraics with states and inputs held.
    fn reinit(&self, v: &[f64]) -> Result<Vec<f64>> {
        let p = self.model.partition();
        let frozen: Vec<&str> = p.state_range().chain(p.input_range()).map(|i| p.name(i)).collect();
        let guess = SignalVector::new(self.model.partition_arc().clone(), v.to_vec())?;
        let opts = InitOptions {
            tol: EquilibriumTol::TermRelative(self.cfg.newton_tol),
            enforce_lifts: false,
            ..InitOptions::default()
        };
        Ok(consistent_init_with(self.model, &guess, &frozen, &opts)?.into_values())
    }

    /// One step of size `h` from `v`. Returns the new point and the Newton
    /// iteration count.
    fn step(&mut self, v: &[f64], h: f64) -> std::result::Result<(Vec<f64>, usize), String> {
        let (c, beta) = match self.cfg.method {
            Method::Trapezoidal => (2.0 / h, 1.0),
            Method::ImplicitEuler => (1.0 / h, 0.0),
        };
        let n = self.z.len();
        let z0 = self.z.start;
        let d0 = self.zd.start;
        let mut x = v.to_vec();
        for k in 0..n {
            x[z0 + k] = v[z0 + k] + h * v[d0 + k];
        }
        let set_derivs = |x: &mut [f64]| {
            for k in 0..n {
                x[d0 + k] = c * (x[z0 + k] - v[z0 + k]) - beta * v[d0 + k];
            }
        };
        set_derivs(&mut x);
        let m = self.unknowns.len();
        for it in 1..=self.cfg.newton_max_iters {
            let f = self.model.residual_unchecked(&x);
            if !f.iter().all(|y| y.is_finite()) {
                return Err("non-finite residual".into());
            }
            jacobian_into(self.model, &x, &mut self.j);
            let mut jw = DMatrix::zeros(self.model.n_eq(), m);
            for (col, &i) in self.unknowns.iter().enumerate() {
                let mut column = self.j.column(i).clone_owned();
                if self.z.contains(&i) {
                    column += self.j.column(d0 + (i - z0)) * c;
                }
                jw.set_column(col, &column);
            }
            let delta = jw.lu().solve(&(-&f)).ok_or_else(|| "singular step matrix".to_string())?;
            let mut worst: f64 = 0.0;
            for (col, &i) in self.unknowns.iter().enumerate() {
                let w = self.cfg.abs_tol + self.cfg.rel_tol * x[i].abs();
                worst = worst.max(delta[col].abs() / w);
                x[i] += delta[col];
            }
            set_derivs(&mut x);
            if !x.iter().all(|y| y.is_finite()) {
                return Err("non-finite iterate".into());
            }
            if worst <= 1e-6 || self.model.relative_residual(&x) <= self.cfg.newton_tol {
                return Ok((x, it));
            }
        }
        Err(format!("Newton did not converge in {} iterations", self.cfg.newton_max_iters))
    }
}

/// Right-hand side of an explicit ODE `x' = f(t, x, u)` with piecewise
/// constant parameters `u`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]);
}

/// Trapezoidal (or implicit Euler) integration of an ODE with Newton on a
/// finite-difference Jacobian and fixed step `cfg.max_step`.
///
/// `events` are `(t, index, value)` changes of the parameter vector `u`.
pub fn integrate_ode(
    sys: &dyn OdeSystem,
    x0: &[f64],
    u0: &[f64],
    events: &[(f64, usize, f64)],
    t_span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let n = sys.dim();
    if x0.len() != n {
        return Err(Error::Dimension { what: "ODE initial state".into(), expected: n, got: x0.len() });
    }
    let mut ev: Vec<(f64, usize, f64)> = events.to_vec();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut u = u0.to_vec();
    let mut k = 0;
    while k < ev.len() && ev[k].0 <= t_span.0 {
        u[ev[k].1] = ev[k].2;
        k += 1;
    }
    let mut x = x0.to_vec();
    let mut f0 = vec![0.0; n];
    sys.rhs(&x, &u, &mut f0);
    let mut times = vec![t_span.0];
    let mut out = vec![x.clone()];
    let mut t = t_span.0;
    let eps_t = 1e-12 * (1.0 + t_span.1.abs());
    let theta = match cfg.method {
        Method::Trapezoidal => 0.5,
        Method::ImplicitEuler => 1.0,
    };
    let mut f1 = vec![0.0; n];
    let mut fp = vec![0.0; n];
    while t < t_span.1 - eps_t {
        let boundary = ev.get(k).map_or(t_span.1, |e| e.0.min(t_span.1));
        let mut h = cfg.max_step.min(boundary - t);
        if boundary - t <= cfg.max_step + eps_t {
            h = boundary - t;
        }
        let mut y: Vec<f64> = (0..n).map(|i| x[i] + h * f0[i]).collect();
        let mut done = false;
        for _ in 0..cfg.newton_max_iters {
            sys.rhs(&y, &u, &mut f1);
            let g = DVector::from_iterator(n, (0..n).map(|i| y[i] - x[i] - h * ((1.0 - theta) * f0[i] + theta * f1[i])));
            let mut jm = DMatrix::identity(n, n);
            let mut yp = y.clone();
            for j in 0..n {
                let d = 1e-7 * (1.0 + y[j].abs());
                yp[j] = y[j] + d;
                sys.rhs(&yp, &u, &mut fp);
                yp[j] = y[j];
                for i in 0..n {
                    jm[(i, j)] -= h * theta * (fp[i] - f1[i]) / d;
                }
            }
            let delta = jm.lu().solve(&(-g)).ok_or_else(|| Error::SingularIteration("ODE step matrix".into()))?;
            let mut worst: f64 = 0.0;
            for i in 0..n {
                y[i] += delta[i];
                worst = worst.max(delta[i].abs() / (cfg.abs_tol + cfg.rel_tol * y[i].abs()));
            }
            if worst <= 1e-6 {
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::NewtonDivergence { iterations: cfg.newton_max_iters, residual: f64::NAN, detail: format!(" at t = {t}") });
        }
        t = if (boundary - t - h).abs() <= eps_t { boundary } else { t + h };
        x = y;
        while k < ev.len() && ev[k].0 <= t + eps_t {
            u[ev[k].1] = ev[k].2;
            k += 1;
        }
        sys.rhs(&x, &u, &mut f0);
        times.push(t);
        out.push(x.clone());
    }
    Ok((times, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{lift_trig, TrigLift};
    use crate::cpn1::{var, ModelBuilder, Poly};

    fn decay() -> Cpn1Model {
        let mut b = ModelBuilder::new();
        b.state("z");
        b.equation("decay", Poly::der("z") + var("z"));
        b.build().unwrap()
    }

    #[test]
    fn exponential_decay() {
        let m = decay();
        let v0 = SignalVector::from_named(m.partition_arc().clone(), [("z", 1.0), ("der(z)", -1.0)]).unwrap();
        let traj = simulate(&m, &v0, &Schedule::default(), (0.0, 1.0), &SolverConfig::default()).unwrap();
        let z = traj.series("z").unwrap();
        let err = (z.last().unwrap() - (-1f64).exp()).abs() / (-1f64).exp();
        assert!(err < 1e-4, "{err}");
        assert!((traj.times.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_convergence() {
        let m = decay();
        let v0 = SignalVector::from_named(m.partition_arc().clone(), [("z", 1.0), ("der(z)", -1.0)]).unwrap();
        let err = |h: f64| {
            let cfg = SolverConfig { max_step: h, ..Default::default() };
            let traj = simulate(&m, &v0, &Schedule::default(), (0.0, 1.0), &cfg).unwrap();
            (traj.series("z").unwrap().last().unwrap() - (-1f64).exp()).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 4.0).abs() < 0.8, "{ratio}");
    }

    #[test]
    fn rotation_returns_and_keeps_circle() {
        let w = 2.0 * std::f64::consts::PI * 50.0;
        let m = lift_trig(&TrigLift::new(None, "c", "s"), &(w * var("one"))).unwrap();
        let mut v0 = SignalVector::from_named(m.partition_arc().clone(), [("c", 1.0), ("one", 1.0)]).unwrap();
        v0.set("der(s)", w).unwrap();
        let cfg = SolverConfig { max_step: 2e-5, ..Default::default() };
        let traj = simulate(&m, &v0, &Schedule::default(), (0.0, 0.02), &cfg).unwrap();
        let last = traj.last().unwrap();
        assert!((last.get("c").unwrap() - 1.0).abs() < 1e-4);
        assert!(last.get("s").unwrap().abs() < 1e-4);
        assert!(drift_metric(&traj) < 1e-6);
    }

    #[test]
    fn drift_without_projection() {
        let w = 2.0 * std::f64::consts::PI * 50.0;
        let m = lift_trig(&TrigLift::new(None, "c", "s"), &(w * var("one"))).unwrap();
        let mut v0 = SignalVector::from_named(m.partition_arc().clone(), [("c", 1.0), ("one", 1.0)]).unwrap();
        v0.set("der(s)", w).unwrap();
        let cfg = SolverConfig { method: Method::ImplicitEuler, project: false, ..Default::default() };
        let traj = simulate(&m, &v0, &Schedule::default(), (0.0, 0.1), &cfg).unwrap();
        let d = &traj.drift;
        assert!(d.windows(2).all(|p| p[1] >= p[0]));
        assert!(drift_metric(&traj) > 1e-3);
        let on = simulate(&m, &v0, &Schedule::default(), (0.0, 0.1), &SolverConfig { project: true, ..cfg }).unwrap();
        assert!(drift_metric(&on) < 1e-12);
    }

    #[test]
    fn init_projects_onto_circle() {
        let m = lift_trig(&TrigLift::new(None, "c", "s"), &var("w")).unwrap();
        let guess = SignalVector::from_named(m.partition_arc().clone(), [("c", 1.1f64.sqrt())]).unwrap();
        let v = consistent_init(&m, &guess, &["w", "s"]).unwrap();
        assert!(m.lift_residuals(v.values())[0].abs() <= 1e-10);
        let again = consistent_init(&m, &v, &["w", "s"]).unwrap();
        assert_eq!(again, v);
    }

    #[test]
    fn init_reports_divergence() {
        let mut b = ModelBuilder::new();
        b.algebraic("x");
        b.equation("impossible", var("x") * 0.0 + 1.0);
        let m = b.build().unwrap();
        let guess = SignalVector::zeros(m.partition_arc().clone());
        assert!(consistent_init(&m, &guess, &[]).is_err());
    }

    #[test]
    fn input_step_and_inconsistent_start() {
        let mut b = ModelBuilder::new();
        b.state("z").input("u");
        b.equation("lag", Poly::der("z") + var("z") - var("u"));
        let m = b.build().unwrap();
        let v0 = SignalVector::zeros(m.partition_arc().clone());
        let sched = Schedule::new(vec![InputEvent { t: 0.5, signal: "u".into(), value: 1.0 }]);
        let traj = simulate(&m, &v0, &sched, (0.0, 3.0), &SolverConfig::default()).unwrap();
        assert!(traj.times.contains(&0.5));
        let z = traj.value_at("z", 3.0).unwrap();
        assert!((z - (1.0 - (-2.5f64).exp())).abs() < 1e-5);
        let mut bad = v0.clone();
        bad.set("z", 1.0).unwrap();
        assert!(simulate(&m, &bad, &Schedule::default(), (0.0, 1.0), &SolverConfig::default()).is_err());
        let wrong = Schedule::new(vec![InputEvent { t: 0.1, signal: "z".into(), value: 1.0 }]);
        assert!(simulate(&m, &v0, &wrong, (0.0, 1.0), &SolverConfig::default()).is_err());
    }

    #[test]
    fn deterministic_and_csv() {
        let m = decay();
        let v0 = SignalVector::from_named(m.partition_arc().clone(), [("z", 1.0), ("der(z)", -1.0)]).unwrap();
        let cfg = SolverConfig { max_step: 1e-2, ..Default::default() };
        let a = simulate(&m, &v0, &Schedule::default(), (0.0, 0.5), &cfg).unwrap();
        let b = simulate(&m, &v0, &Schedule::default(), (0.0, 0.5), &cfg).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let (names, times, rows) = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(names, m.partition().names());
        assert_eq!(times, a.times);
        assert_eq!(rows, a.samples);
    }

    #[test]
    fn non_square_rejected() {
        let mut b = ModelBuilder::new();
        b.state("z").algebraic("y");
        b.equation("only", Poly::der("z") + var("z") + var("y"));
        let m = b.build().unwrap();
        let v0 = SignalVector::zeros(m.partition_arc().clone());
        assert!(matches!(
            simulate(&m, &v0, &Schedule::default(), (0.0, 1.0), &SolverConfig::default()),
            Err(Error::NotSquare { .. })
        ));
    }

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = -x[0] + u[0];
        }
    }

    #[test]
    fn ode_integration() {
        let (t, x) = integrate_ode(&Decay, &[1.0], &[0.0], &[], (0.0, 1.0), &SolverConfig::default()).unwrap();
        assert!((t.last().unwrap() - 1.0).abs() < 1e-12);
        assert!((x.last().unwrap()[0] - (-1f64).exp()).abs() < 1e-6);
    }
}
