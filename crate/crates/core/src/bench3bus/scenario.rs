//! Event scenarios: the lifted model, its linearization and the nonlinear
//! reference run side by side.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::nti::{NonlinearModel, R_LOAD, V_SOURCE};
use super::{assemble, find_equilibrium, find_equilibrium_from, NetworkCase, References, EQUILIBRIUM_TOL, INPUTS};
use crate::cpn1::{Cpn1Model, SignalPartition, SignalVector};
use crate::dae::{simulate_switched, InputEvent, Schedule, SolverConfig, SolverStats, Trajectory};
use crate::error::{Error, Result};
use crate::gep::{
    default_tol, eig_compare, generalized_eig, stability_verdict, to_proper, CompareReport, GepOptions, GepSolution,
    StabilityVerdict,
};
use crate::linearize::{extract_ldss, DescriptorSystem};

/// Signals compared between the model variants.
pub const MONITORED: [&str; 14] = [
    "gfm_omega", "gfm_p", "gfm_q", "gfl_p", "gfl_q", "gfl_wp", "vL_D", "vL_Q", "ig_D", "ig_Q", "igfm_D", "igfm_Q",
    "igfl_D", "igfl_Q",
];

/// Sampled signals on a common time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn from_trajectory(traj: &Trajectory, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names.iter().map(|n| traj.partition.require(n)).collect::<Result<_>>()?;
        let rows = traj.samples.iter().map(|s| idx.iter().map(|&i| s[i]).collect()).collect();
        Ok(Self { names: names.iter().map(|s| s.to_string()).collect(), times: traj.times.clone(), rows })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownSignal(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Linear interpolation; after a repeated time the later sample wins.
    pub fn value_at(&self, name: &str, t: f64) -> Result<f64> {
        let i = self.index(name)?;
        Ok(crate::dae::interpolate(&self.times, &self.rows, i, t))
    }

    /// Wide CSV: `time` followed by one column per signal.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["time".to_string()];
        header.extend(self.names.iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.times.iter().zip(&self.rows) {
            let mut rec = vec![format!("{t:e}")];
            rec.extend(row.iter().map(|x| format!("{x:e}")));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long CSV: `time,signal,value`.
    pub fn write_csv_long<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "signal", "value"]).map_err(csv_err)?;
        for (t, row) in self.times.iter().zip(&self.rows) {
            for (n, x) in self.names.iter().zip(row) {
                out.write_record([format!("{t:e}"), n.clone(), format!("{x:e}")]).map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One scheduled change of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BenchEvent {
    /// Load resistance set to `factor` times its base value.
    LoadScale { t: f64, factor: f64 },
    /// Thevenin source magnitude set to `factor` times its base value.
    SourceScale { t: f64, factor: f64 },
    /// A reference input set to `value`.
    Input { t: f64, signal: String, value: f64 },
}

impl BenchEvent {
    pub fn time(&self) -> f64 {
        match self {
            BenchEvent::LoadScale { t, .. } | BenchEvent::SourceScale { t, .. } | BenchEvent::Input { t, .. } => *t,
        }
    }

    fn is_parameter(&self) -> bool {
        !matches!(self, BenchEvent::Input { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub events: Vec<BenchEvent>,
    pub t_span: (f64, f64),
    /// Time at which the lifted model is linearized.
    pub t_lin: f64,
    /// References at the start; the case's own references when absent.
    #[serde(default)]
    pub references: Option<References>,
    /// Overrides the solver's maximum step.
    #[serde(default)]
    pub max_step: Option<f64>,
}

impl Scenario {
    /// 5 % load reduction at 2.5 s.
    pub fn small_step() -> Self {
        Self {
            name: "small-step".into(),
            events: vec![BenchEvent::LoadScale { t: 2.5, factor: 0.95 }],
            t_span: (2.4, 4.0),
            t_lin: 2.499,
            references: None,
            max_step: None,
        }
    }

    /// 50 % load reduction at 2.5 s and a 9 % source voltage drop at 2.6 s.
    pub fn large_step() -> Self {
        Self {
            name: "large-step".into(),
            events: vec![BenchEvent::LoadScale { t: 2.5, factor: 0.5 }, BenchEvent::SourceScale { t: 2.6, factor: 0.91 }],
            t_span: (2.4, 4.0),
            t_lin: 2.499,
            references: None,
            max_step: None,
        }
    }

    /// Starts at the equilibrium with both active power references at `p`
    /// and nudges them by `step` at 10 ms.
    pub fn hopf(refs: &References, p: f64, step: f64, duration: f64) -> Self {
        let events = ["p_ref_gfm", "p_ref_gfl"]
            .iter()
            .map(|s| BenchEvent::Input { t: 0.01, signal: s.to_string(), value: p + step })
            .collect();
        Self {
            name: "hopf".into(),
            events,
            t_span: (0.0, duration),
            t_lin: 0.0,
            references: Some(References { p_ref_gfm: p, p_ref_gfl: p, ..refs.clone() }),
            max_step: Some(1e-5),
        }
    }

    pub fn by_name(name: &str, refs: &References) -> Result<Self> {
        match name {
            "small-step" => Ok(Self::small_step()),
            "large-step" => Ok(Self::large_step()),
            "hopf" => Ok(Self::hopf(refs, 0.692, 1e-3, 0.5)),
            other => Err(Error::InvalidModel(format!("unknown scenario `{other}` (small-step, large-step, hopf)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t0, t1) = self.t_span;
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(Error::InvalidParameter { name: "t_span".into(), value: t1, reason: "must be finite and increasing" });
        }
        if !(self.t_lin >= t0 && self.t_lin < t1) {
            return Err(Error::InvalidParameter { name: "t_lin".into(), value: self.t_lin, reason: "must lie in t_span" });
        }
        for e in &self.events {
            let t = e.time();
            if !(t >= t0 && t <= t1) {
                return Err(Error::InvalidParameter { name: "event time".into(), value: t, reason: "must lie in t_span" });
            }
            match e {
                BenchEvent::LoadScale { factor, .. } | BenchEvent::SourceScale { factor, .. } => {
                    if !(factor.is_finite() && *factor > 0.0) {
                        return Err(Error::InvalidParameter { name: "factor".into(), value: *factor, reason: "must be positive" });
                    }
                }
                BenchEvent::Input { signal, value, .. } => {
                    if !INPUTS.contains(&signal.as_str()) {
                        return Err(Error::UnknownSignal(signal.clone()));
                    }
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("event value for `{signal}`")));
                    }
                }
            }
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter { name: "max_step".into(), value: h, reason: "must be positive" });
            }
        }
        Ok(())
    }

    fn sorted_events(&self) -> Vec<BenchEvent> {
        let mut ev = self.events.clone();
        ev.sort_by(|a, b| a.time().total_cmp(&b.time()));
        ev
    }
}

/// Per-signal maximum deviation of one series from a reference series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalDeviation {
    pub name: String,
    pub max_abs: f64,
    /// Peak magnitude of the reference signal.
    pub scale: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub signals: Vec<SignalDeviation>,
    pub max_relative: f64,
}

impl Deviation {
    fn from_signals(signals: Vec<SignalDeviation>) -> Self {
        let max_relative = signals.iter().map(|s| s.relative).fold(0.0, f64::max);
        Self { signals, max_relative }
    }
}

/// Deviation of `other` from `reference` over the sample times of `other`
/// inside `window`, skipping samples within 1e-9 s of `skip`.
pub fn compare_series(reference: &Series, other: &Series, window: (f64, f64), skip: &[f64]) -> Result<Deviation> {
    let mut out = Vec::new();
    for name in &reference.names {
        if !other.names.contains(name) {
            continue;
        }
        let ref_col = reference.column(name)?;
        let scale = ref_col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut max_abs: f64 = 0.0;
        for (k, &t) in other.times.iter().enumerate() {
            if t < window.0 || t > window.1 || skip.iter().any(|s| (t - s).abs() <= 1e-9) {
                continue;
            }
            let b = other.rows[k][other.index(name)?];
            let a = reference.value_at(name, t)?;
            max_abs = max_abs.max((a - b).abs());
        }
        out.push(SignalDeviation { name: name.clone(), max_abs, scale, relative: max_abs / scale.max(f64::MIN_POSITIVE) });
    }
    Ok(Deviation::from_signals(out))
}

/// Difference of the final samples relative to the peak of the reference.
pub fn terminal_offset(reference: &Series, other: &Series) -> Result<Deviation> {
    let mut out = Vec::new();
    let (Some(ra), Some(rb)) = (reference.rows.last(), other.rows.last()) else {
        return Ok(Deviation::from_signals(out));
    };
    for (i, name) in reference.names.iter().enumerate() {
        let Ok(j) = other.index(name) else { continue };
        let scale = reference.column(name)?.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_abs = (ra[i] - rb[j]).abs();
        out.push(SignalDeviation { name: name.clone(), max_abs, scale, relative: max_abs / scale.max(f64::MIN_POSITIVE) });
    }
    Ok(Deviation::from_signals(out))
}

/// Summary written next to the trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub rank_e: usize,
    pub verdict: StabilityVerdict,
    /// Lifted model against the nonlinear reference.
    pub imti_vs_nti: Option<Deviation>,
    /// Linear model against the lifted model over the whole run.
    pub ldss_vs_imti: Deviation,
    /// Linear model against the lifted model at the final time.
    pub ldss_offset: Deviation,
    /// Nonzero generalized eigenvalues against the reference Jacobian.
    pub spectrum: Option<CompareReport>,
    pub solver: SolverStats,
    pub max_drift: f64,
}

#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub imti: Trajectory,
    pub ldss_traj: Trajectory,
    pub nti: Option<Series>,
    pub ldss: DescriptorSystem,
    pub gep: GepSolution,
    pub report: ScenarioReport,
}

impl ScenarioResult {
    pub fn imti_series(&self) -> Result<Series> {
        Series::from_trajectory(&self.imti, &MONITORED)
    }

    pub fn ldss_series(&self) -> Result<Series> {
        Series::from_trajectory(&self.ldss_traj, &MONITORED)
    }
}

/// Parameters in force at time `t` (events at `t` included).
fn params_at(case: &NetworkCase, events: &[BenchEvent], t: f64) -> super::BenchParams {
    let mut p = case.params.clone();
    for e in events.iter().filter(|e| e.time() <= t) {
        match e {
            BenchEvent::LoadScale { factor, .. } => p.r_load = case.params.r_load * factor,
            BenchEvent::SourceScale { factor, .. } => p.source_scale = case.params.source_scale * factor,
            BenchEvent::Input { .. } => {}
        }
    }
    p
}

fn refs_at(start: &References, events: &[BenchEvent], t: f64) -> References {
    let mut v = start.values();
    for e in events.iter().filter(|e| e.time() <= t) {
        if let BenchEvent::Input { signal, value, .. } = e {
            let k = INPUTS.iter().position(|s| s == signal).expect("validated");
            v[k] = *value;
        }
    }
    References { p_ref_gfm: v[0], q_ref_gfm: v[1], omega_ref: v[2], v_ref: v[3], p_ref_gfl: v[4], q_ref_gfl: v[5] }
}

/// Runs a scenario: simulates the lifted model through the events,
/// linearizes it at `t_lin`, solves the generalized eigenproblem, simulates
/// the linear model from the same point and, for the full assembly, the
/// nonlinear reference.
pub fn run_scenario(case: &NetworkCase, scenario: &Scenario, cfg: &SolverConfig) -> Result<ScenarioResult> {
    scenario.validate()?;
    let mut cfg = cfg.clone();
    if let Some(h) = scenario.max_step {
        cfg.max_step = h;
    }
    let events = scenario.sorted_events();
    let start_refs = scenario.references.clone().unwrap_or_else(|| case.params.references.clone());
    let (t0, t1) = scenario.t_span;

    // Model sequence for the parameter events.
    let mut models: Vec<(f64, Cpn1Model)> = vec![(t0, case.composite.clone())];
    let mut param_times: Vec<f64> = events.iter().filter(|e| e.is_parameter()).map(|e| e.time()).collect();
    param_times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    for &t in &param_times {
        let c = assemble(&params_at(case, &events, t), case.assembly)?;
        models.push((t, c.composite));
    }
    let schedule = Schedule::new(
        events
            .iter()
            .filter_map(|e| match e {
                BenchEvent::Input { t, signal, value } => Some(InputEvent { t: *t, signal: signal.clone(), value: *value }),
                _ => None,
            })
            .collect(),
    );

    let start = find_equilibrium(case, &start_refs)?;
    let model_refs: Vec<(f64, &Cpn1Model)> = models.iter().map(|(t, m)| (*t, m)).collect();
    let imti = simulate_switched(&model_refs, &start.v_bar, &schedule, (t0, t1), &cfg)?.into_result()?;

    // Linearization point: the trajectory sample at t_lin, polished.
    let k = imti.times.partition_point(|&t| t <= scenario.t_lin + 1e-12).max(1) - 1;
    let lin_params = params_at(case, &events, scenario.t_lin);
    let lin_case = if lin_params == case.params { case.clone() } else { case.with_params(lin_params)? };
    let lin_refs = refs_at(&start_refs, &events, scenario.t_lin);
    let guess = SignalVector::new(case.composite.partition_arc().clone(), imti.samples[k].clone())?;
    let op = find_equilibrium_from(&lin_case, &lin_refs, &guess)?;
    let ldss = extract_ldss(&lin_case.composite, &op, EQUILIBRIUM_TOL)?;
    let gep = generalized_eig(&ldss, GepOptions::default())?;
    let tol = default_tol(&gep);
    let verdict = stability_verdict(&gep, tol);

    // Linear model driven by the input deviations and the parameter forcing.
    let later: Vec<&(f64, Cpn1Model)> = models.iter().filter(|(t, _)| *t > scenario.t_lin + 1e-12).collect();
    let forcing: Vec<DVector<f64>> = later.iter().map(|(_, m)| m.residual_slice(op.values())).collect::<Result<_>>()?;
    let mut change_times: Vec<f64> = events.iter().map(|e| e.time()).filter(|&t| t > scenario.t_lin + 1e-12).collect();
    change_times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    let m = ldss.inputs.len();
    let u_bar: Vec<f64> = INPUTS.iter().map(|n| op.v_bar.get(n)).collect::<Result<_>>()?;
    let mut segments = Vec::new();
    for &ts in std::iter::once(&scenario.t_lin).chain(change_times.iter()) {
        let refs = refs_at(&start_refs, &events, ts);
        let mut u = DVector::zeros(m + forcing.len());
        for (j, v) in refs.values().iter().enumerate() {
            u[j] = v - u_bar[j];
        }
        if let Some(j) = later.iter().rposition(|(t, _)| *t <= ts + 1e-12) {
            u[m + j] = 1.0;
        }
        segments.push((ts, u));
    }
    let mut aug = ldss.clone();
    aug.b = DMatrix::from_fn(ldss.dim(), m + forcing.len(), |i, j| if j < m { ldss.b[(i, j)] } else { forcing[j - m][i] });
    aug.inputs.extend((0..forcing.len()).map(|j| format!("forcing{j}")));
    let ldss_traj =
        simulate_descriptor(&aug, case.composite.partition_arc(), &imti.samples[k], &segments, (scenario.t_lin, t1), cfg.max_step)?;

    let imti_series = Series::from_trajectory(&imti, &MONITORED)?;
    let ldss_series = Series::from_trajectory(&ldss_traj, &MONITORED)?;
    let skip: Vec<f64> = events.iter().map(|e| e.time()).collect();
    let ldss_vs_imti = compare_series(&imti_series, &ldss_series, (scenario.t_lin, t1), &skip)?;
    let ldss_offset = terminal_offset(&imti_series, &ldss_series)?;

    let (nti, imti_vs_nti, spectrum) = if case.assembly == super::Assembly::Full {
        let nm = NonlinearModel::new(&lin_case)?;
        let (xl, ul) = nm.from_lifted(&op.v_bar)?;
        let xl = nm.equilibrium(&xl, &ul)?;
        let reference = nm.eigenvalues(&xl, &ul);
        let spectrum = eig_compare(&gep.nonzero_finite(tol), &reference, 1e-3);

        let nm0 = NonlinearModel::new(case)?;
        let (x0, u0) = nm0.from_lifted(&start.v_bar)?;
        let x0 = nm0.equilibrium(&x0, &u0)?;
        let nti_events: Vec<(f64, usize, f64)> = events
            .iter()
            .map(|e| match e {
                BenchEvent::LoadScale { t, factor } => (*t, R_LOAD, case.params.r_load * factor),
                BenchEvent::SourceScale { t, factor } => (*t, V_SOURCE, case.params.source_voltage() * factor),
                BenchEvent::Input { t, signal, value } => {
                    (*t, INPUTS.iter().position(|s| s == signal).expect("validated"), *value)
                }
            })
            .collect();
        let series = nm0.simulate(&x0, &u0, &nti_events, (t0, t1), &cfg)?;
        let dev = compare_series(&series, &imti_series, (t0, t1), &skip)?;
        (Some(series), Some(dev), Some(spectrum))
    } else {
        (None, None, None)
    };

    let report = ScenarioReport {
        scenario: scenario.name.clone(),
        rank_e: ldss.rank_e(),
        verdict,
        imti_vs_nti,
        ldss_vs_imti,
        ldss_offset,
        spectrum,
        solver: imti.stats.clone(),
        max_drift: crate::dae::drift_metric(&imti),
    };
    Ok(ScenarioResult { imti, ldss_traj, nti, ldss, gep, report })
}

/// Simulates a descriptor system with piecewise-constant inputs by exact
/// discretization of its proper form.
///
/// `segments` lists `(t, u)` with `u` in force from `t` on, as deviations.
/// The dynamic states start from `start`, a full signal vector in absolute
/// values; the result is in absolute values on the given partition.
pub fn simulate_descriptor(
    sys: &DescriptorSystem,
    partition: &Arc<SignalPartition>,
    start: &[f64],
    segments: &[(f64, DVector<f64>)],
    t_span: (f64, f64),
    step: f64,
) -> Result<Trajectory> {
    let proper = to_proper(sys)?;
    let k = proper.a.nrows();
    if start.len() != partition.nv() {
        return Err(Error::Dimension { what: "start vector length (N_v)".into(), expected: partition.nv(), got: start.len() });
    }
    if !(step > 0.0) {
        return Err(Error::InvalidParameter { name: "step".into(), value: step, reason: "must be positive" });
    }
    let m = proper.b.ncols();
    let idx = |name: &String| partition.require(name);
    let kept: Vec<usize> = proper.kept.iter().map(idx).collect::<Result<_>>()?;
    let elim: Vec<usize> = proper.eliminated.iter().map(idx).collect::<Result<_>>()?;
    let deriv: Vec<Option<usize>> = kept.iter().map(|&i| partition.derivative_of(i)).collect();
    let inputs: Vec<(usize, usize)> = sys
        .inputs
        .iter()
        .enumerate()
        .filter_map(|(j, n)| partition.index_of(n).map(|i| (j, i)))
        .collect();
    let base = sys.point.values();
    if base.len() != partition.nv() {
        return Err(Error::Dimension { what: "operating point length (N_v)".into(), expected: partition.nv(), got: base.len() });
    }
    let sample = |x: &DVector<f64>, u: &DVector<f64>| -> Vec<f64> {
        let mut v = base.to_vec();
        let dx = &proper.a * x + &proper.b * u;
        let y = &proper.c * x + &proper.d * u;
        for (j, &i) in kept.iter().enumerate() {
            v[i] += x[j];
            if let Some(d) = deriv[j] {
                v[d] = dx[j];
            }
        }
        for (j, &i) in elim.iter().enumerate() {
            v[i] += y[j];
        }
        for &(j, i) in &inputs {
            v[i] += u[j];
        }
        v
    };

    let mut segs: Vec<(f64, DVector<f64>)> = segments.to_vec();
    segs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if segs.is_empty() || segs[0].0 > t_span.0 {
        segs.insert(0, (t_span.0, DVector::zeros(m)));
    }
    for (_, u) in &segs {
        if u.len() != m {
            return Err(Error::Dimension { what: "input segment length".into(), expected: m, got: u.len() });
        }
    }
    let mut x = DVector::from_iterator(k, kept.iter().map(|&i| start[i] - base[i]));
    let mut u = segs[0].1.clone();
    let mut times = vec![t_span.0];
    let mut samples = vec![sample(&x, &u)];
    for (s, (ta, ua)) in segs.iter().enumerate() {
        let tb = segs.get(s + 1).map_or(t_span.1, |n| n.0).min(t_span.1);
        let ta = ta.max(t_span.0);
        if s > 0 {
            u = ua.clone();
            times.push(ta);
            samples.push(sample(&x, &u));
        }
        if tb <= ta {
            continue;
        }
        let n_steps = ((tb - ta) / step - 1e-9).ceil().max(1.0) as usize;
        let h = (tb - ta) / n_steps as f64;
        let mut aug = DMatrix::zeros(k + 1, k + 1);
        aug.view_mut((0, 0), (k, k)).copy_from(&(&proper.a * h));
        let bu = &proper.b * &u * h;
        aug.view_mut((0, k), (k, 1)).copy_from(&bu);
        let phi = aug.exp();
        let ad = phi.view((0, 0), (k, k)).into_owned();
        let gamma = phi.view((0, k), (k, 1)).into_owned();
        for i in 1..=n_steps {
            x = &ad * &x + &gamma;
            times.push(if i == n_steps { tb } else { ta + i as f64 * h });
            samples.push(sample(&x, &u));
        }
    }
    let drift = vec![0.0; samples.len()];
    Ok(Trajectory {
        partition: partition.clone(),
        times,
        samples,
        drift,
        stats: SolverStats::default(),
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::OperatingPoint;

    fn series(values: &[f64]) -> Series {
        Series {
            names: vec!["a".into()],
            times: (0..values.len()).map(|k| k as f64).collect(),
            rows: values.iter().map(|v| vec![*v]).collect(),
        }
    }

    #[test]
    fn event_json_shape() {
        let e = BenchEvent::LoadScale { t: 2.5, factor: 0.95 };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, r#"{"kind":"load-scale","t":2.5,"factor":0.95}"#);
        let back: BenchEvent = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
        let sc = Scenario::large_step();
        let json = serde_json::to_string(&sc).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&json).unwrap(), sc);
    }

    #[test]
    fn scenario_validation() {
        assert!(Scenario::small_step().validate().is_ok());
        let mut s = Scenario::small_step();
        s.t_lin = 5.0;
        assert!(s.validate().is_err());
        let mut s = Scenario::small_step();
        s.events.push(BenchEvent::Input { t: 3.0, signal: "nope".into(), value: 1.0 });
        assert!(matches!(s.validate(), Err(Error::UnknownSignal(_))));
        let mut s = Scenario::small_step();
        s.events[0] = BenchEvent::LoadScale { t: 2.5, factor: -1.0 };
        assert!(s.validate().is_err());
        assert!(Scenario::by_name("bogus", &References::default()).is_err());
    }

    #[test]
    fn deviation_of_shifted_series() {
        let a = series(&[0.0, 2.0, 4.0]);
        let b = series(&[0.0, 2.5, 4.0]);
        let d = compare_series(&a, &b, (0.0, 2.0), &[]).unwrap();
        assert_eq!(d.signals[0].max_abs, 0.5);
        assert_eq!(d.max_relative, 0.5 / 4.0);
        let d = compare_series(&a, &b, (0.0, 2.0), &[1.0]).unwrap();
        assert_eq!(d.max_relative, 0.0);
        let off = terminal_offset(&a, &series(&[0.0, 0.0, 3.0])).unwrap();
        assert_eq!(off.signals[0].max_abs, 1.0);
    }

    #[test]
    fn series_csv() {
        let s = series(&[1.0, 2.0]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,a\n"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(s.value_at("a", 0.5).unwrap(), 1.5);
        assert!(s.column("b").is_err());
    }

    #[test]
    fn descriptor_step_response() {
        // x' = -x + u with an algebraic y = 2x.
        let partition = Arc::new(
            SignalPartition::from_parts(1, 1, 0, 1, vec!["der(x)".into(), "x".into(), "u".into(), "y".into()]).unwrap(),
        );
        let e = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -2.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[-1.0, 0.0]);
        let mut sys = DescriptorSystem::from_matrices(-e, -a, -b).unwrap();
        sys.names = vec!["x".into(), "y".into()];
        sys.inputs = vec!["u".into()];
        sys.point = OperatingPoint::new(SignalVector::zeros(partition.clone())).unwrap();
        let segs = vec![(0.0, DVector::from_element(1, 0.0)), (1.0, DVector::from_element(1, 1.0))];
        let traj = simulate_descriptor(&sys, &partition, &[0.0, 0.0, 0.0, 0.0], &segs, (0.0, 3.0), 0.01).unwrap();
        let x = traj.value_at("x", 3.0).unwrap();
        assert!((x - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!((traj.value_at("y", 3.0).unwrap() - 2.0 * x).abs() < 1e-12);
        let last = traj.samples.last().unwrap();
        assert!((last[0] - (1.0 - x)).abs() < 1e-12);
        assert_eq!(traj.value_at("u", 2.0).unwrap(), 1.0);
    }
}
