//! Active power sweeps and Hopf crossing detection.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{find_equilibrium, NetworkCase, References, SweepTarget, EQUILIBRIUM_TOL};
use crate::error::{Error, Result};
use crate::gep::{default_tol, eig_compare, generalized_eig, stability_verdict, GepOptions, StabilityVerdict};
use crate::linearize::extract_ldss;
use crate::par;

/// Spectrum at one sweep value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_ref: f64,
    pub verdict: StabilityVerdict,
    /// Nonzero finite eigenvalues.
    #[serde(with = "crate::gep::complex_list")]
    pub eigenvalues: Vec<Complex64>,
}

impl SweepPoint {
    /// Largest real part among the nonzero eigenvalues.
    pub fn abscissa(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
    }

    fn dominant_pair(&self) -> Option<Complex64> {
        self.verdict.dominant.iter().copied().find(|l| l.im > 0.0)
    }
}

/// Location where the dominant complex pair crosses the imaginary axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopfCrossing {
    /// Last grid value on the stable side and first on the unstable side.
    pub bracket: (f64, f64),
    /// Crossing value refined by bisection.
    pub p_ref: f64,
    /// Imaginary part of the pair at the crossing, rad/s.
    pub frequency: f64,
    pub bisection_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub target: SweepTarget,
    pub points: Vec<SweepPoint>,
    /// Sweep value at which the equilibrium search first failed, if any.
    pub failed_at: Option<f64>,
    pub failure: Option<String>,
    pub crossing: Option<HopfCrossing>,
    /// Largest nearest-neighbour eigenvalue move between adjacent points,
    /// relative to the eigenvalue magnitude.
    pub max_jump: f64,
}

/// Spectrum of the linearization at one value of the swept references.
pub fn sweep_point(case: &NetworkCase, refs: &References, target: SweepTarget, p: f64) -> Result<SweepPoint> {
    let r = refs.with_p_ref(target, p);
    let op = find_equilibrium(case, &r)?;
    let sys = extract_ldss(&case.composite, &op, EQUILIBRIUM_TOL)?;
    let gep = generalized_eig(&sys, GepOptions::default())?;
    let tol = default_tol(&gep);
    let verdict = stability_verdict(&gep, tol);
    let mut eigenvalues = gep.nonzero_finite(tol);
    eigenvalues.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
    Ok(SweepPoint { p_ref: p, verdict, eigenvalues })
}

/// Evaluates the spectrum on `grid` in parallel. The result stops at the
/// first value where the equilibrium cannot be found.
pub fn bifurcation_sweep(case: &NetworkCase, refs: &References, grid: &[f64], target: SweepTarget) -> Result<SweepResult> {
    if let Some(bad) = grid.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("sweep grid value {bad}")));
    }
    let evaluated = par::map(grid, |&p| sweep_point(case, refs, target, p));
    let mut points = Vec::new();
    let mut failed_at = None;
    let mut failure = None;
    for (p, r) in grid.iter().zip(evaluated) {
        match r {
            Ok(pt) => points.push(pt),
            Err(e) => {
                failed_at = Some(*p);
                failure = Some(e.to_string());
                break;
            }
        }
    }
    let max_jump = points
        .windows(2)
        .map(|w| eig_compare(&w[0].eigenvalues, &w[1].eigenvalues, f64::INFINITY).max_relative)
        .fold(0.0, f64::max);
    let crossing = match find_bracket(&points) {
        Some((a, b)) => Some(refine_crossing(case, refs, target, a, b, 1e-4)?),
        None => None,
    };
    Ok(SweepResult { target, points, failed_at, failure, crossing, max_jump })
}

fn find_bracket(points: &[SweepPoint]) -> Option<(f64, f64)> {
    points.windows(2).find_map(|w| {
        let crosses = w[0].abscissa() <= 0.0 && w[1].abscissa() > 0.0 && w[1].dominant_pair().is_some();
        crosses.then_some((w[0].p_ref, w[1].p_ref))
    })
}

/// Bisects `[a, b]` on the sign of the spectral abscissa until the bracket
/// is shorter than `width`.
pub fn refine_crossing(
    case: &NetworkCase,
    refs: &References,
    target: SweepTarget,
    a: f64,
    b: f64,
    width: f64,
) -> Result<HopfCrossing> {
    let (mut lo, mut hi) = (a, b);
    let mut hi_point = sweep_point(case, refs, target, hi)?;
    let mut lo_point = sweep_point(case, refs, target, lo)?;
    let mut steps = 0;
    while hi - lo > width && steps < 60 {
        let mid = 0.5 * (lo + hi);
        let pt = sweep_point(case, refs, target, mid)?;
        if pt.abscissa() > 0.0 {
            hi = mid;
            hi_point = pt;
        } else {
            lo = mid;
            lo_point = pt;
        }
        steps += 1;
    }
    let (ra, rb) = (lo_point.abscissa(), hi_point.abscissa());
    let p_ref = if rb > ra { lo + (hi - lo) * (-ra) / (rb - ra) } else { 0.5 * (lo + hi) };
    let frequency = hi_point.dominant_pair().or(lo_point.dominant_pair()).map_or(0.0, |l| l.im);
    Ok(HopfCrossing { bracket: (a, b), p_ref, frequency, bisection_steps: steps })
}

/// Envelope trend over the final fifth of `window`: the oscillation amplitude
/// in its second half divided by the amplitude in its first half, each taken
/// as half the peak-to-peak swing. Values near or above one mean
/// the envelope is not contracting.
pub fn envelope_growth(times: &[f64], values: &[f64], window: (f64, f64)) -> f64 {
    let span = window.1 - window.0;
    let amplitude = |a: f64, b: f64| {
        let slice: Vec<f64> = times.iter().zip(values).filter(|(t, _)| **t >= a && **t <= b).map(|(_, v)| *v).collect();
        let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
        if slice.is_empty() { 0.0 } else { 0.5 * (hi - lo) }
    };
    let late = amplitude(window.1 - 0.1 * span, window.1);
    let early = amplitude(window.1 - 0.2 * span, window.1 - 0.1 * span);
    late / early.max(f64::MIN_POSITIVE)
}

/// Evenly spaced grid with `n` points from `from` to `to`.
pub fn linear_grid(from: f64, to: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..n).map(|k| from + (to - from) * k as f64 / (n - 1) as f64).collect(),
    }
}
