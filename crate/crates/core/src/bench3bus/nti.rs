//! Hand-written nonlinear model of the full benchmark with the angles kept as
//! angles, used as an independent reference for the lifted model.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{Assembly, BenchParams, NetworkCase, Series, INPUTS, MONITORED};
use crate::blocks::{CouplingSign, IntegralGain};
use crate::cpn1::SignalVector;
use crate::dae::{integrate_ode, OdeSystem, SolverConfig};
use crate::error::{Error, Result};

/// State order of [`NonlinearModel`].
pub const NTI_STATES: [&str; 19] = [
    "gfm_omega",
    "gfm_theta",
    "gfm_xq",
    "gfm_xva_d",
    "gfm_xva_q",
    "gfm_xi_d",
    "gfm_xi_q",
    "gfl_delta",
    "gfl_z3",
    "gfl_xp",
    "gfl_xq",
    "gfl_xi_d",
    "gfl_xi_q",
    "ig_D",
    "ig_Q",
    "igfm_D",
    "igfm_Q",
    "igfl_D",
    "igfl_Q",
];

/// Index of the load resistance in the parameter vector; the six references
/// come first and the source magnitude last.
pub const R_LOAD: usize = 6;
pub const V_SOURCE: usize = 7;

/// The full benchmark as an explicit ODE `x' = f(x, u)`.
#[derive(Clone, Debug)]
pub struct NonlinearModel {
    pub params: BenchParams,
}

struct Eval {
    dx: [f64; 19],
    out: Vec<f64>,
}

impl NonlinearModel {
    pub fn new(case: &NetworkCase) -> Result<Self> {
        if case.assembly != Assembly::Full {
            return Err(Error::InvalidModel("the nonlinear reference covers the full assembly only".into()));
        }
        Ok(Self { params: case.params.clone() })
    }

    /// Parameter vector at the references and network data of the model.
    pub fn parameters(&self, refs: &[f64; 6]) -> Vec<f64> {
        let mut u = refs.to_vec();
        u.push(self.params.r_load);
        u.push(self.params.source_voltage());
        u
    }

    fn eval(&self, x: &[f64], u: &[f64]) -> Eval {
        let prm = &self.params;
        let (w, theta, xqf, xva_d, xva_q, xi_d, xi_q) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6]);
        let (delta, z3, xp, xq, yi_d, yi_q) = (x[7], x[8], x[9], x[10], x[11], x[12]);
        let (ig, igfm, igfl) = ((x[13], x[14]), (x[15], x[16]), (x[17], x[18]));
        let (p_ref, q_ref, w_ref, v_ref, p_ref_l, q_ref_l) = (u[0], u[1], u[2], u[3], u[4], u[5]);
        let (r_load, v_s) = (u[R_LOAD], u[V_SOURCE]);
        let g = prm.power.gain;
        let omega_b = prm.base.omega();

        let vl = (r_load * (ig.0 + igfm.0 + igfl.0), r_load * (ig.1 + igfm.1 + igfl.1));

        // Grid-forming converter in its own frame at angle theta.
        let (c, s) = (theta.cos(), theta.sin());
        let to_local = |a: (f64, f64)| (c * a.0 + s * a.1, c * a.1 - s * a.0);
        let vm = to_local(vl);
        let im = to_local(igfm);
        let pm = g * (vm.0 * im.0 + vm.1 * im.1);
        let qm = g * (vm.1 * im.0 - vm.0 * im.1);
        let vsm = &prm.vsm;
        let dw = ((p_ref - pm / vsm.s_b) + vsm.damping.factor() * vsm.k_d * (w - w_ref)) / (2.0 * vsm.h);
        let dtheta = vsm.omega_b * (w - vsm.frame);
        let droop = &prm.droop;
        let dxqf = -droop.omega_f * xqf + droop.omega_f * qm;
        let vds = v_ref - droop.k_q * (xqf - q_ref);
        let va = &prm.admittance;
        let a = va.r_v / va.l_v;
        let wc = match va.coupling {
            CouplingSign::AsPrinted => va.omega_b,
            CouplingSign::Inductive => -va.omega_b,
        };
        let (ed, eq) = (vds - vm.0, -vm.1);
        let dxva_d = -a * xva_d - wc * xva_q + ed;
        let dxva_q = -a * xva_q + wc * xva_d + eq;
        let isd = (xva_d / va.l_v, xva_q / va.l_v);
        let cc = &prm.current;
        let k_out = match cc.integral {
            IntegralGain::AsPrinted => cc.k_i,
            IntegralGain::Single => 1.0,
        };
        let control = |iref: (f64, f64), i: (f64, f64), v: (f64, f64), x: (f64, f64), speed: f64| {
            let e = (iref.0 - i.0, iref.1 - i.1);
            let wl = cc.l_f * cc.omega_b * speed;
            let u = (cc.k_p * e.0 + k_out * x.0 - wl * i.1 + v.0, cc.k_p * e.1 + k_out * x.1 + wl * i.0 + v.1);
            ((cc.k_i * e.0, cc.k_i * e.1), u)
        };
        let (dxi, um) = control(isd, im, vm, (xi_d, xi_q), w);
        let um_g = (c * um.0 - s * um.1, s * um.0 + c * um.1);

        // Grid-following converter, PLL angle delta.
        let (z1, z2) = (delta.cos(), delta.sin());
        let to_pll = |a: (f64, f64)| (z1 * a.0 - z2 * a.1, z2 * a.0 + z1 * a.1);
        let vf = to_pll(vl);
        let ifl = to_pll(igfl);
        let rate = z3 - prm.pll.k_p * vf.1;
        let ddelta = rate;
        let dz3 = -prm.pll.k_i * vf.1;
        let wp = 1.0 - rate / omega_b;
        let pf = g * (vf.0 * ifl.0 + vf.1 * ifl.1);
        let qf = g * (vf.1 * ifl.0 - vf.0 * ifl.1);
        let pq = &prm.pq;
        let ep = pq.s_b * p_ref_l - pf;
        let eqq = pq.s_b * q_ref_l - qf;
        let iref = (pq.k_p * ep + pq.k_i * xp, -(pq.k_p * eqq + pq.k_i * xq));
        let (dyi, uf) = control(iref, ifl, vf, (yi_d, yi_q), wp);
        let uf_g = (z1 * uf.0 + z2 * uf.1, z1 * uf.1 - z2 * uf.0);

        // Branches in the global frame.
        let branch = |i: (f64, f64), vk: (f64, f64), r: f64, l: f64| {
            (
                -r / l * i.0 + omega_b * i.1 + (vk.0 - vl.0) / l,
                -r / l * i.1 - omega_b * i.0 + (vk.1 - vl.1) / l,
            )
        };
        let (rt, lt) = prm.thevenin();
        let (rf, lf) = prm.filter();
        let dig = branch(ig, (v_s, 0.0), rt, lt);
        let digfm = branch(igfm, um_g, rf, lf);
        let digfl = branch(igfl, uf_g, rf, lf);

        let dx = [
            dw, dtheta, dxqf, dxva_d, dxva_q, dxi.0, dxi.1, ddelta, dz3, ep, eqq, dyi.0, dyi.1, dig.0, dig.1, digfm.0,
            digfm.1, digfl.0, digfl.1,
        ];
        let out = MONITORED
            .iter()
            .map(|name| match *name {
                "gfm_omega" => w,
                "gfm_p" => pm,
                "gfm_q" => qm,
                "gfl_p" => pf,
                "gfl_q" => qf,
                "gfl_wp" => wp,
                "vL_D" => vl.0,
                "vL_Q" => vl.1,
                "ig_D" => ig.0,
                "ig_Q" => ig.1,
                "igfm_D" => igfm.0,
                "igfm_Q" => igfm.1,
                "igfl_D" => igfl.0,
                "igfl_Q" => igfl.1,
                _ => f64::NAN,
            })
            .collect();
        Eval { dx, out }
    }

    /// Monitored signals (see [`MONITORED`]) at a state.
    pub fn monitored(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.eval(x, u).out
    }

    /// State and parameter vectors matching a point of the lifted model.
    pub fn from_lifted(&self, v: &SignalVector) -> Result<(Vec<f64>, Vec<f64>)> {
        let ang = |c: &str, s: &str| -> Result<f64> { Ok(v.get(s)?.atan2(v.get(c)?)) };
        let grid = ang("zcg", "zsg")?;
        let mut x = Vec::with_capacity(19);
        for name in NTI_STATES {
            x.push(match name {
                "gfm_theta" => ang("gfm_zc", "gfm_zs")? - grid,
                "gfl_delta" => ang("gfl_z1", "gfl_z2")?,
                other => v.get(other)?,
            });
        }
        let mut refs = [0.0; 6];
        for (k, name) in INPUTS.iter().enumerate() {
            refs[k] = v.get(name)?;
        }
        Ok((x, self.parameters(&refs)))
    }

    /// Newton polish of an equilibrium with a finite-difference Jacobian.
    pub fn equilibrium(&self, x0: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut x = x0.to_vec();
        let mut f = vec![0.0; 19];
        for _ in 0..20 {
            self.rhs(&x, u, &mut f);
            let scale = self.jacobian(&x, u);
            let res = DMatrix::from_column_slice(19, 1, &f);
            let step = scale.lu().solve(&(-res)).ok_or_else(|| Error::SingularIteration("nonlinear reference Jacobian".into()))?;
            let mut worst: f64 = 0.0;
            for i in 0..19 {
                x[i] += step[i];
                worst = worst.max(step[i].abs() / (1.0 + x[i].abs()));
            }
            if worst < 1e-13 {
                return Ok(x);
            }
        }
        self.rhs(&x, u, &mut f);
        let r = f.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        if r < 1e-6 {
            Ok(x)
        } else {
            Err(Error::NewtonDivergence { iterations: 20, residual: r, detail: "; nonlinear reference equilibrium".into() })
        }
    }

    /// Central-difference Jacobian `∂f/∂x`.
    pub fn jacobian(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(19, 19);
        let mut xp = x.to_vec();
        let (mut fp, mut fm) = (vec![0.0; 19], vec![0.0; 19]);
        for c in 0..19 {
            let h = 1e-6 * (1.0 + x[c].abs());
            xp[c] = x[c] + h;
            self.rhs(&xp, u, &mut fp);
            xp[c] = x[c] - h;
            self.rhs(&xp, u, &mut fm);
            xp[c] = x[c];
            for r in 0..19 {
                j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    }

    /// Eigenvalues of the finite-difference Jacobian.
    pub fn eigenvalues(&self, x: &[f64], u: &[f64]) -> Vec<Complex64> {
        self.jacobian(x, u).complex_eigenvalues().iter().copied().collect()
    }

    /// Integrates from `x0`; `events` change entries of the parameter vector.
    pub fn simulate(
        &self,
        x0: &[f64],
        u0: &[f64],
        events: &[(f64, usize, f64)],
        t_span: (f64, f64),
        cfg: &SolverConfig,
    ) -> Result<Series> {
        let (times, states) = integrate_ode(self, x0, u0, events, t_span, cfg)?;
        let mut ev: Vec<(f64, usize, f64)> = events.to_vec();
        ev.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut u = u0.to_vec();
        let mut k = 0;
        let eps = 1e-12 * (1.0 + t_span.1.abs());
        let mut rows = Vec::with_capacity(times.len());
        for (t, x) in times.iter().zip(&states) {
            while k < ev.len() && ev[k].0 <= t + eps {
                u[ev[k].1] = ev[k].2;
                k += 1;
            }
            rows.push(self.monitored(x, &u));
        }
        Ok(Series { names: MONITORED.iter().map(|s| s.to_string()).collect(), times, rows })
    }
}

impl OdeSystem for NonlinearModel {
    fn dim(&self) -> usize {
        19
    }

    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.eval(x, u).dx);
    }
}
