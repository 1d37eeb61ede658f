//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use mlstab::bench3bus::nti::NonlinearModel;
use mlstab::bench3bus::{
    assemble, bifurcation_sweep, envelope_growth, find_equilibrium, linear_grid, run_scenario, solve_load, Assembly,
    BenchParams, NetworkCase, Scenario, SweepTarget, EQUILIBRIUM_TOL,
};
use mlstab::blocks::{pll_block, PllParams};
use mlstab::cpn1::{random_model, random_point, seeded, RandomSpec};
use mlstab::dae::{consistent_init, simulate, InputEvent, Schedule, SolverConfig};
use mlstab::gep::{default_tol, eig_compare, generalized_eig, pencil_eig, stability_verdict, GepOptions};
use mlstab::linearize::{extract_ldss, finite_difference_jacobian, jacobian_slice, EquilibriumTol, OperatingPoint};
use mlstab::{contract_full, Cpn1Model, SignalVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn(&Shared) -> Outcome;

/// Nominal benchmark shared by several checks.
struct Shared {
    case: NetworkCase,
}

const U1: f64 = 325.2059;
const U2: f64 = 22.7406;

fn pll_equilibrium(model: &Cpn1Model, u1: f64, u2: f64) -> SignalVector {
    let r = u1.hypot(u2);
    let (c, s) = (u1 / r, -u2 / r);
    let guess = SignalVector::from_named(
        model.partition_arc().clone(),
        [("z1", c + 0.01), ("z2", s - 0.01), ("z3", 0.1), ("u1", u1), ("u2", u2), ("a1", c), ("a2", s)],
    )
    .unwrap();
    let p = model.partition();
    let mut frozen: Vec<&str> = p.input_names().iter().map(String::as_str).collect();
    frozen.extend(p.derivative_range().map(|i| p.name(i)));
    consistent_init(model, &guess, &frozen).unwrap()
}

fn criterion_1(_: &Shared) -> Outcome {
    let t = Instant::now();
    let model = pll_block(&PllParams { k_p: 0.5, k_i: 9.0 }).unwrap();
    let v = pll_equilibrium(&model, U1, U2);
    let sys = extract_ldss(&model, &OperatingPoint::new(v).unwrap(), EquilibriumTol::Absolute(1e-8)).unwrap();
    let sol = generalized_eig(&sys, GepOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let want = [Complex64::new(-20.6046, 0.0), Complex64::new(-142.3954, 0.0), Complex64::new(0.0, 0.0)];
    let cmp = eig_compare(&sol.finite, &want, f64::INFINITY);
    let max_err = cmp.pairs.iter().map(|p| p.distance).fold(0.0, f64::max);
    let pass = sol.finite.len() == 3
        && sol.infinite_count == 2
        && cmp.unmatched_a.is_empty()
        && max_err <= 5e-3
        && elapsed < Duration::from_secs(1);
    let mut got: Vec<f64> = sol.finite.iter().map(|z| z.re).collect();
    got.sort_by(f64::total_cmp);
    outcome(
        pass,
        format!(
            "finite {:?}, {} infinite, max error {:.2e}, {:.3} s",
            got.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            sol.infinite_count,
            max_err,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(_: &Shared) -> Outcome {
    let t = Instant::now();
    let e = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
    let sol = pencil_eig(&e, &a, GepOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let finite_ok = sol.finite.len() == 1 && (sol.finite[0] - Complex64::new(-1.0, 0.0)).norm() <= 1e-10;
    let j = (0..2).find(|&j| sol.is_infinite(j));
    let null_residual = j.map_or(f64::INFINITY, |j| {
        let v = sol.right_vectors.column(j);
        let scale = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
        (0..2).map(|r| (0..2).map(|c| v[c] * e[(r, c)]).sum::<Complex64>().norm()).fold(0.0, f64::max) / scale
    });
    let pass = finite_ok && sol.infinite_count == 1 && null_residual <= 1e-10 && elapsed < Duration::from_millis(100);
    outcome(
        pass,
        format!(
            "finite {:?}, {} infinite, |E v_inf| / |v_inf| = {:.1e}, {:.4} s",
            sol.finite.iter().map(|z| format!("{:.12}", z.re)).collect::<Vec<_>>(),
            sol.infinite_count,
            null_residual,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3(_: &Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let spec = RandomSpec::sample(&mut rng, 10, 20);
        let model = random_model(&spec, &mut rng).unwrap();
        let tensor = model.to_full_tensor().unwrap();
        for _ in 0..100 {
            let v = random_point(model.nv(), &mut rng);
            let a = model.residual_slice(&v).unwrap();
            let b = contract_full(&tensor, &v).unwrap();
            let rel = (&a - &b).amax() / (1.0 + a.amax());
            worst = worst.max(rel);
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(30),
        format!("50 models x 100 points, max relative discrepancy {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

/// Point at which `zeros` factors of one column vanish exactly, if the
/// model has a column with that many signals.
fn zero_factor_point(model: &Cpn1Model, zeros: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let mut v = random_point(model.nv(), rng);
    let s = model.s();
    let col = (0..model.r()).find(|&r| s.column(r).iter().filter(|x| **x != 0.0).count() >= zeros)?;
    for (i, x) in s.column(col).iter().enumerate().filter(|(_, x)| **x != 0.0).take(zeros) {
        v[i] = (x.abs() - 1.0) / x;
    }
    Some(v)
}

fn criterion_4(_: &Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(4);
    let mut worst: f64 = 0.0;
    let (mut singles, mut doubles, mut models) = (0, 0, 0);
    while models < 50 {
        let spec = RandomSpec::sample(&mut rng, 10, 20);
        let model = random_model(&spec, &mut rng).unwrap();
        let (Some(p1), Some(p2)) = (zero_factor_point(&model, 1, &mut rng), zero_factor_point(&model, 2, &mut rng)) else {
            continue;
        };
        models += 1;
        let mut points: Vec<Vec<f64>> = (0..8).map(|_| random_point(model.nv(), &mut rng)).collect();
        points.push(p1);
        points.push(p2);
        singles += 1;
        doubles += 1;
        for v in &points {
            let ja = jacobian_slice(&model, v);
            let jf = finite_difference_jacobian(&model, v, 1e-6);
            let rel = (&ja - &jf).amax() / jf.amax().max(1.0);
            worst = worst.max(rel);
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst < 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "50 models x 10 points ({singles} single-zero, {doubles} double-zero), max relative error {worst:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Classical RK4 on the angle form of the PLL; inputs are held over each step.
fn pll_reference(k_p: f64, k_i: f64, x0: [f64; 2], u_of_t: impl Fn(f64) -> (f64, f64), t_end: f64, h: f64) -> Vec<[f64; 2]> {
    let f = |(u1, u2): (f64, f64), x: [f64; 2]| {
        let forcing = u1 * x[0].sin() + u2 * x[0].cos();
        [x[1] - k_p * forcing, -k_i * forcing]
    };
    let steps = (t_end / h).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0;
    out.push(x);
    for k in 0..steps {
        let u = u_of_t((k as f64 + 0.5) * h);
        let k1 = f(u, x);
        let k2 = f(u, [x[0] + h / 2.0 * k1[0], x[1] + h / 2.0 * k1[1]]);
        let k3 = f(u, [x[0] + h / 2.0 * k2[0], x[1] + h / 2.0 * k2[1]]);
        let k4 = f(u, [x[0] + h * k3[0], x[1] + h * k3[1]]);
        for i in 0..2 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(x);
    }
    out
}

fn criterion_5(_: &Shared) -> Outcome {
    let t = Instant::now();
    let (k_p, k_i) = (0.5, 9.0);
    let model = pll_block(&PllParams { k_p, k_i }).unwrap();
    let mag = U1.hypot(U2);
    let t_step = 0.05;
    let v0 = pll_equilibrium(&model, mag, 0.0);
    let schedule = Schedule::new(vec![
        InputEvent { t: t_step, signal: "u1".into(), value: U1 },
        InputEvent { t: t_step, signal: "u2".into(), value: U2 },
    ]);
    let cfg = SolverConfig::default();
    let traj = simulate(&model, &v0, &schedule, (0.0, 0.6), &cfg).unwrap();
    let h = 1e-5;
    let reference =
        pll_reference(k_p, k_i, [0.0, 0.0], |t| if t < t_step { (mag, 0.0) } else { (U1, U2) }, 0.6, h);
    let p = &traj.partition;
    let (i1, i2, i3) = (p.require("z1").unwrap(), p.require("z2").unwrap(), p.require("z3").unwrap());
    let mut worst: f64 = 0.0;
    for (tk, s) in traj.times.iter().zip(&traj.samples) {
        let x = reference[(tk / h).round() as usize];
        let d = [(s[i1] - x[0].cos()).abs(), (s[i2] - x[0].sin()).abs(), (s[i3] - x[1]).abs()];
        worst = worst.max(d.iter().copied().fold(0.0, f64::max));
    }
    let drift = mlstab::dae::drift_metric(&traj);
    let last = reference.last().unwrap();
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-4 && drift <= 1e-6 && elapsed < Duration::from_secs(10),
        format!(
            "4 deg step: max deviation {worst:.2e}, lift drift {drift:.1e}, final angle {:.4} deg, {:.2} s",
            last[0].to_degrees(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6(_: &Shared) -> Outcome {
    let params = BenchParams::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for (assembly, sizes) in
        [(Assembly::Full, vec![9, 9, 8]), (Assembly::GfmOnly, vec![9, 7]), (Assembly::GflOnly, vec![9, 6])]
    {
        let case = match assemble(&params, assembly) {
            Ok(c) => c,
            Err(e) => return outcome(false, format!("{assembly:?}: {e}")),
        };
        let got = case.counts();
        let want = assembly.reference_counts();
        let got_sizes: Vec<usize> = case.groups.iter().map(|(_, s)| s.len()).collect();
        let ok = got == want && got_sizes == sizes;
        pass &= ok;
        lines.push(format!(
            "{assembly:?} n={} m={} p+q={} R={} (expected {}) N_phi={} groups {:?}",
            got.n, got.m, got.p_plus_q, got.r, want.r, got.n_phi, got_sizes
        ));
    }
    let (case, op) = solve_load(&params).unwrap();
    let rank = extract_ldss(&case.composite, &op, EQUILIBRIUM_TOL).unwrap().rank_e();
    pass &= rank == 26;
    lines.push(format!("rank E = {rank}"));
    outcome(pass, lines.join("; "))
}

fn criterion_7(sh: &Shared) -> Outcome {
    let t = Instant::now();
    let case = &sh.case;
    let op = find_equilibrium(case, &case.params.references).unwrap();
    let sys = extract_ldss(&case.composite, &op, EQUILIBRIUM_TOL).unwrap();
    let sol = generalized_eig(&sys, GepOptions::default()).unwrap();
    let tol = default_tol(&sol);
    let verdict = stability_verdict(&sol, tol);
    let nm = NonlinearModel::new(case).unwrap();
    let (x, u) = nm.from_lifted(&op.v_bar).unwrap();
    let x = nm.equilibrium(&x, &u).unwrap();
    let reference = nm.eigenvalues(&x, &u);
    let nonzero = sol.nonzero_finite(tol);
    let cmp = eig_compare(&nonzero, &reference, 1e-3);
    let elapsed = t.elapsed();
    let pass = verdict.stable
        && cmp.all_within()
        && cmp.unmatched_a.is_empty()
        && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} nonzero eigenvalues vs {} reference, max relative distance {:.2e}, unmatched {}/{}, verdict {}, dominant {:.4}{:+.4}i, {:.2} s",
            nonzero.len(),
            reference.len(),
            cmp.max_relative,
            cmp.unmatched_a.len(),
            cmp.unmatched_b.len(),
            if verdict.stable { "stable" } else { "unstable" },
            verdict.dominant.first().map_or(f64::NAN, |z| z.re),
            verdict.dominant.first().map_or(f64::NAN, |z| z.im.abs()),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8(sh: &Shared) -> Outcome {
    let cfg = SolverConfig::default();
    let bound = 10.0 * cfg.rel_tol;
    let small = run_scenario(&sh.case, &Scenario::small_step(), &cfg).unwrap().report;
    let large = run_scenario(&sh.case, &Scenario::large_step(), &cfg).unwrap().report;
    let dev_small = small.imti_vs_nti.as_ref().map_or(f64::INFINITY, |d| d.max_relative);
    let dev_large = large.imti_vs_nti.as_ref().map_or(f64::INFINITY, |d| d.max_relative);
    let off_small = small.ldss_offset.max_relative;
    let off_large = large.ldss_offset.max_relative;
    let pass = dev_small <= bound && off_small > 0.0 && off_small < 0.1 && off_large > off_small && dev_large <= bound;
    outcome(
        pass,
        format!(
            "small step: |iMTI - NTI| {dev_small:.2e} (bound {bound:.0e}), LDSS offset {off_small:.2e}; large step: |iMTI - NTI| {dev_large:.2e}, LDSS offset {off_large:.2e}"
        ),
    )
}

fn criterion_9(sh: &Shared) -> Outcome {
    let case = &sh.case;
    let refs = &case.params.references;
    let sweep = bifurcation_sweep(case, refs, &linear_grid(0.0, 1.0, 11), SweepTarget::Both).unwrap();
    let Some(cross) = sweep.crossing.clone() else {
        return outcome(false, "no sign change of the dominant complex pair on p_ref in [0, 1]");
    };
    let cfg = SolverConfig::default();
    let growth = |p: f64| {
        let sc = Scenario::hopf(refs, p, 1e-3, 0.5);
        let r = run_scenario(case, &sc, &cfg).unwrap();
        let s = r.imti_series().unwrap();
        envelope_growth(&s.times, &s.column("gfm_p").unwrap(), sc.t_span)
    };
    let past = growth(cross.p_ref + 0.004);
    let before = growth(cross.p_ref - 0.004);
    outcome(
        past >= 0.95,
        format!(
            "crossing at p_ref = {:.4} ({:.0} rad/s); envelope ratio over final 20%: {past:.3} just past, {before:.3} just before",
            cross.p_ref, cross.frequency
        ),
    )
}

fn criterion_10(sh: &Shared) -> Outcome {
    let case = &sh.case;
    let op = find_equilibrium(case, &case.params.references).unwrap();
    let v = op.values();
    let model = &case.composite;
    let reps = 100;
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(jacobian_slice(model, std::hint::black_box(v)));
    }
    let analytic = t.elapsed();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(finite_difference_jacobian(model, std::hint::black_box(v), 1e-6));
    }
    let fd = t.elapsed();
    let ratio = fd.as_secs_f64() / analytic.as_secs_f64();
    outcome(
        ratio >= 10.0,
        format!(
            "R = {}: analytic {:.1} us, finite differences {:.1} us per Jacobian, speed-up {ratio:.1}x",
            model.r(),
            analytic.as_secs_f64() * 1e6 / reps as f64,
            fd.as_secs_f64() * 1e6 / reps as f64
        ),
    )
}

fn main() {
    // Ignore libtest arguments such as --nocapture or filters.
    let (case, _) = solve_load(&BenchParams::default()).expect("nominal benchmark");
    let shared = Shared { case };
    let checks: [(u32, &str, Check); 10] = [
        (1, "PLL golden eigenvalues", criterion_1),
        (2, "descriptor toy pencil", criterion_2),
        (3, "CPN1 vs full tensor", criterion_3),
        (4, "analytic vs finite-difference Jacobian", criterion_4),
        (5, "lift equivalence", criterion_5),
        (6, "three-bus structure", criterion_6),
        (7, "cross-model spectrum", criterion_7),
        (8, "scenario behaviour", criterion_8),
        (9, "Hopf crossing", criterion_9),
        (10, "Jacobian speed-up", criterion_10),
    ];
    let mut failed = Vec::new();
    for (k, name, check) in checks {
        let r = std::panic::catch_unwind(|| check(&shared))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_message(&e))));
        println!("criterion {k:>2} {} {name}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        if !r.pass {
            failed.push(k);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}
