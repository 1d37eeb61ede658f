use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::Serialize;
use serde_json::Value;

use mlstab::bench3bus::{
    assemble, bifurcation_sweep, linear_grid, run_scenario, solve_load, Assembly, BenchParams, Counts, Scenario,
    ScenarioReport, SweepResult, SweepTarget,
};
use mlstab::blocks::{build_block, default_block_params, BLOCK_NAMES};
use mlstab::cpn1::{random_model, seeded, RandomSpec};
use mlstab::dae::{consistent_init, simulate, Schedule, SolverConfig};
use mlstab::gep::{default_tol, eig_compare, generalized_eig, stability_verdict, GepOptions, StabilityVerdict};
use mlstab::linearize::{extract_ldss, DescriptorSystem, EquilibriumTol, OperatingPoint};
use mlstab::{compose, Cpn1Model, SignalVector};

use crate::output::{complex, exit, num, read_json, require_file, CliError, Format, Sink, Table};
use crate::{AssemblyArg, Cli, Command, TargetArg};

pub fn run(cli: &Cli) -> Result<u8, CliError> {
    let g = &cli.global;
    let sink = Sink::new(g.output.as_deref())?;
    match &cli.command {
        Command::Block { name, params, show_params } => cmd_block(&sink, g.format, name, params.as_deref(), *show_params),
        Command::Compose { models, links } => cmd_compose(&sink, models, links),
        Command::Info { model } => cmd_info(&sink, g.format, model),
        Command::Random { n, m, p, q, r, density } => {
            let spec = RandomSpec { n: *n, m: *m, p: *p, q: *q, r: *r, density: *density };
            sink.json(&random_model(&spec, &mut seeded(g.seed))?)?;
            Ok(exit::OK)
        }
        Command::Simulate { model, init, schedule, t_start, t_end, max_step, no_init, long } => {
            cmd_simulate(&sink, g.format, model, init, schedule.as_deref(), (*t_start, *t_end), *max_step, *no_init, *long)
        }
        Command::Linearize { model, point, tol } => cmd_linearize(&sink, model, point, *tol),
        Command::Eig { ldss, tol } => cmd_eig(&sink, g.format, ldss, *tol),
        Command::Compare { a, b, tol } => cmd_compare(&sink, g.format, a, b, *tol),
        Command::Bench { case: _, scenario, scenario_file, params, assembly, out_dir } => cmd_bench(
            &sink,
            g.format,
            scenario,
            scenario_file.as_deref(),
            params.as_deref(),
            *assembly,
            out_dir.as_deref(),
        ),
        Command::Sweep { from, to, points, target, params } => {
            cmd_sweep(&sink, g.format, (*from, *to, *points), *target, params.as_deref())
        }
    }
}

fn load_model(path: &Path) -> Result<Cpn1Model, CliError> {
    require_file(path)?;
    read_json(path)
}

/// Places the named values of a point file onto the model's signals.
fn load_point(model: &Cpn1Model, path: &Path) -> Result<SignalVector, CliError> {
    require_file(path)?;
    let point: OperatingPoint = read_json(path)?;
    let names = point.v_bar.partition().names().to_vec();
    let pairs = names.iter().map(String::as_str).zip(point.v_bar.values().iter().copied());
    Ok(SignalVector::from_named(model.partition_arc().clone(), pairs)?)
}

fn cmd_block(sink: &Sink, format: Format, name: &str, params: Option<&Path>, show: bool) -> Result<u8, CliError> {
    if name == "list" {
        let text = BLOCK_NAMES.join("\n") + "\n";
        match format {
            Format::Json => sink.json(&BLOCK_NAMES)?,
            _ => sink.write(text.as_bytes())?,
        }
        return Ok(exit::OK);
    }
    let value: Value = match params {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => default_block_params(name)?,
    };
    let model = build_block(name, &value)?;
    if show {
        let defaults = default_block_params(name)?;
        let used = match (defaults, value) {
            (Value::Object(mut d), Value::Object(v)) => {
                d.extend(v);
                Value::Object(d)
            }
            (_, v) => v,
        };
        sink.json(&used)?;
    } else {
        sink.json(&model)?;
    }
    Ok(exit::OK)
}

fn cmd_compose(sink: &Sink, models: &[std::path::PathBuf], links: &[String]) -> Result<u8, CliError> {
    for m in models {
        require_file(m)?;
    }
    let pairs: Vec<(String, String)> = links
        .iter()
        .map(|l| {
            l.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("link `{l}` is not of the form FROM:TO")))
        })
        .collect::<Result<_, _>>()?;
    let loaded: Vec<Cpn1Model> = models.iter().map(|p| read_json(p)).collect::<Result<_, _>>()?;
    let refs: Vec<&Cpn1Model> = loaded.iter().collect();
    let link_refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    sink.json(&compose(&refs, &link_refs)?)?;
    Ok(exit::OK)
}

fn cmd_info(sink: &Sink, format: Format, path: &Path) -> Result<u8, CliError> {
    let model = load_model(path)?;
    let rep = model.sparsity_report();
    match format {
        Format::Json => sink.json(&rep)?,
        _ => {
            let mut t = Table::new(&["quantity", "value"]);
            for (k, v) in [
                ("R", rep.r),
                ("N_v", rep.nv),
                ("N_phi", rep.n_phi),
                ("n", rep.n),
                ("m", rep.m),
                ("p", rep.p),
                ("q", rep.q),
                ("nnz(Phi)", rep.nnz_phi),
                ("nnz(S)", rep.nnz_s),
                ("max degree", rep.max_degree),
            ] {
                t.row(vec![k.to_string(), v.to_string()]);
            }
            sink.write(if format == Format::Csv { t.csv() } else { t.render() }.as_bytes())?;
        }
    }
    Ok(exit::OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    sink: &Sink,
    format: Format,
    model: &Path,
    init: &Path,
    schedule: Option<&Path>,
    t_span: (f64, f64),
    max_step: Option<f64>,
    no_init: bool,
    long: bool,
) -> Result<u8, CliError> {
    require_file(model)?;
    require_file(init)?;
    if let Some(s) = schedule {
        require_file(s)?;
    }
    if !(t_span.1 > t_span.0) {
        return Err(CliError::Usage(format!("--t-end {} must exceed --t-start {}", t_span.1, t_span.0)));
    }
    let model = load_model(model)?;
    let guess = load_point(&model, init)?;
    let schedule: Schedule = match schedule {
        Some(p) => Schedule::new(read_json::<Schedule>(p)?.events),
        None => Schedule::default(),
    };
    let mut cfg = SolverConfig::default();
    if let Some(h) = max_step {
        cfg.max_step = h;
    }
    let v0 = if no_init {
        guess
    } else {
        let p = model.partition();
        let frozen: Vec<&str> = p.state_names().iter().chain(p.input_names()).map(String::as_str).collect();
        consistent_init(&model, &guess, &frozen)?
    };
    let traj = simulate(&model, &v0, &schedule, t_span, &cfg)?;
    let aborted = traj.aborted.clone();
    match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                names: &'a [String],
                times: &'a [f64],
                samples: &'a [Vec<f64>],
                aborted: &'a Option<String>,
            }
            sink.json(&Out { names: traj.partition.names(), times: &traj.times, samples: &traj.samples, aborted: &aborted })?;
        }
        _ => {
            let mut buf = Vec::new();
            if long {
                traj.write_csv_long(&mut buf)?;
            } else {
                traj.write_csv(&mut buf)?;
            }
            sink.write(&buf)?;
        }
    }
    match aborted {
        Some(reason) => Err(CliError::Lib(mlstab::Error::StepUnderflow { t: traj.times.last().copied().unwrap_or(t_span.0), reason })),
        None => Ok(exit::OK),
    }
}

fn cmd_linearize(sink: &Sink, model: &Path, point: &Path, tol: f64) -> Result<u8, CliError> {
    require_file(model)?;
    require_file(point)?;
    let model = load_model(model)?;
    let v = load_point(&model, point)?;
    let sys = extract_ldss(&model, &OperatingPoint::new(v)?, EquilibriumTol::TermRelative(tol))?;
    sink.json(&sys)?;
    Ok(exit::OK)
}

#[derive(Serialize)]
struct EigOutput {
    #[serde(serialize_with = "pairs")]
    finite: Vec<Complex64>,
    infinite_count: usize,
    verdict: StabilityVerdict,
}

fn pairs<S: serde::Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
    v.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>().serialize(s)
}

fn verdict_code(v: &StabilityVerdict) -> u8 {
    if !v.stable {
        exit::UNSTABLE
    } else if v.marginal {
        exit::MARGINAL
    } else {
        exit::OK
    }
}

fn verdict_word(v: &StabilityVerdict) -> &'static str {
    if !v.stable {
        "unstable"
    } else if v.marginal {
        "marginal"
    } else {
        "stable"
    }
}

fn cmd_eig(sink: &Sink, format: Format, path: &Path, tol: Option<f64>) -> Result<u8, CliError> {
    require_file(path)?;
    let sys: DescriptorSystem = read_json(path)?;
    sys.validate()?;
    let sol = generalized_eig(&sys, GepOptions::default())?;
    let tol = tol.unwrap_or_else(|| default_tol(&sol));
    let verdict = stability_verdict(&sol, tol);
    let mut finite = sol.finite.clone();
    finite.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    match format {
        Format::Json => sink.json(&EigOutput { finite, infinite_count: sol.infinite_count, verdict: verdict.clone() })?,
        _ => {
            let mut t = Table::new(&["#", "re", "im", "kind"]);
            for (k, z) in finite.iter().enumerate() {
                let kind = if z.norm() <= tol { "zero" } else { "finite" };
                t.row(vec![(k + 1).to_string(), num(z.re), num(z.im), kind.into()]);
            }
            for k in 0..sol.infinite_count {
                t.row(vec![(finite.len() + k + 1).to_string(), "inf".into(), String::new(), "infinite".into()]);
            }
            let text = if format == Format::Csv {
                t.csv()
            } else {
                let dom: Vec<String> = verdict.dominant.iter().map(|z| complex(*z)).collect();
                format!(
                    "{}\nverdict: {}\nmargin: {}\nzero eigenvalues: {}\ninfinite eigenvalues: {}\ndominant: {}\n",
                    t.render(),
                    verdict_word(&verdict),
                    num(verdict.margin),
                    verdict.zero_eigs,
                    sol.infinite_count,
                    dom.join(", ")
                )
            };
            sink.write(text.as_bytes())?;
        }
    }
    Ok(verdict_code(&verdict))
}

/// Eigenvalues from a JSON file: a list of `[re, im]` pairs or numbers, or an
/// object with a `finite` or `eigenvalues` list.
fn load_eigs(path: &Path) -> Result<Vec<Complex64>, CliError> {
    require_file(path)?;
    let v: Value = read_json(path)?;
    let list = match &v {
        Value::Array(_) => &v,
        Value::Object(o) => o
            .get("finite")
            .or_else(|| o.get("eigenvalues"))
            .ok_or_else(|| CliError::Usage(format!("{}: no `finite` or `eigenvalues` list", path.display())))?,
        _ => return Err(CliError::Usage(format!("{}: expected a list of eigenvalues", path.display()))),
    };
    let items = list.as_array().ok_or_else(|| CliError::Usage(format!("{}: eigenvalues must be a list", path.display())))?;
    items
        .iter()
        .map(|x| match x {
            Value::Number(n) => n.as_f64().map(|re| Complex64::new(re, 0.0)),
            Value::Array(a) if a.len() == 2 => a[0].as_f64().zip(a[1].as_f64()).map(|(re, im)| Complex64::new(re, im)),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CliError::Usage(format!("{}: entries must be numbers or [re, im] pairs", path.display())))
}

fn cmd_compare(sink: &Sink, format: Format, a: &Path, b: &Path, tol: f64) -> Result<u8, CliError> {
    require_file(a)?;
    require_file(b)?;
    let rep = eig_compare(&load_eigs(a)?, &load_eigs(b)?, tol);
    match format {
        Format::Json => sink.json(&rep)?,
        _ => {
            let mut t = Table::new(&["a", "b", "distance", "relative", "ok"]);
            for p in &rep.pairs {
                t.row(vec![
                    complex(p.a),
                    complex(p.b),
                    format!("{:.3e}", p.distance),
                    format!("{:.3e}", p.relative),
                    if p.within_tol { "yes" } else { "no" }.into(),
                ]);
            }
            let text = if format == Format::Csv {
                t.csv()
            } else {
                format!(
                    "{}\npairs: {}\nunmatched: {} / {}\nmax distance: {:.3e}\nmax relative: {:.3e}\nall within {:.1e}: {}\n",
                    t.render(),
                    rep.pairs.len(),
                    rep.unmatched_a.len(),
                    rep.unmatched_b.len(),
                    rep.max_distance,
                    rep.max_relative,
                    tol,
                    rep.all_within() && rep.unmatched_a.is_empty() && rep.unmatched_b.is_empty()
                )
            };
            sink.write(text.as_bytes())?;
        }
    }
    Ok(exit::OK)
}

/// Benchmark parameters from a file, with `r_load` solved unless the file sets it.
fn bench_params(path: Option<&Path>) -> Result<BenchParams, CliError> {
    let (params, has_load) = match path {
        Some(p) => {
            require_file(p)?;
            let v: Value = read_json(p)?;
            let has = v.get("r_load").is_some();
            (serde_json::from_value::<BenchParams>(v).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?, has)
        }
        None => (BenchParams::default(), false),
    };
    params.validate()?;
    if has_load {
        return Ok(params);
    }
    let (case, _) = solve_load(&params)?;
    Ok(case.params)
}

#[derive(Serialize)]
struct BenchOutput {
    assembly: Assembly,
    counts: Counts,
    r_load: f64,
    report: ScenarioReport,
}

fn cmd_bench(
    sink: &Sink,
    format: Format,
    scenario: &str,
    scenario_file: Option<&Path>,
    params: Option<&Path>,
    assembly: AssemblyArg,
    out_dir: Option<&Path>,
) -> Result<u8, CliError> {
    if let Some(p) = scenario_file {
        require_file(p)?;
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let assembly = match assembly {
        AssemblyArg::Full => Assembly::Full,
        AssemblyArg::GfmOnly => Assembly::GfmOnly,
        AssemblyArg::GflOnly => Assembly::GflOnly,
    };
    let params = bench_params(params)?;
    let scenario: Scenario = match scenario_file {
        Some(p) => read_json(p)?,
        None => Scenario::by_name(scenario, &params.references)?,
    };
    scenario.validate()?;
    let case = assemble(&params, assembly)?;
    let result = run_scenario(&case, &scenario, &SolverConfig::default())?;
    if let Some(d) = out_dir {
        let write = |name: &str, s: &mlstab::bench3bus::Series| -> Result<(), CliError> {
            let mut buf = Vec::new();
            s.write_csv_long(&mut buf)?;
            fs::write(d.join(name), buf)?;
            Ok(())
        };
        write("imti.csv", &result.imti_series()?)?;
        write("ldss.csv", &result.ldss_series()?)?;
        if let Some(n) = &result.nti {
            write("nti.csv", n)?;
        }
        fs::write(d.join("report.json"), serde_json::to_string_pretty(&result.report)? + "\n")?;
    }
    let out = BenchOutput { assembly, counts: case.counts(), r_load: params.r_load, report: result.report };
    match format {
        Format::Json => sink.json(&out)?,
        _ => {
            let r = &out.report;
            let mut t = Table::new(&["quantity", "value"]);
            let mut add = |k: &str, v: String| t.row(vec![k.to_string(), v]);
            add("scenario", r.scenario.clone());
            add("states n", out.counts.n.to_string());
            add("inputs m", out.counts.m.to_string());
            add("outputs+algebraics", out.counts.p_plus_q.to_string());
            add("factors R", out.counts.r.to_string());
            add("equations", out.counts.n_phi.to_string());
            add("r_load [ohm]", format!("{:.4}", out.r_load));
            add("rank E", r.rank_e.to_string());
            add("verdict", verdict_word(&r.verdict).into());
            add("dominant", r.verdict.dominant.iter().map(|z| complex(*z)).collect::<Vec<_>>().join(", "));
            if let Some(d) = &r.imti_vs_nti {
                add("max rel |iMTI - NTI|", format!("{:.3e}", d.max_relative));
            }
            add("max rel |LDSS - iMTI|", format!("{:.3e}", r.ldss_vs_imti.max_relative));
            add("LDSS terminal offset", format!("{:.3e}", r.ldss_offset.max_relative));
            if let Some(c) = &r.spectrum {
                add("eigenvalue pairs", c.pairs.len().to_string());
                add("max rel pair distance", format!("{:.3e}", c.max_relative));
                add("unmatched", format!("{} / {}", c.unmatched_a.len(), c.unmatched_b.len()));
            }
            add("steps", r.solver.steps.to_string());
            add("max lift drift", format!("{:.3e}", r.max_drift));
            sink.write(if format == Format::Csv { t.csv() } else { t.render() }.as_bytes())?;
        }
    }
    Ok(exit::OK)
}

fn cmd_sweep(
    sink: &Sink,
    format: Format,
    (from, to, points): (f64, f64, usize),
    target: TargetArg,
    params: Option<&Path>,
) -> Result<u8, CliError> {
    if points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let target = match target {
        TargetArg::Both => SweepTarget::Both,
        TargetArg::Gfm => SweepTarget::Gfm,
        TargetArg::Gfl => SweepTarget::Gfl,
    };
    let params = bench_params(params)?;
    let case = assemble(&params, Assembly::Full)?;
    let res: SweepResult = bifurcation_sweep(&case, &params.references, &linear_grid(from, to, points), target)?;
    match format {
        Format::Json => sink.json(&res)?,
        _ => {
            let mut t = Table::new(&["p_ref", "abscissa", "dominant_re", "dominant_im", "verdict"]);
            for p in &res.points {
                let d = p.verdict.dominant.iter().copied().find(|z| z.im >= 0.0).unwrap_or_default();
                t.row(vec![
                    format!("{:.4}", p.p_ref),
                    num(p.abscissa()),
                    num(d.re),
                    num(d.im),
                    verdict_word(&p.verdict).into(),
                ]);
            }
            let mut text = if format == Format::Csv { t.csv() } else { t.render() };
            if format == Format::Table {
                match &res.crossing {
                    Some(c) => text.push_str(&format!(
                        "\ncrossing: p_ref = {:.5} (bracket {:.4} .. {:.4}), frequency {:.2} rad/s\n",
                        c.p_ref, c.bracket.0, c.bracket.1, c.frequency
                    )),
                    None => text.push_str("\ncrossing: none in range\n"),
                }
                if let (Some(p), Some(msg)) = (res.failed_at, &res.failure) {
                    text.push_str(&format!("stopped at p_ref = {p:.4}: {msg}\n"));
                }
            }
            sink.write(text.as_bytes())?;
        }
    }
    Ok(exit::OK)
}
