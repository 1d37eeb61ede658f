use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;

use mlstab::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

/// Exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const UNSTABLE: u8 = 2;
    pub const MARGINAL: u8 = 3;
    pub const NUMERICAL: u8 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(Error::Json(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Lib(e) => match e {
                Error::Dimension { .. }
                | Error::InvalidModel(_)
                | Error::UnknownSignal(_)
                | Error::DuplicateLink(_)
                | Error::TensorTooLarge { .. }
                | Error::NotMultilinear(_)
                | Error::InvalidParameter { .. }
                | Error::NotSquare { .. }
                | Error::Io(_)
                | Error::Json(_) => exit::USAGE,
                _ => exit::NUMERICAL,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Lib(e) => match e {
                Error::Dimension { .. } => "dimension",
                Error::InvalidModel(_) => "invalid_model",
                Error::UnknownSignal(_) => "unknown_signal",
                Error::DuplicateLink(_) => "duplicate_link",
                Error::TensorTooLarge { .. } => "tensor_too_large",
                Error::NonFinite(_) => "non_finite",
                Error::NotEquilibrium { .. } => "not_equilibrium",
                Error::NotMultilinear(_) => "not_multilinear",
                Error::InvalidParameter { .. } => "invalid_parameter",
                Error::SingularPencil(_) => "singular_pencil",
                Error::AlgebraicRankDefect { .. } => "algebraic_rank_defect",
                Error::Eigen(_) => "eigen",
                Error::NewtonDivergence { .. } => "newton_divergence",
                Error::SingularIteration(_) => "singular_iteration",
                Error::StepUnderflow { .. } => "step_underflow",
                Error::NotSquare { .. } => "not_square",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

pub fn report_error(e: &CliError, format: Format) {
    if format == Format::Json {
        let obj = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
        eprintln!("{obj}");
    } else {
        eprintln!("error: {e}");
    }
}

/// Destination of the main output.
pub struct Sink {
    path: Option<PathBuf>,
}

impl Sink {
    /// Checks that the output directory exists before any work is done.
    pub fn new(path: Option<&Path>) -> Result<Self, CliError> {
        if let Some(p) = path {
            let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !parent.is_dir() {
                return Err(CliError::Usage(format!("output directory `{}` does not exist", parent.display())));
            }
        }
        Ok(Self { path: path.map(Path::to_path_buf) })
    }

    pub fn write(&self, bytes: &[u8]) -> Result<(), CliError> {
        match &self.path {
            Some(p) => fs::write(p, bytes)?,
            None => {
                let mut out = std::io::stdout().lock();
                match out.write_all(bytes).and_then(|_| out.flush()) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&self, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(s.as_bytes())
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file `{}` not found", path.display())))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Plain text table; the first column is left-aligned, the rest right-aligned.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = (0..cols)
                .map(|i| {
                    let c = cells.get(i).map_or("", |s| s);
                    if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) }
                })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.header);
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = self.header.join(",") + "\n";
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Fixed six decimals; values that round to zero print without a sign.
pub fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub fn complex(z: num_complex::Complex64) -> String {
    if num(z.im) == num(0.0) {
        num(z.re)
    } else if z.im > 0.0 {
        format!("{} + {}i", num(z.re), num(z.im))
    } else {
        format!("{} - {}i", num(z.re), num(-z.im))
    }
}
