//! Sweep driver for the feedback-capacity bounds.
//!
//! `fbbounds` sweeps the feedback-noise variance for each MA(1) parameter,
//! solves the requested bound programs at every grid point and writes one CSV
//! row per `(alpha, sigma)` pair. `fbbounds summarize <csv>` condenses such a
//! file into per-alpha feedback gains.

use std::ffi::OsString;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use fbbounds::simulate::mc_rate;
use fbbounds::{compute_bound, open_loop_capacity, BoundKind, ChannelSpec, Error, SolveOptions};

pub const HEADER: [&str; 15] = [
    "n",
    "power",
    "alpha",
    "sigma",
    "upper_bits",
    "lower_bits",
    "openloop_bits",
    "idealfb_bits",
    "status_upper",
    "status_lower",
    "gap_upper",
    "gap_lower",
    "wall_ms_upper",
    "wall_ms_lower",
    "mc_rate",
];

/// Gain over open loop below which feedback counts as shut off.
pub const SHUTOFF_GAIN: f64 = 0.01;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_OPTIMAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("schema error: {0}")]
    Schema(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => EXIT_IO,
            CliError::Schema(_) => EXIT_SCHEMA,
        }
    }

    fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaGrid {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    pub spacing: Spacing,
}

impl SigmaGrid {
    /// Grid values in ascending order. A single point is just `start`.
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                if i == 0 {
                    return self.start;
                }
                if i + 1 == self.points {
                    return self.stop;
                }
                let f = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.start + f * (self.stop - self.start),
                    Spacing::Log => (self.start.ln() + f * (self.stop.ln() - self.start.ln())).exp(),
                }
            })
            .collect()
    }
}

impl fmt::Display for SigmaGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sp = if self.spacing == Spacing::Log { "log" } else { "lin" };
        write!(f, "{}:{}:{}:{sp}", self.start, self.stop, self.points)
    }
}

fn parse_sigma_grid(s: &str) -> Result<SigmaGrid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        return Err(format!("expected start:stop:points:lin|log, got `{s}`"));
    }
    let num = |p: &str, what: &str| p.trim().parse::<f64>().map_err(|_| format!("{what} `{p}` is not a number"));
    let start = num(parts[0], "start")?;
    let stop = num(parts[1], "stop")?;
    let points: usize = parts[2].trim().parse().map_err(|_| format!("points `{}` is not a count", parts[2]))?;
    let spacing = match parts[3].trim() {
        "lin" | "linear" => Spacing::Linear,
        "log" => Spacing::Log,
        other => return Err(format!("spacing must be lin or log, got `{other}`")),
    };
    if !(start > 0.0) || !start.is_finite() {
        return Err(format!("sigma start must be > 0, got {start}"));
    }
    if !stop.is_finite() || stop < start {
        return Err(format!("sigma stop must be >= start, got {stop}"));
    }
    if points == 0 {
        return Err("sigma grid needs at least one point".into());
    }
    Ok(SigmaGrid { start, stop, points, spacing })
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(a.abs() < 1.0) {
        return Err(format!("MA(1) parameter must satisfy |alpha| < 1, got {a}"));
    }
    Ok(a)
}

fn parse_bound(s: &str) -> Result<BoundKind, String> {
    match s.trim() {
        "upper" => Ok(BoundKind::Upper),
        "lower" => Ok(BoundKind::Lower),
        "openloop" => Ok(BoundKind::OpenLoop),
        "idealfb" => Ok(BoundKind::IdealFeedback),
        other => Err(format!("unknown bound `{other}` (expected upper, lower, openloop, idealfb)")),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(format!("must be a positive number, got {v}"));
    }
    Ok(v)
}

fn parse_positive_count(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("must be a positive integer, got `{s}`")),
    }
}

#[derive(Parser, Debug)]
#[command(name = "fbbounds", version, about = "Bounds on the n-block feedback capacity of MA(1) Gaussian channels with noisy feedback")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-alpha feedback gain and shut-off point of a sweep CSV.
    Summarize {
        /// CSV produced by a sweep run.
        csv: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Block length.
    #[arg(long, default_value = "30", value_parser = parse_positive_count)]
    n: usize,
    /// Per-use power budget P.
    #[arg(long, default_value = "10", value_parser = parse_positive)]
    power: f64,
    /// Comma-separated MA(1) parameters.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9", value_parser = parse_alpha)]
    alpha: Vec<f64>,
    /// Feedback-noise variance grid, start:stop:points:lin|log.
    #[arg(long, default_value = "0.01:10:20:log", value_parser = parse_sigma_grid)]
    sigma: SigmaGrid,
    /// Comma-separated subset of upper, lower, openloop, idealfb.
    #[arg(long, value_delimiter = ',', default_value = "upper,lower,openloop,idealfb", value_parser = parse_bound)]
    bounds: Vec<BoundKind>,
    #[arg(long, default_value = "1e-6", value_parser = parse_positive)]
    tol_gap: f64,
    #[arg(long, default_value = "1e-8", value_parser = parse_positive)]
    tol_feas: f64,
    #[arg(long, default_value = "500", value_parser = parse_positive_count)]
    max_iter: usize,
    /// Monte Carlo samples for checking the lower-bound scheme (off by default).
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value = "0")]
    seed: u64,
    /// Output CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the wall-clock columns empty so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub n: usize,
    pub power: f64,
    pub alpha: Vec<f64>,
    pub sigma_grid: SigmaGrid,
    pub bounds: Vec<BoundKind>,
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub mc_samples: Option<usize>,
    pub seed: u64,
    pub out_path: Option<PathBuf>,
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        match parse_args(["fbbounds"]) {
            Ok(Invocation::Sweep(c)) => c,
            _ => unreachable!("defaults always parse"),
        }
    }
}

impl SweepConfig {
    pub fn wants(&self, kind: BoundKind) -> bool {
        self.bounds.contains(&kind)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { tol_gap: self.tol_gap, tol_feas: self.tol_feas, max_iter: self.max_iter }
    }
}

#[derive(Debug)]
pub enum Invocation {
    Sweep(SweepConfig),
    Summarize(PathBuf),
}

/// Parses the full argument vector, program name included. Usage errors come
/// back as clap errors whose `exit()` uses code 2 (and 0 for `--help`).
pub fn parse_args<I, T>(argv: I) -> Result<Invocation, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    if let Some(Command::Summarize { csv }) = cli.command {
        return Ok(Invocation::Summarize(csv));
    }
    let a = cli.sweep;
    if let Some(m) = a.mc_samples {
        if m < 10 * a.n {
            return Err(Cli::command().error(
                ErrorKind::ValueValidation,
                format!("--mc-samples must be at least 10 * n = {}, got {m}", 10 * a.n),
            ));
        }
    }
    let mut alpha = a.alpha;
    alpha.sort_by(f64::total_cmp);
    alpha.dedup();
    let mut bounds = Vec::new();
    for b in a.bounds {
        if !bounds.contains(&b) {
            bounds.push(b);
        }
    }
    Ok(Invocation::Sweep(SweepConfig {
        n: a.n,
        power: a.power,
        alpha,
        sigma_grid: a.sigma,
        bounds,
        tol_gap: a.tol_gap,
        tol_feas: a.tol_feas,
        max_iter: a.max_iter,
        mc_samples: a.mc_samples,
        seed: a.seed,
        out_path: a.out,
        timing: !a.no_timing,
    }))
}

/// One `(alpha, sigma)` grid point. `None` marks a bound that was not
/// requested; a requested bound that failed carries `NaN` and its status.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub power: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub upper_bits: Option<f64>,
    pub lower_bits: Option<f64>,
    pub openloop_bits: Option<f64>,
    pub idealfb_bits: Option<f64>,
    pub status_upper: Option<String>,
    pub status_lower: Option<String>,
    pub gap_upper: Option<f64>,
    pub gap_lower: Option<f64>,
    pub wall_ms_upper: Option<f64>,
    pub wall_ms_lower: Option<f64>,
    pub mc_rate_lower_scheme: Option<f64>,
}

impl SweepRow {
    fn record(&self) -> Vec<String> {
        let num = |v: Option<f64>| v.map(format_number).unwrap_or_default();
        vec![
            self.n.to_string(),
            format_number(self.power),
            format_number(self.alpha),
            format_number(self.sigma),
            num(self.upper_bits),
            num(self.lower_bits),
            num(self.openloop_bits),
            num(self.idealfb_bits),
            self.status_upper.clone().unwrap_or_default(),
            self.status_lower.clone().unwrap_or_default(),
            num(self.gap_upper),
            num(self.gap_lower),
            num(self.wall_ms_upper),
            num(self.wall_ms_lower),
            num(self.mc_rate_lower_scheme),
        ]
    }
}

/// Nine significant digits, then the shortest decimal that round-trips the
/// rounded value. Magnitudes outside `[1e-4, 1e15)` use exponent notation.
/// `NaN` stays `NaN`.
pub fn format_number(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    let mag = rounded.abs();
    if mag != 0.0 && !(1e-4..1e15).contains(&mag) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

struct Solved {
    rate: f64,
    status: String,
    gap: f64,
    wall_ms: f64,
    scheme: Option<fbbounds::CodingScheme>,
}

fn status_of(e: &Error) -> String {
    match e {
        Error::SolverStopped { status, .. } => status.clone(),
        Error::CrossCheckFailure { .. } => "CrossCheckFailure".into(),
        Error::RecoveryFailure(_) => "RecoveryFailure".into(),
        _ => "Error".into(),
    }
}

fn solve_bound(kind: BoundKind, chan: &ChannelSpec, opts: &SolveOptions) -> Solved {
    let started = Instant::now();
    let res = compute_bound(kind, chan, opts);
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    match res {
        Ok(r) => Solved {
            rate: r.rate,
            status: "Optimal".into(),
            gap: r.report.as_ref().map_or(0.0, |rep| rep.gap),
            wall_ms,
            scheme: Some(r.scheme),
        },
        Err(e) => {
            eprintln!("warning: {kind} bound failed: {e}");
            Solved { rate: f64::NAN, status: status_of(&e), gap: f64::NAN, wall_ms, scheme: None }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Every requested solve finished with status Optimal.
    pub all_optimal: bool,
}

impl SweepOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.all_optimal {
            EXIT_OK
        } else {
            EXIT_NOT_OPTIMAL
        }
    }
}

/// Runs every grid point. Per-point failures land in the status columns; only
/// invalid channel parameters abort the sweep.
pub fn run_sweep(cfg: &SweepConfig) -> fbbounds::Result<SweepOutcome> {
    let opts = cfg.solve_options();
    let sigmas = cfg.sigma_grid.values();
    let mut rows = Vec::with_capacity(cfg.alpha.len() * sigmas.len());
    let mut all_optimal = true;
    for &alpha in &cfg.alpha {
        // Neither baseline depends on the feedback noise.
        let base = ChannelSpec::ma1_white(cfg.n, cfg.power, alpha, cfg.sigma_grid.start)?;
        let openloop = cfg.wants(BoundKind::OpenLoop).then(|| match open_loop_capacity(&base) {
            Ok(r) => r.rate,
            Err(e) => {
                eprintln!("warning: open-loop capacity failed: {e}");
                all_optimal = false;
                f64::NAN
            }
        });
        let idealfb = cfg.wants(BoundKind::IdealFeedback).then(|| {
            let s = solve_bound(BoundKind::IdealFeedback, &base, &opts);
            all_optimal &= s.status == "Optimal";
            s.rate
        });
        for &sigma in &sigmas {
            let chan = ChannelSpec::ma1_white(cfg.n, cfg.power, alpha, sigma)?;
            let mut solve = |kind: BoundKind| {
                cfg.wants(kind).then(|| {
                    let s = solve_bound(kind, &chan, &opts);
                    all_optimal &= s.status == "Optimal";
                    s
                })
            };
            let upper = solve(BoundKind::Upper);
            let lower = solve(BoundKind::Lower);
            let mc = cfg.mc_samples.and_then(|samples| {
                let scheme = lower.as_ref()?.scheme.as_ref();
                let seed = cfg.seed.wrapping_add(rows.len() as u64);
                Some(match scheme.map(|s| mc_rate(s, &chan, samples, seed)) {
                    Some(Ok(est)) => est.rate_estimate,
                    Some(Err(e)) => {
                        eprintln!("warning: Monte Carlo estimate failed: {e}");
                        f64::NAN
                    }
                    None => f64::NAN,
                })
            });
            let timing = |s: &Solved| cfg.timing.then_some(s.wall_ms);
            let row = SweepRow {
                n: cfg.n,
                power: cfg.power,
                alpha,
                sigma,
                upper_bits: upper.as_ref().map(|s| s.rate),
                lower_bits: lower.as_ref().map(|s| s.rate),
                openloop_bits: openloop,
                idealfb_bits: idealfb,
                status_upper: upper.as_ref().map(|s| s.status.clone()),
                status_lower: lower.as_ref().map(|s| s.status.clone()),
                gap_upper: upper.as_ref().map(|s| s.gap),
                gap_lower: lower.as_ref().map(|s| s.gap),
                wall_ms_upper: upper.as_ref().and_then(timing),
                wall_ms_lower: lower.as_ref().and_then(timing),
                mc_rate_lower_scheme: mc,
            };
            eprintln!(
                "alpha={} sigma={} upper={} lower={}",
                format_number(alpha),
                format_number(sigma),
                row.upper_bits.map(format_number).unwrap_or_default(),
                row.lower_bits.map(format_number).unwrap_or_default(),
            );
            rows.push(row);
        }
    }
    Ok(SweepOutcome { rows, all_optimal })
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()
}

pub fn csv_string(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is ASCII")
}

/// Per-alpha digest of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub rows: usize,
    /// Largest `upper - openloop` over the block; NaN when never available.
    pub max_gain: f64,
    /// Smallest sigma at which the gain drops below [`SHUTOFF_GAIN`].
    pub shutoff_sigma: Option<f64>,
}

struct ParsedRow {
    alpha: f64,
    sigma: f64,
    upper: f64,
    openloop: f64,
}

fn parse_field(rec: &csv::StringRecord, idx: usize, line: usize, optional: bool) -> Result<f64, CliError> {
    let raw = rec.get(idx).unwrap_or("").trim();
    if raw.is_empty() && optional {
        return Ok(f64::NAN);
    }
    raw.parse::<f64>()
        .map_err(|_| CliError::Schema(format!("line {line}: column {} has non-numeric value `{raw}`", HEADER[idx])))
}

/// Reads a sweep CSV and summarizes each alpha block in file order.
pub fn summarize_csv(text: &str) -> Result<Vec<AlphaSummary>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(CliError::Schema(e.to_string())),
        None => return Err(CliError::Schema("empty file".into())),
    };
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(CliError::Schema(format!("header must be `{}`", HEADER.join(","))));
    }
    let mut parsed = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Schema(e.to_string()))?;
        if rec.len() != HEADER.len() {
            return Err(CliError::Schema(format!("line {line}: expected {} fields, found {}", HEADER.len(), rec.len())));
        }
        parsed.push(ParsedRow {
            alpha: parse_field(&rec, 2, line, false)?,
            sigma: parse_field(&rec, 3, line, false)?,
            upper: parse_field(&rec, 4, line, true)?,
            openloop: parse_field(&rec, 6, line, true)?,
        });
    }
    let mut out: Vec<(f64, Vec<&ParsedRow>)> = Vec::new();
    for r in &parsed {
        match out.iter_mut().find(|(a, _)| *a == r.alpha) {
            Some((_, block)) => block.push(r),
            None => out.push((r.alpha, vec![r])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(alpha, mut block)| {
            block.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
            let gains: Vec<(f64, f64)> = block.iter().map(|r| (r.sigma, r.upper - r.openloop)).collect();
            let max_gain = gains.iter().map(|g| g.1).filter(|g| !g.is_nan()).fold(f64::NAN, f64::max);
            let shutoff_sigma = gains.iter().find(|g| g.1 < SHUTOFF_GAIN).map(|g| g.0);
            AlphaSummary { alpha, rows: block.len(), max_gain, shutoff_sigma }
        })
        .collect())
}

pub fn render_summary(summaries: &[AlphaSummary]) -> String {
    let mut s = format!("{:<12} {:>6} {:>16} {:>16}\n", "alpha", "rows", "max_gain_bits", "shutoff_sigma");
    for a in summaries {
        let shut = a.shutoff_sigma.map(format_number).unwrap_or_else(|| "none".into());
        s += &format!("{:<12} {:>6} {:>16} {:>16}\n", format_number(a.alpha), a.rows, format_number(a.max_gain), shut);
    }
    s
}

pub fn summarize(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(render_summary(&summarize_csv(&text)?))
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match parse_args(argv) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match inv {
        Invocation::Summarize(path) => match summarize(&path) {
            Ok(table) => {
                print!("{table}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Invocation::Sweep(cfg) => {
            let outcome = match run_sweep(&cfg) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            };
            let written = match &cfg.out_path {
                Some(p) => std::fs::File::create(p)
                    .and_then(|f| write_csv(&outcome.rows, io::BufWriter::new(f)))
                    .map_err(|e| CliError::io(p, e)),
                None => write_csv(&outcome.rows, io::stdout().lock()).map_err(|e| CliError::io("<stdout>", e)),
            };
            if let Err(e) = written {
                eprintln!("error: {e}");
                return e.exit_code();
            }
            outcome.exit_code()
        }
    }
}
