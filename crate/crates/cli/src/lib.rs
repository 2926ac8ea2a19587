//! Command implementations and file formats for the `gsxover` binary.
//!
//! Designs are stored as TOML with a `[design]` table and a `[provenance]`
//! table; curves and matrix dumps are CSV with `#` comment headers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gsxover_core::covariance::{no_drop_covariance, sigma_r, sigma_r_inverse, stage_information, VarianceComponents};
use gsxover_core::designer::{self, SolverOptions};
use gsxover_core::evaluator::{default_theta_grid, theta_grid, CurvePoint, Evaluator};
use gsxover_core::sequences::{generate_sequence_set, lcm_group_size};
use gsxover_core::simulator::{self, AnalysisProcedure, TrueParameters};
use gsxover_core::{
    Error, MvnOptions, OperatingCharacteristics, PowerFamilySpec, RoundingRule, SequenceFamily, SimulationReport,
    TrialDesign,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod exit {
    pub const OK: u8 = 0;
    pub const VALIDATION: u8 = 2;
    pub const NUMERICAL: u8 = 3;
    pub const IO: u8 = 4;
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: exit::VALIDATION, message: message.into() }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self { code: exit::IO, message: format!("{}: {err}", path.display()) }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { exit::NUMERICAL } else { exit::VALIDATION };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gsxover", version, about = "Group sequential multi-arm crossover trial designs")]
pub struct Cli {
    /// Worker threads (defaults to the machine's parallelism).
    #[arg(long, global = true, env = "GSXOVER_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve power-family boundaries and the group size.
    Design(DesignArgs),
    /// Operating characteristics of a stored design.
    Evaluate(EvaluateArgs),
    /// Patient-level simulation of a stored design.
    Simulate(SimulateArgs),
    /// Numeric covariance matrices for a given number of treatments.
    Matrices(MatricesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Latin,
    Williams,
}

impl From<FamilyArg> for SequenceFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Latin => SequenceFamily::Latin,
            FamilyArg::Williams => SequenceFamily::Williams,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoundingArg {
    /// Keep the boundaries solved at the exact group size.
    Keep,
    /// Re-solve the boundaries at the rounded group size.
    Resolve,
}

impl From<RoundingArg> for RoundingRule {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::Keep => RoundingRule::KeepBoundaries,
            RoundingArg::Resolve => RoundingRule::Resolve,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DesignArgs {
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    /// Clinically relevant difference (response units).
    #[arg(long, default_value_t = 1.11)]
    pub delta: f64,
    /// Within-patient variance.
    #[arg(long = "sigma-e2", default_value_t = 6.51)]
    pub sigma_e2: f64,
    #[arg(long, default_value_t = 3)]
    pub stages: usize,
    /// Boundary shape parameter.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub shape: f64,
    #[arg(long, default_value_t = 4)]
    pub treatments: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Williams)]
    pub family: FamilyArg,
    #[arg(long, value_enum, default_value_t = RoundingArg::Keep)]
    pub rounding: RoundingArg,
    /// Hold single-stage designs to the sequence-set divisibility rule too.
    #[arg(long)]
    pub divisible: bool,
    /// Integrator tolerance per path.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 20170101)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub design: PathBuf,
    /// Curve start (defaults to -delta/2).
    #[arg(long, allow_negative_numbers = true)]
    pub theta_min: Option<f64>,
    /// Curve end (defaults to 3 delta/2).
    #[arg(long, allow_negative_numbers = true)]
    pub theta_max: Option<f64>,
    #[arg(long, default_value_t = 21)]
    pub points: usize,
    /// Effect vector for the summary record (defaults to all zero).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub tau: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 20170101)]
    pub seed: u64,
    /// Curve CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary TOML.
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long, default_value_t = 10000)]
    pub replicates: usize,
    /// 1: ML, 2: ML with quantile substitution, 3: REML, 4: REML with
    /// quantile substitution.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub procedure: u8,
    /// Fix the variance components at their true values instead of fitting.
    #[arg(long, conflicts_with = "procedure")]
    pub known_variance: bool,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mu0: f64,
    /// Period effects pi_2..pi_D (defaults to zero).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub periods: Option<Vec<f64>>,
    /// Treatment effects tau_1..tau_{D-1} (defaults to zero).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub tau: Option<Vec<f64>>,
    /// Between-patient variance (defaults to the design file's value).
    #[arg(long = "sigma-b2")]
    pub sigma_b2: Option<f64>,
    #[arg(long, default_value_t = 20170101)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MatricesArgs {
    #[arg(long, default_value_t = 4)]
    pub treatments: usize,
    #[arg(long = "sigma-b2", default_value_t = 1.0)]
    pub sigma_b2: f64,
    #[arg(long = "sigma-e2", default_value_t = 1.0)]
    pub sigma_e2: f64,
    /// Patients per stage (defaults to the sequence-set LCM).
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Stages behind the no-drop covariance.
    #[arg(long, default_value_t = 1)]
    pub stages: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Williams)]
    pub family: FamilyArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Stored design plus how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub design: TrialDesign,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub shape: f64,
    pub rounding: RoundingRule,
    pub exact_n: f64,
    pub efficacy_constant: f64,
    pub futility_constant: f64,
    pub achieved_alpha: f64,
    pub achieved_beta: f64,
    pub solver_tol: f64,
    pub seed: u64,
}

impl DesignFile {
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::validation(format!("cannot serialise design: {e}")))
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let file: DesignFile =
            toml::from_str(text).map_err(|e| CliError::validation(format!("bad design file: {e}")))?;
        file.design.validate()?;
        Ok(file)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
            .map_err(|e| CliError { code: e.code, message: format!("{}: {}", path.display(), e.message) })
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn check_positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::validation(format!("--{name} must be positive, got {v}")))
    }
}

fn check_probability(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::validation(format!("--{name} must lie in (0, 1), got {v}")))
    }
}

/// Solves the design and writes the design file. Returns the summary text.
pub fn cmd_design(args: &DesignArgs) -> CliResult<String> {
    check_probability("alpha", args.alpha)?;
    check_probability("beta", args.beta)?;
    check_positive("delta", args.delta)?;
    check_positive("sigma-e2", args.sigma_e2)?;
    check_positive("tol", args.tol)?;
    if args.stages < 1 {
        return Err(CliError::validation("--stages must be at least 1"));
    }
    if args.treatments < 2 {
        return Err(CliError::validation(format!("--treatments must be at least 2, got {}", args.treatments)));
    }
    if !args.shape.is_finite() {
        return Err(CliError::validation("--shape must be finite"));
    }
    let spec = PowerFamilySpec {
        alpha: args.alpha,
        beta: args.beta,
        delta: args.delta,
        sigma_e_sq: args.sigma_e2,
        stages: args.stages,
        shape: args.shape,
        treatments: args.treatments,
        family: args.family.into(),
    };
    let opts = SolverOptions { mvn: MvnOptions::with_tol(args.tol), seed: args.seed, ..Default::default() };
    let sol = if args.stages == 1 {
        designer::single_stage_design(&spec, args.divisible, &opts)?
    } else {
        designer::solve_boundaries(&spec, args.rounding.into(), &opts)?
    };
    let file = DesignFile {
        design: sol.design.clone(),
        provenance: Provenance {
            tool_version: VERSION.to_string(),
            shape: args.shape,
            rounding: args.rounding.into(),
            exact_n: sol.exact_n,
            efficacy_constant: sol.ce,
            futility_constant: sol.cf,
            achieved_alpha: sol.achieved_alpha,
            achieved_beta: sol.achieved_beta,
            solver_tol: args.tol,
            seed: args.seed,
        },
    };
    write_file(&args.out, &file.to_toml()?)?;

    let ev = Evaluator::new(&sol.design, opts.mvn, args.seed)?;
    let k = sol.design.experimental();
    let null = ev.characteristics(&vec![0.0; k])?;
    let alt = ev.characteristics(&vec![args.delta; k])?;
    let mut s = String::new();
    let _ = writeln!(s, "exact n            {:.3}", sol.exact_n);
    let _ = writeln!(s, "n                  {}", sol.design.group_size);
    let _ = writeln!(s, "futility           {}", join(&sol.design.futility, 3));
    let _ = writeln!(s, "efficacy           {}", join(&sol.design.efficacy, 3));
    s.push_str(&summary_rows(&null, &alt));
    Ok(s)
}

fn join(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(", ")
}

fn summary_rows(null: &OperatingCharacteristics, alt: &OperatingCharacteristics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "pr(reject H01 | 0)     {:.4}", null.reject_h01);
    let _ = writeln!(s, "pr(reject H01 | delta) {:.4}", alt.reject_h01);
    let _ = writeln!(s, "pr(reject any | 0)     {:.4}", null.power_any);
    let _ = writeln!(s, "pr(reject any | delta) {:.4}", alt.power_any);
    let _ = writeln!(s, "E(N | 0)               {:.1}", null.expected_n);
    let _ = writeln!(s, "E(N | delta)           {:.1}", alt.expected_n);
    let _ = writeln!(s, "E(O | 0)               {:.1}", null.expected_o);
    let _ = writeln!(s, "E(O | delta)           {:.1}", alt.expected_o);
    let _ = writeln!(s, "max N                  {}", null.max_n);
    let _ = writeln!(s, "max O                  {}", null.max_o);
    s
}

/// Characteristics summary written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub tool_version: String,
    pub tol: f64,
    pub seed: u64,
    pub characteristics: OperatingCharacteristics,
}

pub fn curve_csv(design: &TrialDesign, points: &[CurvePoint]) -> CliResult<String> {
    let mut head = String::new();
    let _ = writeln!(head, "# gsxover {VERSION} characteristics curve at tau = (theta, ..., theta)");
    let _ = writeln!(
        head,
        "# design: treatments={} stages={} n={} family={}",
        design.treatments, design.stages, design.group_size, design.family
    );
    let _ = writeln!(
        head,
        "# units: theta in response units; reject_* are probabilities; expected_n in patients; expected_o in observations"
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["theta", "reject_h01", "reject_any", "expected_n", "expected_o"])
        .map_err(|e| CliError::validation(e.to_string()))?;
    for p in points {
        w.write_record([
            p.theta.to_string(),
            p.reject_h01.to_string(),
            p.reject_any.to_string(),
            p.expected_n.to_string(),
            p.expected_o.to_string(),
        ])
        .map_err(|e| CliError::validation(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| CliError::validation(e.to_string()))?;
    Ok(head + &String::from_utf8(body).expect("csv output is utf-8"))
}

/// Parses a curve written by [`curve_csv`].
pub fn parse_curve(text: &str) -> CliResult<Vec<CurvePoint>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::validation(e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| CliError::validation(format!("{f}: {e}"))))
            .collect::<CliResult<_>>()?;
        if v.len() != 5 {
            return Err(CliError::validation(format!("curve row has {} columns", v.len())));
        }
        out.push(CurvePoint { theta: v[0], reject_h01: v[1], reject_any: v[2], expected_n: v[3], expected_o: v[4] });
    }
    Ok(out)
}

/// Evaluates a stored design. Returns the summary text.
pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<String> {
    check_positive("tol", args.tol)?;
    let file = DesignFile::read(&args.design)?;
    let design = &file.design;
    let k = design.experimental();
    let tau = args.tau.clone().unwrap_or_else(|| vec![0.0; k]);
    if tau.len() != k {
        return Err(CliError::validation(format!("--tau needs {k} values, got {}", tau.len())));
    }
    let ev = Evaluator::new(design, MvnOptions::with_tol(args.tol), args.seed)?;
    let c = ev.characteristics(&tau)?;

    if let Some(out) = &args.out {
        let default = default_theta_grid(design.delta);
        let lo = args.theta_min.unwrap_or(default[0]);
        let hi = args.theta_max.unwrap_or(*default.last().unwrap());
        let grid = theta_grid(lo, hi, args.points)?;
        let curve = ev.characteristics_curve(&grid)?;
        write_file(out, &curve_csv(design, &curve)?)?;
    }
    if let Some(out) = &args.summary_out {
        let summary = EvaluationSummary {
            tool_version: VERSION.to_string(),
            tol: args.tol,
            seed: args.seed,
            characteristics: c.clone(),
        };
        let text = toml::to_string(&summary).map_err(|e| CliError::validation(e.to_string()))?;
        write_file(out, &text)?;
    }
    let mut s = String::new();
    let _ = writeln!(s, "tau                    {}", join(&tau, 4));
    let _ = writeln!(s, "familywise error       {:.4}", c.fwer_at);
    let _ = writeln!(s, "pr(reject H01)         {:.4}", c.reject_h01);
    let _ = writeln!(s, "pr(reject any)         {:.4}", c.power_any);
    let _ = writeln!(s, "E(N)                   {:.1}", c.expected_n);
    let _ = writeln!(s, "E(O)                   {:.1}", c.expected_o);
    let _ = writeln!(s, "max N                  {}", c.max_n);
    let _ = writeln!(s, "max O                  {}", c.max_o);
    let _ = writeln!(s, "integration error      {:.2e}", c.integration_error);
    Ok(s)
}

/// Report file written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFile {
    pub tool_version: String,
    pub parameters: TrueParameters,
    pub report: SimulationReport,
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<String> {
    let file = DesignFile::read(&args.design)?;
    let design = &file.design;
    let d = design.treatments;
    let sigma_b_sq = args
        .sigma_b2
        .or(design.sigma_b_sq)
        .ok_or_else(|| CliError::validation("--sigma-b2 is required when the design file has none"))?;
    check_positive("sigma-b2", sigma_b_sq)?;
    if args.replicates < 1 {
        return Err(CliError::validation("--replicates must be at least 1"));
    }
    let periods = args.periods.clone().unwrap_or_else(|| vec![0.0; d - 1]);
    let tau = args.tau.clone().unwrap_or_else(|| vec![0.0; d - 1]);
    if periods.len() != d - 1 {
        return Err(CliError::validation(format!("--periods needs {} values, got {}", d - 1, periods.len())));
    }
    if tau.len() != d - 1 {
        return Err(CliError::validation(format!("--tau needs {} values, got {}", d - 1, tau.len())));
    }
    let params = TrueParameters { mu0: args.mu0, periods, tau, sigma_b_sq, sigma_e_sq: design.sigma_e_sq };
    let procedure = if args.known_variance {
        AnalysisProcedure::known_variance()
    } else {
        AnalysisProcedure::numbered(args.procedure)?
    };
    let report = simulator::simulate(design, &params, procedure, args.replicates, args.seed)?;
    let out = SimulationFile { tool_version: VERSION.to_string(), parameters: params, report: report.clone() };
    let text = toml::to_string(&out).map_err(|e| CliError::validation(e.to_string()))?;
    write_file(&args.out, &text)?;

    let mut s = String::new();
    let _ = writeln!(s, "replicates             {} ({} failed)", report.replicates, report.failures);
    let _ = writeln!(s, "pr(reject any)         {:.4} (se {:.4})", report.reject_any_rate, report.reject_any_se);
    let _ = writeln!(s, "pr(reject each)        {}", join(&report.reject_each, 4));
    let _ = writeln!(s, "stopping stage         {}", join(&report.stopping_stage, 4));
    let _ = writeln!(s, "mean N                 {:.2}", report.mean_sample_size);
    let _ = writeln!(s, "mean O                 {:.2}", report.mean_observations);
    let _ = writeln!(s, "boundary fits          {}", report.boundary_fits);
    Ok(s)
}

/// One matrix block in a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBlock {
    pub name: String,
    pub r: usize,
    pub matrix: nalgebra::DMatrix<f64>,
}

pub fn matrices_text(args: &MatricesArgs) -> CliResult<(String, Vec<MatrixBlock>)> {
    let d = args.treatments;
    if d < 2 {
        return Err(CliError::validation(format!("--treatments must be at least 2, got {d}")));
    }
    if args.stages < 1 {
        return Err(CliError::validation("--stages must be at least 1"));
    }
    let vc = VarianceComponents::new(args.sigma_b2, args.sigma_e2)?;
    let family: SequenceFamily = args.family.into();
    let n = args.group_size.unwrap_or_else(|| lcm_group_size(d, family));
    let mut blocks = Vec::new();
    for r in (2..=d).rev() {
        blocks.push(MatrixBlock { name: "sigma".into(), r, matrix: sigma_r(r, &vc) });
        blocks.push(MatrixBlock { name: "sigma_inverse".into(), r, matrix: sigma_r_inverse(r, &vc) });
        let set = generate_sequence_set(r, family)?;
        blocks.push(MatrixBlock {
            name: "stage_information".into(),
            r,
            matrix: stage_information(r, d, n, &vc, &set)?,
        });
    }
    blocks.push(MatrixBlock {
        name: "no_drop_covariance".into(),
        r: d,
        matrix: no_drop_covariance(d, args.stages, n, &vc),
    });

    let mut s = String::new();
    let _ = writeln!(s, "# gsxover {VERSION} covariance matrices");
    let _ = writeln!(
        s,
        "# treatments={d} sigma_b2={} sigma_e2={} group_size={n} stages={} family={family}",
        args.sigma_b2, args.sigma_e2, args.stages
    );
    let _ = writeln!(s, "# each block: a line 'matrix,<name>,<r>,<rows>,<cols>' then one comma-separated line per row");
    let _ =
        writeln!(s, "# sigma, sigma_inverse: per-patient response covariance and its inverse (response units squared)");
    let _ = writeln!(s, "# stage_information: information from one stage of group_size patients; rows and columns ordered mu0, pi_2..pi_D, tau_1..tau_{{D-1}}");
    let _ = writeln!(
        s,
        "# no_drop_covariance: covariance of the fixed-effect estimates after all stages with every treatment present"
    );
    for b in &blocks {
        let _ = writeln!(s, "matrix,{},{},{},{}", b.name, b.r, b.matrix.nrows(), b.matrix.ncols());
        for i in 0..b.matrix.nrows() {
            let row: Vec<String> = (0..b.matrix.ncols()).map(|j| b.matrix[(i, j)].to_string()).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
    }
    Ok((s, blocks))
}

/// Parses a dump written by `matrices`.
pub fn parse_matrices(text: &str) -> CliResult<Vec<MatrixBlock>> {
    let bad = |m: &str| CliError::validation(format!("bad matrix dump: {m}"));
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some(head) = lines.next() {
        let f: Vec<&str> = head.split(',').collect();
        if f.len() != 5 || f[0] != "matrix" {
            return Err(bad(head));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(head));
        let (r, rows, cols) = (parse(f[2])?, parse(f[3])?, parse(f[4])?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| bad("truncated block"))?;
            let vals: Vec<f64> =
                line.split(',').map(|v| v.parse::<f64>().map_err(|_| bad(line))).collect::<CliResult<_>>()?;
            if vals.len() != cols {
                return Err(bad(line));
            }
            data.extend(vals);
        }
        out.push(MatrixBlock {
            name: f[1].to_string(),
            r,
            matrix: nalgebra::DMatrix::from_row_slice(rows, cols, &data),
        });
    }
    Ok(out)
}

pub fn cmd_matrices(args: &MatricesArgs) -> CliResult<String> {
    let (text, blocks) = matrices_text(args)?;
    write_file(&args.out, &text)?;
    Ok(format!("wrote {} matrices to {}\n", blocks.len(), args.out.display()))
}

/// Runs a parsed command line; the thread pool is sized first.
pub fn run(cli: &Cli) -> CliResult<String> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        // The global pool can only be built once per process.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::debug!("thread pool already initialised: {e}");
        }
    }
    match &cli.command {
        Command::Design(a) => cmd_design(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Matrices(a) => cmd_matrices(a),
    }
}
