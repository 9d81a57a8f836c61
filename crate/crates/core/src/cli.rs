//! The `relax51` command line.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 program larger
//! than 64 KB, 3 invariant or encoding failure, 4 I/O failure.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

use crate::baselines::{
    all_long_sigma, brute_force_optimal, gfp_short_long, strategy_report, BaselineError, Strategy,
    StrategyReport, DEFAULT_MAX_BRANCHES,
};
use crate::dump::{write_iteration_dump, write_sigma_dump};
use crate::encoder::{encode_program, verify_targets, EncodeError};
use crate::invariants::{self, CheckReport};
use crate::isa::{Address, IsaError, IsaParams, JumpLength};
use crate::policy::{fixpoint_traced, iteration_bound, FinalPolicy, PolicyError, SigmaMap};
use crate::program::{build_label_map, parse_program, LabelError, LabelMap, ParseError, Program};

#[derive(Clone, Debug, PartialEq, Eq, Parser)]
#[command(name = "relax51", version, about = "Branch displacement optimizer for MCS-51 assembly")]
pub struct RunConfig {
    /// Pseudo-assembly source file
    pub input: PathBuf,
    /// Instruction set parameters by name
    #[arg(long, default_value = "mcs51")]
    pub isa: String,
    /// TOML file overriding the instruction set parameters
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "lfp", value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// Write the flat binary image
    #[arg(long, value_name = "FILE")]
    pub emit_bin: Option<PathBuf>,
    /// Write the final address map as JSON lines
    #[arg(long, value_name = "FILE")]
    pub dump_sigma: Option<PathBuf>,
    /// Write every intermediate map of the fixpoint as JSON lines
    #[arg(long, value_name = "FILE")]
    pub dump_iterations: Option<PathBuf>,
    /// Run every invariant checker on the result
    #[arg(long)]
    pub check_invariants: bool,
    /// Print a size and cycle table for every strategy
    #[arg(long)]
    pub report: bool,
    #[arg(long, value_name = "N")]
    pub max_iterations: Option<usize>,
    /// Branch limit for the exhaustive search
    #[arg(long, value_name = "N", default_value_t = DEFAULT_MAX_BRANCHES)]
    pub max_branches: usize,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: crate::baselines::UnknownStrategy| e.to_string())
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            input: input.into(),
            isa: "mcs51".into(),
            params: None,
            strategy: Strategy::Lfp,
            emit_bin: None,
            dump_sigma: None,
            dump_iterations: None,
            check_invariants: false,
            report: false,
            max_iterations: None,
            max_branches: DEFAULT_MAX_BRANCHES,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {err}")]
    Parse { path: PathBuf, err: ParseError },
    #[error("{0}")]
    Labels(#[from] LabelError),
    #[error("configuration: {0}")]
    Config(#[from] IsaError),
    #[error("{message}")]
    Input { message: String },
    #[error("program too large: {size} bytes exceeds the 64 KB (65536-byte) address space")]
    ProgramTooLarge { size: Address },
    #[error("{message}")]
    Invariant { message: String },
    #[error("encoding failed: {0}")]
    Encode(#[from] EncodeError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Labels(_) | CliError::Config(_) | CliError::Input { .. } => 1,
            CliError::ProgramTooLarge { .. } => 2,
            CliError::Invariant { .. } | CliError::Encode(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

fn locate(p: &Program, ppc: usize) -> String {
    match p.line_of(ppc) {
        Some(line) => format!("ppc {ppc} (line {line})"),
        None => format!("ppc {ppc}"),
    }
}

fn invariant_error(p: &Program, report: &CheckReport) -> CliError {
    let message = match &report.first_violation {
        Some(v) => format!("invariant {} violated at {}: {}", report.name, locate(p, v.ppc), v.detail),
        None => format!("invariant {} violated", report.name),
    };
    CliError::Invariant { message }
}

fn policy_error(p: &Program, err: PolicyError) -> CliError {
    match err {
        PolicyError::Labels(e) => e.into(),
        PolicyError::Isa(e) => e.into(),
        PolicyError::UndefinedLabel { ppc, label } => {
            CliError::Input { message: format!("undefined label `{label}` at {}", locate(p, ppc)) }
        }
        PolicyError::ProgramTooLarge { size, .. } => CliError::ProgramTooLarge { size },
        PolicyError::NoFixpoint { iterations } => {
            CliError::Invariant { message: format!("no fixpoint within {iterations} iterations") }
        }
        PolicyError::Invariant(report) => invariant_error(p, &report),
    }
}

fn baseline_error(p: &Program, err: BaselineError) -> CliError {
    match err {
        BaselineError::Isa(e) => e.into(),
        BaselineError::UndefinedLabel { ppc, label } => {
            CliError::Input { message: format!("undefined label `{label}` at {}", locate(p, ppc)) }
        }
        BaselineError::ProgramTooLarge { size } => CliError::ProgramTooLarge { size },
        e @ BaselineError::TooManyBranches { .. } => CliError::Input { message: e.to_string() },
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn load_isa(config: &RunConfig) -> Result<IsaParams, CliError> {
    match &config.params {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_error(path))?;
            Ok(IsaParams::from_toml_str(&text)?)
        }
        None => Ok(IsaParams::by_name(&config.isa)?),
    }
}

/// Policy for one strategy, with the intermediate maps for `lfp`.
pub fn produce(
    strategy: Strategy,
    p: &Program,
    labels: &LabelMap,
    isa: &IsaParams,
    config: &RunConfig,
) -> Result<(FinalPolicy, Vec<SigmaMap>), CliError> {
    match strategy {
        Strategy::Lfp => {
            let trace = fixpoint_traced(p, labels, isa, config.max_iterations);
            let policy = trace.outcome.map_err(|e| policy_error(p, e))?;
            Ok((policy, trace.history))
        }
        Strategy::AllLong => Ok((all_long_sigma(p, labels, isa).map_err(|e| baseline_error(p, e))?, Vec::new())),
        Strategy::Gfp => Ok((gfp_short_long(p, labels, isa).map_err(|e| baseline_error(p, e))?, Vec::new())),
        Strategy::Optimal => Ok((
            brute_force_optimal(p, labels, isa, config.max_branches).map_err(|e| baseline_error(p, e))?,
            Vec::new(),
        )),
    }
}

/// Checks run with `--check-invariants`. The iteration checks only apply to
/// `lfp`, whose history is non-empty.
fn full_checks(p: &Program, labels: &LabelMap, policy: &FinalPolicy, history: &[SigmaMap], isa: &IsaParams) -> Vec<CheckReport> {
    let mut reports = vec![invariants::check_specification(p, labels, policy, isa)];
    for pair in history.windows(2) {
        reports.push(invariants::check_jump_increase(p, &pair[0], &pair[1]));
    }
    for sigma in history.iter().skip(1) {
        reports.push(invariants::check_out_of_program_none(p, sigma));
        reports.push(invariants::check_not_jump_default(p, sigma));
        reports.push(invariants::check_sigma_compact_unsafe(p, sigma, isa));
    }
    if let Some(last) = history.last() {
        reports.push(invariants::check_sigma_compact(p, labels, last, isa));
        reports.push(invariants::check_sigma_safe(p, labels, 0, last, last, isa));
    }
    reports
}

fn length_counts(report: &StrategyReport) -> [usize; 3] {
    let mut counts = [0; 3];
    for b in &report.lengths {
        counts[JumpLength::ALL.iter().position(|&l| l == b.length).expect("known length")] += 1;
    }
    counts
}

/// The size table printed by `--report`. Strategies that cannot run on the
/// program are listed with the reason.
pub fn report_table(p: &Program, labels: &LabelMap, isa: &IsaParams, config: &RunConfig) -> Result<String, CliError> {
    let mut table = String::new();
    writeln!(table, "{:<10} {:>7} {:>7} {:>6} {:>9} {:>5}", "strategy", "bytes", "cycles", "short", "absolute", "long")
        .expect("write to string");
    for strategy in Strategy::ALL {
        let line = match produce(strategy, p, labels, isa, config) {
            Ok((policy, _)) => {
                let r = strategy_report(strategy, p, labels, &policy, isa).map_err(|e| baseline_error(p, e))?;
                let [s, a, l] = length_counts(&r);
                format!("{:<10} {:>7} {:>7} {:>6} {:>9} {:>5}", strategy, r.total_bytes, r.total_branch_cycles, s, a, l)
            }
            Err(e) if e.exit_code() == 1 || e.exit_code() == 2 => format!("{strategy:<10} skipped: {e}"),
            Err(e) => return Err(e),
        };
        writeln!(table, "{line}").expect("write to string");
    }
    Ok(table)
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(io_error(path))?;
    fs::write(path, buf).map_err(io_error(path))
}

pub fn execute(config: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let text = fs::read_to_string(&config.input).map_err(io_error(&config.input))?;
    let isa = load_isa(config)?;
    let p = parse_program(&text).map_err(|err| CliError::Parse { path: config.input.clone(), err })?;
    let labels = build_label_map(&p)?;

    let (policy, history) = produce(config.strategy, &p, &labels, &isa, config)?;

    let placement = invariants::check_specification(&p, &labels, &policy, &isa);
    if !placement.holds() {
        return Err(invariant_error(&p, &placement));
    }
    if config.check_invariants {
        if let Some(failed) = full_checks(&p, &labels, &policy, &history, &isa).into_iter().find(|r| !r.holds()) {
            return Err(invariant_error(&p, &failed));
        }
    }
    let image = encode_program(&p, &labels, &policy, &isa)?;
    let verified = verify_targets(&image, &p, &labels, &policy, &isa);
    if !verified.holds() {
        return Err(invariant_error(&p, &verified));
    }

    if let Some(path) = &config.emit_bin {
        fs::write(path, &image.bytes).map_err(io_error(path))?;
    }
    if let Some(path) = &config.dump_sigma {
        write_file(path, |buf| write_sigma_dump(buf, &p, &labels, &policy, &isa))?;
    }
    if let Some(path) = &config.dump_iterations {
        write_file(path, |buf| write_iteration_dump(buf, &p, &labels, &history, &isa))?;
    }

    let stdout = |e| CliError::Io { path: "<stdout>".into(), source: e };
    writeln!(out, "strategy: {}", config.strategy).map_err(stdout)?;
    writeln!(out, "instructions: {}", p.len()).map_err(stdout)?;
    writeln!(out, "branches: {}", p.branch_count()).map_err(stdout)?;
    writeln!(out, "total bytes: {}", policy.total_bytes()).map_err(stdout)?;
    writeln!(out, "end address: {:#06x}", policy.address(policy.len())).map_err(stdout)?;
    if config.strategy == Strategy::Lfp {
        writeln!(
            out,
            "iterations used: {} (bound 2n = {})",
            policy.iterations_used(),
            iteration_bound(&p) - 1
        )
        .map_err(stdout)?;
    }
    if config.check_invariants {
        writeln!(out, "invariants: ok").map_err(stdout)?;
    }
    if config.report {
        write!(out, "{}", report_table(&p, &labels, &isa, config)?).map_err(stdout)?;
    }
    Ok(())
}

/// Run the pipeline and return the process exit code. Diagnostics go to
/// `err`.
pub fn run(config: &RunConfig, out: &mut impl Write, err: &mut impl Write) -> i32 {
    match execute(config, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
