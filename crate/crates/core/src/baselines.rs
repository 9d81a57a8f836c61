//! Comparison strategies and the two pathological fixture programs.
//!
//! * [`all_long_sigma`] encodes every branch long.
//! * [`gfp_short_long`] starts all long and shrinks to short while the short
//!   form reaches, never using absolute jumps.
//! * [`brute_force_optimal`] tries every admissible assignment.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::invariants::encoded_length;
use crate::isa::{Address, IsaError, IsaParams, JumpLength};
use crate::policy::FinalPolicy;
use crate::program::{parse_program, LabelMap, Program};

/// Default cap for [`brute_force_optimal`].
pub const DEFAULT_MAX_BRANCHES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BaselineError {
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error("jump at pseudo-address {ppc} targets undefined label `{label}`")]
    UndefinedLabel { ppc: usize, label: String },
    #[error("program does not fit in 64 KB: {size} bytes")]
    ProgramTooLarge { size: Address },
    #[error("too many branches for exhaustive search: {count} > {max}")]
    TooManyBranches { count: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Lfp,
    AllLong,
    Gfp,
    Optimal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Lfp, Strategy::AllLong, Strategy::Gfp, Strategy::Optimal];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Lfp => "lfp",
            Strategy::AllLong => "all-long",
            Strategy::Gfp => "gfp",
            Strategy::Optimal => "optimal",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown strategy `{0}` (expected lfp, all-long, gfp or optimal)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Strategy, UnknownStrategy> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BranchLength {
    pub ppc: usize,
    pub length: JumpLength,
}

/// Size and speed of one strategy's output. Cycles count branches only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub total_bytes: Address,
    pub total_branch_cycles: u64,
    pub lengths: Vec<BranchLength>,
}

/// The length each branch is emitted with under `policy`.
pub fn emitted_lengths(
    p: &Program,
    labels: &LabelMap,
    policy: &FinalPolicy,
    isa: &IsaParams,
) -> Result<Vec<BranchLength>, BaselineError> {
    p.branch_indices()
        .map(|ppc| {
            let instr = &p.instructions()[ppc];
            let kind = instr.branch_kind().expect("branch index");
            let t = target(labels, p, ppc)?;
            let length = encoded_length(
                isa,
                kind,
                policy.address(ppc) as Address,
                policy.address(t) as Address,
                policy.forced_long(ppc),
            );
            Ok(BranchLength { ppc, length })
        })
        .collect()
}

pub fn strategy_report(
    strategy: Strategy,
    p: &Program,
    labels: &LabelMap,
    policy: &FinalPolicy,
    isa: &IsaParams,
) -> Result<StrategyReport, BaselineError> {
    let lengths = emitted_lengths(p, labels, policy, isa)?;
    let mut cycles = 0u64;
    for bl in &lengths {
        let kind = p.instructions()[bl.ppc].branch_kind().expect("branch index");
        cycles += isa.branch_cycles(kind, bl.length)? as u64;
    }
    Ok(StrategyReport { strategy, total_bytes: policy.total_bytes(), total_branch_cycles: cycles, lengths })
}

fn target(labels: &LabelMap, p: &Program, ppc: usize) -> Result<usize, BaselineError> {
    let instr = &p.instructions()[ppc];
    labels.target_of(instr).ok_or_else(|| BaselineError::UndefinedLabel {
        ppc,
        label: instr.destination().unwrap_or_default().to_string(),
    })
}

/// Addresses `0..=n` when instruction `ppc` is encoded with `lengths[ppc]`.
fn layout(p: &Program, lengths: &[JumpLength], isa: &IsaParams) -> Result<Vec<Address>, BaselineError> {
    let mut addresses = Vec::with_capacity(p.len() + 1);
    let mut pc: Address = 0;
    addresses.push(pc);
    for (instr, &length) in p.instructions().iter().zip(lengths) {
        pc += isa.instruction_size(instr, length)? as Address;
        addresses.push(pc);
    }
    Ok(addresses)
}

fn to_policy(
    p: &Program,
    lengths: &[JumpLength],
    addresses: &[Address],
    iterations: usize,
    isa: &IsaParams,
) -> Result<FinalPolicy, BaselineError> {
    let size = *addresses.last().expect("end address");
    if size > isa.memory_size() {
        return Err(BaselineError::ProgramTooLarge { size });
    }
    let words = addresses.iter().map(|&a| a as u16).collect();
    let forced = p
        .instructions()
        .iter()
        .zip(lengths)
        .map(|(instr, &l)| instr.is_branch() && l == JumpLength::Long)
        .collect();
    Ok(FinalPolicy::new(words, forced, iterations))
}

fn long_lengths(p: &Program) -> Vec<JumpLength> {
    p.instructions()
        .iter()
        .map(|i| if i.is_branch() { JumpLength::Long } else { JumpLength::Short })
        .collect()
}

/// Every branch long, conditionals in their expanded form.
pub fn all_long_sigma(p: &Program, labels: &LabelMap, isa: &IsaParams) -> Result<FinalPolicy, BaselineError> {
    for ppc in p.branch_indices() {
        target(labels, p, ppc)?;
    }
    let lengths = long_lengths(p);
    let addresses = layout(p, &lengths, isa)?;
    to_policy(p, &lengths, &addresses, 1, isa)
}

/// Every intermediate policy of the greatest fixed point, starting from all
/// long. The last entry is the result. Each round shrinks every long branch
/// whose short form reaches its target at the current addresses; shrinking
/// only brings instructions closer, so earlier decisions stay valid.
pub fn gfp_schedule(p: &Program, labels: &LabelMap, isa: &IsaParams) -> Result<Vec<FinalPolicy>, BaselineError> {
    let mut lengths = long_lengths(p);
    let mut schedule = Vec::new();
    let targets: Vec<(usize, usize)> = p
        .branch_indices()
        .map(|ppc| Ok((ppc, target(labels, p, ppc)?)))
        .collect::<Result<_, BaselineError>>()?;
    loop {
        let addresses = layout(p, &lengths, isa)?;
        schedule.push(to_policy(p, &lengths, &addresses, schedule.len() + 1, isa)?);
        let mut shrunk = false;
        for &(ppc, t) in &targets {
            let kind = p.instructions()[ppc].branch_kind().expect("branch index");
            if lengths[ppc] == JumpLength::Long
                && kind.is_admissible(JumpLength::Short)
                && isa.length_fits(kind, JumpLength::Short, addresses[ppc], addresses[t])
            {
                lengths[ppc] = JumpLength::Short;
                shrunk = true;
            }
        }
        if !shrunk {
            return Ok(schedule);
        }
    }
}

pub fn gfp_short_long(p: &Program, labels: &LabelMap, isa: &IsaParams) -> Result<FinalPolicy, BaselineError> {
    let mut schedule = gfp_schedule(p, labels, isa)?;
    Ok(schedule.pop().expect("schedule is never empty"))
}

/// Smallest self-consistent assignment of admissible lengths.
///
/// An assignment is feasible when, at the addresses it induces, every short
/// or absolute branch satisfies its condition and the program fits in memory.
/// Assignments are visited in lexicographic order (short < absolute < long)
/// and the first of minimal size wins.
pub fn brute_force_optimal(
    p: &Program,
    labels: &LabelMap,
    isa: &IsaParams,
    max_branches: usize,
) -> Result<FinalPolicy, BaselineError> {
    let count = p.branch_count();
    if count > max_branches {
        return Err(BaselineError::TooManyBranches { count, max: max_branches });
    }
    struct Site {
        ppc: usize,
        target: usize,
        kind: crate::isa::BranchKind,
        choices: &'static [JumpLength],
        sizes: Vec<Address>,
    }
    let mut sites = Vec::with_capacity(count);
    for ppc in p.branch_indices() {
        let kind = p.instructions()[ppc].branch_kind().expect("branch index");
        let choices = kind.admissible();
        let sizes = choices
            .iter()
            .map(|&l| isa.branch_size(kind, l).map(Address::from))
            .collect::<Result<_, _>>()?;
        sites.push(Site { ppc, target: target(labels, p, ppc)?, kind, choices, sizes });
    }

    // address(ppc) = fixed[ppc] + sum of the sizes of the branches before ppc
    let mut fixed = Vec::with_capacity(p.len() + 1);
    let mut before = Vec::with_capacity(p.len() + 1);
    let (mut acc, mut branches) = (0, 0);
    for instr in p.instructions() {
        fixed.push(acc);
        before.push(branches);
        if instr.is_branch() {
            branches += 1;
        } else {
            acc += instr.declared_size().unwrap_or(0) as Address;
        }
    }
    fixed.push(acc);
    before.push(branches);

    let mut choice = vec![0usize; count];
    let mut prefix = vec![0 as Address; count + 1];
    let mut best: Option<(Address, Vec<usize>)> = None;
    loop {
        for (i, site) in sites.iter().enumerate() {
            prefix[i + 1] = prefix[i] + site.sizes[choice[i]];
        }
        let address = |ppc: usize| fixed[ppc] + prefix[before[ppc]];
        let total = address(p.len());
        let better = best.as_ref().is_none_or(|(b, _)| total < *b);
        if better
            && total <= isa.memory_size()
            && sites.iter().zip(&choice).all(|(s, &c)| {
                isa.length_fits(s.kind, s.choices[c], address(s.ppc), address(s.target))
            })
        {
            best = Some((total, choice.clone()));
        }
        // next assignment, last branch fastest
        let mut i = count;
        loop {
            if i == 0 {
                let (_, choice) = best.ok_or(BaselineError::ProgramTooLarge { size: total })?;
                let mut lengths = vec![JumpLength::Short; p.len()];
                for (s, &c) in sites.iter().zip(&choice) {
                    lengths[s.ppc] = s.choices[c];
                }
                let addresses = layout(p, &lengths, isa)?;
                return to_policy(p, &lengths, &addresses, 0, isa);
            }
            i -= 1;
            choice[i] += 1;
            if choice[i] < sites[i].choices.len() {
                break;
            }
            choice[i] = 0;
        }
    }
}

/// A backward branch that starts out crossing a segment boundary and is
/// pulled into its target's segment when an earlier jump grows long. The
/// fixpoint settles it as absolute after three iterations.
pub const FIG3_SOURCE: &str = "\
        jmp Y
        jmp X
        other 125
Y:      other 1918
L0:     other 256
        jmp L0
        other 200
X:      nop 1
";

/// Pseudo-address of the branch to `L0` in [`FIG3_SOURCE`].
pub const FIG3_BRANCH: usize = 5;

/// The leading `jmp X` fits in a short jump, so the fixpoint keeps it short
/// and `L1` stays in segment 0, out of reach of the three absolute jumps in
/// segment 1. Encoding `jmp X` long moves `L1` across the boundary and lets
/// all three become absolute, saving two bytes overall.
pub const FIG4_SOURCE: &str = "\
L0:     jmp X
X:      other 2045
L1:     other 300
        jmp L1
        jmp L1
        jmp L1
";

pub fn make_fig3_fixture() -> Program {
    parse_program(FIG3_SOURCE).expect("fixture parses")
}

pub fn make_fig4_fixture() -> Program {
    parse_program(FIG4_SOURCE).expect("fixture parses")
}
