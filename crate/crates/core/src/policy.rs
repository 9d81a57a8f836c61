//! Least-fixed-point branch displacement.
//!
//! Every branch starts at its shortest admissible encoding. Each iteration
//! folds [`step_instruction`] over the program, recomputing every branch's
//! encoding against the layout of the previous iteration (for forward
//! targets) or the layout being built (for backward targets). Encodings only
//! ever grow, so each branch changes at most twice and the computation stops
//! after at most `2n + 1` iterations.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::invariants::{self, CheckReport};
use crate::isa::{max_length, Address, IsaError, IsaParams, JumpLength};
use crate::program::{build_label_map, LabelError, LabelMap, Program, PseudoInstruction};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error("jump at pseudo-address {ppc} targets undefined label `{label}`")]
    UndefinedLabel { ppc: usize, label: String },
    #[error("program does not fit in 64 KB: {size} bytes after iteration {iteration}")]
    ProgramTooLarge { size: Address, iteration: usize },
    #[error("no fixpoint within {iterations} iterations")]
    NoFixpoint { iterations: usize },
    #[error("invariant violated: {0}")]
    Invariant(CheckReport),
}

/// Start address and chosen encoding of one pseudo-address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SigmaEntry {
    pub address: Address,
    pub length: JumpLength,
}

impl Default for SigmaEntry {
    fn default() -> Self {
        SigmaEntry { address: 0, length: JumpLength::Short }
    }
}

/// The map under construction: pseudo-address to (address, length), plus
/// the program size. Entry `n` holds the end address of an `n`-instruction
/// program.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SigmaMap {
    pub program_size: Address,
    entries: BTreeMap<usize, SigmaEntry>,
}

impl SigmaMap {
    pub fn new() -> SigmaMap {
        SigmaMap::default()
    }

    /// Entry at `ppc`, or `(0, short)` when absent.
    pub fn lookup(&self, ppc: usize) -> SigmaEntry {
        self.entries.get(&ppc).copied().unwrap_or_default()
    }

    pub fn get(&self, ppc: usize) -> Option<SigmaEntry> {
        self.entries.get(&ppc).copied()
    }

    pub fn address(&self, ppc: usize) -> Address {
        self.lookup(ppc).address
    }

    pub fn length(&self, ppc: usize) -> JumpLength {
        self.lookup(ppc).length
    }

    pub fn insert(&mut self, ppc: usize, entry: SigmaEntry) {
        self.entries.insert(ppc, entry);
    }

    pub fn remove(&mut self, ppc: usize) -> Option<SigmaEntry> {
        self.entries.remove(&ppc)
    }

    pub fn set_length(&mut self, ppc: usize, length: JumpLength) {
        self.entries.entry(ppc).or_default().length = length;
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fold state: bytes added relative to the previous iteration, the current
/// address, and the map built so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepAccumulator {
    pub added: Address,
    pub pc: Address,
    pub sigma: SigmaMap,
}

impl StepAccumulator {
    pub fn start() -> StepAccumulator {
        let mut sigma = SigmaMap::new();
        sigma.insert(0, SigmaEntry::default());
        StepAccumulator { added: 0, pc: 0, sigma }
    }
}

/// Layout with every branch at its shortest admissible encoding (calls start
/// absolute since they have no short form).
pub fn initial_sigma(p: &Program, isa: &IsaParams) -> Result<SigmaMap, PolicyError> {
    let mut sigma = SigmaMap::new();
    let mut pc: Address = 0;
    for (ppc, instr) in p.instructions().iter().enumerate() {
        let length = instr.branch_kind().map_or(JumpLength::Short, |k| k.minimal_length());
        sigma.insert(ppc, SigmaEntry { address: pc, length });
        pc += isa.instruction_size(instr, length)? as Address;
    }
    sigma.insert(p.len(), SigmaEntry { address: pc, length: JumpLength::Short });
    sigma.program_size = pc;
    Ok(sigma)
}

/// Process one instruction of an iteration.
///
/// A backward target's address is already in `acc.sigma`. A forward target is
/// estimated from `old_sigma`, shifted by the bytes this iteration has added
/// so far.
pub fn step_instruction(
    labels: &LabelMap,
    old_sigma: &SigmaMap,
    instr: &PseudoInstruction,
    ppc: usize,
    mut acc: StepAccumulator,
    isa: &IsaParams,
) -> Result<StepAccumulator, PolicyError> {
    let length = match instr.branch_kind() {
        Some(kind) => {
            let dest = instr.destination().unwrap_or_default();
            let target_ppc = labels
                .get(dest)
                .ok_or_else(|| PolicyError::UndefinedLabel { ppc, label: dest.to_string() })?;
            let target = if target_ppc <= ppc {
                acc.sigma.address(target_ppc)
            } else {
                old_sigma.address(target_ppc) + acc.added
            };
            isa.jump_size(acc.pc, target, kind)
        }
        None => JumpLength::Short,
    };

    let old_length = old_sigma.length(ppc);
    let new_length = if instr.is_branch() { max_length(old_length, length) } else { length };
    let old_size = isa.instruction_size(instr, old_length)? as Address;
    let new_size = isa.instruction_size(instr, new_length)? as Address;
    debug_assert!(new_size >= old_size, "encodings only grow");

    acc.added += new_size.saturating_sub(old_size);
    acc.sigma.set_length(ppc, new_length);
    acc.pc += new_size;
    acc.sigma.insert(ppc + 1, SigmaEntry { address: acc.pc, length: JumpLength::Short });
    Ok(acc)
}

/// Fold [`step_instruction`] over the whole program without the size check.
pub fn fold_iteration(
    p: &Program,
    labels: &LabelMap,
    old_sigma: &SigmaMap,
    isa: &IsaParams,
) -> Result<StepAccumulator, PolicyError> {
    let mut acc = StepAccumulator::start();
    for (ppc, instr) in p.instructions().iter().enumerate() {
        acc = step_instruction(labels, old_sigma, instr, ppc, acc, isa)?;
    }
    acc.sigma.program_size = acc.pc;
    Ok(acc)
}

/// Result of one successful iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Iteration {
    /// Some stored length differs from the previous iteration.
    pub changed: bool,
    pub sigma: SigmaMap,
}

enum Outcome {
    Fits(Iteration),
    Overflow(Address),
}

fn iterate_inner(
    p: &Program,
    labels: &LabelMap,
    old_sigma: &SigmaMap,
    isa: &IsaParams,
) -> Result<Outcome, PolicyError> {
    let acc = fold_iteration(p, labels, old_sigma, isa)?;
    if acc.pc > isa.memory_size() {
        return Ok(Outcome::Overflow(acc.pc));
    }
    let changed = (0..p.len()).any(|ppc| old_sigma.length(ppc) != acc.sigma.length(ppc));
    debug_assert_iteration(p, old_sigma, &acc, changed, isa);
    Ok(Outcome::Fits(Iteration { changed, sigma: acc.sigma }))
}

#[cfg(debug_assertions)]
fn debug_assert_iteration(p: &Program, old: &SigmaMap, acc: &StepAccumulator, changed: bool, isa: &IsaParams) {
    let reports = [
        invariants::check_out_of_program_none(p, &acc.sigma),
        invariants::check_not_jump_default(p, &acc.sigma),
        invariants::check_jump_increase(p, old, &acc.sigma),
        invariants::check_sigma_compact_unsafe(p, &acc.sigma, isa),
        invariants::check_policy_equal(p, old, &acc.sigma, acc.added),
    ];
    for report in reports {
        assert!(report.holds(), "{report}");
    }
    assert_eq!(acc.sigma.address(0), 0);
    assert_eq!(acc.sigma.address(p.len()), acc.sigma.program_size);
    assert!(changed || acc.added == 0);
}

#[cfg(not(debug_assertions))]
fn debug_assert_iteration(_: &Program, _: &SigmaMap, _: &StepAccumulator, _: bool, _: &IsaParams) {}

/// One pass over the program. `None` when the program outgrows the address
/// space. A program that ends exactly at 64 KB still fits.
pub fn iterate(
    p: &Program,
    labels: &LabelMap,
    old_sigma: &SigmaMap,
    isa: &IsaParams,
) -> Result<Option<Iteration>, PolicyError> {
    Ok(match iterate_inner(p, labels, old_sigma, isa)? {
        Outcome::Fits(it) => Some(it),
        Outcome::Overflow(_) => None,
    })
}

/// The finished translation: pseudo-address to 16-bit address, and which
/// branches must be emitted long regardless of distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinalPolicy {
    sigma: Vec<u16>,
    forced_long: Vec<bool>,
    iterations_used: usize,
}

impl FinalPolicy {
    /// `sigma` has one entry per instruction plus the end address.
    pub fn new(sigma: Vec<u16>, forced_long: Vec<bool>, iterations_used: usize) -> FinalPolicy {
        assert_eq!(sigma.len(), forced_long.len() + 1, "sigma needs an end address");
        FinalPolicy { sigma, forced_long, iterations_used }
    }

    /// Truncate a completed map to 16-bit addresses. Long entries become
    /// forced-long flags.
    pub fn from_sigma_map(p: &Program, sigma: &SigmaMap, iterations_used: usize) -> FinalPolicy {
        let n = p.len();
        let words = (0..=n).map(|ppc| sigma.address(ppc) as u16).collect();
        let forced = (0..n)
            .map(|ppc| p.instructions()[ppc].is_branch() && sigma.length(ppc) == JumpLength::Long)
            .collect();
        FinalPolicy::new(words, forced, iterations_used)
    }

    /// Number of instructions covered.
    pub fn len(&self) -> usize {
        self.forced_long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forced_long.is_empty()
    }

    pub fn address(&self, ppc: usize) -> u16 {
        self.sigma[ppc]
    }

    pub fn addresses(&self) -> &[u16] {
        &self.sigma
    }

    pub fn forced_long(&self, ppc: usize) -> bool {
        self.forced_long.get(ppc).copied().unwrap_or(false)
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    /// Untruncated address of `ppc`: the end of a program that fills memory
    /// exactly reads as 0 but is 65536.
    pub fn natural_address(&self, ppc: usize) -> Address {
        let word = self.sigma[ppc] as Address;
        if ppc == self.len() && ppc > 0 && word == 0 {
            1 << 16
        } else {
            word
        }
    }

    pub fn total_bytes(&self) -> Address {
        self.natural_address(self.len())
    }
}

/// The default iteration cap: `2n` changing iterations plus the one that
/// confirms the fixpoint.
pub fn iteration_bound(p: &Program) -> usize {
    2 * p.len() + 1
}

/// Every map produced by a fixpoint run, starting with the initial one.
#[derive(Clone, Debug)]
pub struct FixpointTrace {
    pub history: Vec<SigmaMap>,
    pub outcome: Result<FinalPolicy, PolicyError>,
}

/// Run the fixpoint, keeping every intermediate map.
pub fn fixpoint_traced(
    p: &Program,
    labels: &LabelMap,
    isa: &IsaParams,
    max_iterations: Option<usize>,
) -> FixpointTrace {
    let mut history = Vec::new();
    let outcome = run_fixpoint(p, labels, isa, max_iterations.unwrap_or_else(|| iteration_bound(p)), &mut history);
    FixpointTrace { history, outcome }
}

fn run_fixpoint(
    p: &Program,
    labels: &LabelMap,
    isa: &IsaParams,
    bound: usize,
    history: &mut Vec<SigmaMap>,
) -> Result<FinalPolicy, PolicyError> {
    history.push(initial_sigma(p, isa)?);
    for iteration in 1..=bound {
        let old = history.last().expect("initial map pushed");
        match iterate_inner(p, labels, old, isa)? {
            Outcome::Overflow(size) => return Err(PolicyError::ProgramTooLarge { size, iteration }),
            Outcome::Fits(Iteration { changed, sigma }) => {
                history.push(sigma);
                if !changed {
                    let sigma = history.last().expect("just pushed");
                    let compact = invariants::check_sigma_compact(p, labels, sigma, isa);
                    if !compact.holds() {
                        return Err(PolicyError::Invariant(compact));
                    }
                    return Ok(FinalPolicy::from_sigma_map(p, sigma, iteration));
                }
            }
        }
    }
    Err(PolicyError::NoFixpoint { iterations: bound })
}

/// Compute the least-fixed-point policy for `p`.
pub fn fixpoint(p: &Program, isa: &IsaParams) -> Result<FinalPolicy, PolicyError> {
    let labels = build_label_map(p)?;
    fixpoint_traced(p, &labels, isa, None).outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_program;

    fn isa() -> IsaParams {
        IsaParams::mcs51()
    }

    fn setup(src: &str) -> (Program, LabelMap) {
        let p = parse_program(src).unwrap();
        let labels = build_label_map(&p).unwrap();
        (p, labels)
    }

    fn addresses(sigma: &SigmaMap, n: usize) -> Vec<Address> {
        (0..=n).map(|i| sigma.address(i)).collect()
    }

    #[test]
    fn absent_lookup_defaults_to_short_zero() {
        let sigma = SigmaMap::new();
        assert_eq!(sigma.lookup(42), SigmaEntry { address: 0, length: JumpLength::Short });
        assert_eq!(sigma.get(42), None);
    }

    #[test]
    fn initial_sigma_examples() {
        let (p, _) = setup("");
        let s = initial_sigma(&p, &isa()).unwrap();
        assert_eq!(s.program_size, 0);
        assert_eq!(s.get(0), Some(SigmaEntry { address: 0, length: JumpLength::Short }));

        let (p, _) = setup("nop 1\njmp L\nL: nop 1\n");
        let s = initial_sigma(&p, &isa()).unwrap();
        assert_eq!(addresses(&s, 2)[..3], [0, 1, 3]);

        let (p, _) = setup("call L\nL: nop 1\n");
        let s = initial_sigma(&p, &isa()).unwrap();
        assert_eq!(addresses(&s, 2), vec![0, 2, 3]);
        assert_eq!(s.length(0), JumpLength::Absolute);
        assert_eq!(s.program_size, 3);
    }

    #[test]
    fn step_non_branch_passes_size_through() {
        let (p, labels) = setup("nop 1\n");
        let old = initial_sigma(&p, &isa()).unwrap();
        let acc = step_instruction(&labels, &old, &p.instructions()[0], 0, StepAccumulator::start(), &isa()).unwrap();
        assert_eq!(acc.pc, 1);
        assert_eq!(acc.added, 0);
        assert_eq!(acc.sigma.length(0), JumpLength::Short);
        assert_eq!(acc.sigma.address(1), 1);
    }

    #[test]
    fn step_backward_short_jump() {
        let (p, labels) = setup("L0: nop 1\njmp L0\n");
        let old = initial_sigma(&p, &isa()).unwrap();
        let acc = step_instruction(&labels, &old, &p.instructions()[0], 0, StepAccumulator::start(), &isa()).unwrap();
        let acc = step_instruction(&labels, &old, &p.instructions()[1], 1, acc, &isa()).unwrap();
        // pc_after = 3, displacement -3
        assert_eq!(acc.sigma.length(1), JumpLength::Short);
        assert_eq!(acc.pc, 3);
    }

    #[test]
    fn step_forward_target_is_shifted_by_added() {
        // Forward jump at ppc 0 to a label whose previous address is 0x0085;
        // with 0x10 bytes already added the distance is measured to 0x0095.
        let (p, labels) = setup("jmp T\nT: nop 1\n");
        let mut old = SigmaMap::new();
        old.insert(0, SigmaEntry { address: 0, length: JumpLength::Short });
        old.insert(1, SigmaEntry { address: 0x0085, length: JumpLength::Short });
        old.insert(2, SigmaEntry { address: 0x0086, length: JumpLength::Short });

        let acc = StepAccumulator { added: 0x10, ..StepAccumulator::start() };
        let out = step_instruction(&labels, &old, &p.instructions()[0], 0, acc, &isa()).unwrap();
        // pc_after = 2, target 0x95: displacement 147 > 127, same segment.
        assert_eq!(out.sigma.length(0), JumpLength::Absolute);

        old.insert(1, SigmaEntry { address: 0x0075, length: JumpLength::Short });
        let acc = StepAccumulator { added: 0x10, ..StepAccumulator::start() };
        let out = step_instruction(&labels, &old, &p.instructions()[0], 0, acc, &isa()).unwrap();
        // 0x75 + 0x10 - 2 = 131: not short although 0x75 - 2 = 115 would be.
        assert_eq!(out.sigma.length(0), JumpLength::Absolute);
    }

    #[test]
    fn iterate_at_fixed_point_reports_unchanged() {
        let (p, labels) = setup("L0: nop 1\njmp L0\njz L0\n");
        let init = initial_sigma(&p, &isa()).unwrap();
        let it = iterate(&p, &labels, &init, &isa()).unwrap().unwrap();
        assert!(!it.changed);
        assert_eq!(it.sigma, init);
    }

    #[test]
    fn iterate_flips_long_forward_jump() {
        let (p, labels) = setup("jmp L\nnop 200\nL: nop 1\n");
        let init = initial_sigma(&p, &isa()).unwrap();
        let it = iterate(&p, &labels, &init, &isa()).unwrap().unwrap();
        assert!(it.changed);
        assert_eq!(it.sigma.length(0), JumpLength::Absolute);
        // short -> absolute keeps the size
        assert_eq!(addresses(&it.sigma, 3), addresses(&init, 3));
    }

    #[test]
    fn iterate_overflow_is_none() {
        let (p, labels) = setup("other 35000\nother 35000\n");
        let init = initial_sigma(&p, &isa()).unwrap();
        assert_eq!(init.program_size, 70000);
        assert!(iterate(&p, &labels, &init, &isa()).unwrap().is_none());
        assert!(matches!(fixpoint(&p, &isa()), Err(PolicyError::ProgramTooLarge { size: 70000, iteration: 1 })));
    }

    #[test]
    fn empty_program_fixpoint() {
        let (p, _) = setup("");
        let f = fixpoint(&p, &isa()).unwrap();
        assert_eq!(f.address(0), 0);
        assert_eq!(f.iterations_used(), 1);
        assert_eq!(f.total_bytes(), 0);
    }

    #[test]
    fn exact_fit_wraps_end_to_zero() {
        let (p, _) = setup("L: other 100\njmp L\nother 65434\n");
        let f = fixpoint(&p, &isa()).unwrap();
        assert_eq!(f.address(3), 0);
        assert_eq!(f.total_bytes(), 65536);
        assert!(!f.forced_long(1));
    }

    #[test]
    fn one_byte_over_is_too_large() {
        let (p, _) = setup("L: other 100\njmp L\nother 65435\n");
        assert!(matches!(fixpoint(&p, &isa()), Err(PolicyError::ProgramTooLarge { size: 65537, .. })));
    }

    #[test]
    fn undefined_label_is_reported() {
        let (p, _) = setup("jmp L\nL: nop 1\n");
        let empty = LabelMap::default();
        let init = initial_sigma(&p, &isa()).unwrap();
        assert!(matches!(
            iterate(&p, &empty, &init, &isa()),
            Err(PolicyError::UndefinedLabel { ppc: 0, .. })
        ));
    }

    #[test]
    fn iteration_cap_override() {
        let (p, labels) = setup("jmp X\nnop 1\nL0: other 300\njmp L0\nX: nop 1\n");
        let trace = fixpoint_traced(&p, &labels, &isa(), Some(1));
        assert!(matches!(trace.outcome, Err(PolicyError::NoFixpoint { iterations: 1 })));
        let trace = fixpoint_traced(&p, &labels, &isa(), None);
        assert!(trace.outcome.is_ok());
        assert_eq!(trace.history.len(), trace.outcome.unwrap().iterations_used() + 1);
    }

    #[test]
    fn forced_long_mirrors_stored_long() {
        let (p, labels) = setup("L0: nop 1\nother 3000\njmp L0\ncall L0\njz L0\n");
        let trace = fixpoint_traced(&p, &labels, &isa(), None);
        let f = trace.outcome.unwrap();
        let last = trace.history.last().unwrap();
        for ppc in 0..p.len() {
            assert_eq!(f.forced_long(ppc), last.length(ppc) == JumpLength::Long);
        }
        assert!(f.forced_long(2) && f.forced_long(3) && f.forced_long(4));
    }
}
