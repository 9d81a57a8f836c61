//! Executable correctness properties of the displacement computation.
//!
//! Each checker is a pure function returning a [`CheckReport`] that names
//! the first violating pseudo-address, if any. The policy runs some of them
//! after every iteration in debug builds; the test suites run all of them.

use std::fmt;

use crate::isa::{Address, BranchKind, IsaParams, JumpLength};
use crate::policy::{FinalPolicy, SigmaMap};
use crate::program::{LabelMap, Program, PseudoInstruction};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub ppc: usize,
    pub detail: String,
}

/// Outcome of one checker. The property holds iff there is no violation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckReport {
    pub name: &'static str,
    pub first_violation: Option<Violation>,
}

impl CheckReport {
    pub fn ok(name: &'static str) -> CheckReport {
        CheckReport { name, first_violation: None }
    }

    pub fn violated(name: &'static str, ppc: usize, detail: impl Into<String>) -> CheckReport {
        CheckReport { name, first_violation: Some(Violation { ppc, detail: detail.into() }) }
    }

    pub fn holds(&self) -> bool {
        self.first_violation.is_none()
    }

    fn from_result(name: &'static str, result: Result<(), (usize, String)>) -> CheckReport {
        match result {
            Ok(()) => CheckReport::ok(name),
            Err((ppc, detail)) => CheckReport::violated(name, ppc, detail),
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.first_violation {
            None => write!(f, "{}: ok", self.name),
            Some(v) => write!(f, "{}: violated at ppc {}: {}", self.name, v.ppc, v.detail),
        }
    }
}

type Check = Result<(), (usize, String)>;

fn fail<T>(ppc: usize, detail: impl Into<String>) -> Result<T, (usize, String)> {
    Err((ppc, detail.into()))
}

fn target_ppc(labels: &LabelMap, instr: &PseudoInstruction, ppc: usize) -> Result<usize, (usize, String)> {
    match labels.target_of(instr) {
        Some(t) => Ok(t),
        None => fail(ppc, format!("undefined label `{}`", instr.destination().unwrap_or_default())),
    }
}

/// Exactly the pseudo-addresses `0..=n` have entries.
pub fn check_out_of_program_none(p: &Program, sigma: &SigmaMap) -> CheckReport {
    let n = p.len();
    let result: Check = (|| {
        if let Some(stray) = sigma.keys().find(|&k| k > n) {
            return fail(stray, format!("entry beyond the end of the program (n = {n})"));
        }
        if let Some(missing) = (0..=n).find(|&i| sigma.get(i).is_none()) {
            return fail(missing, "no entry for an in-program pseudo-address");
        }
        Ok(())
    })();
    CheckReport::from_result("out_of_program_none", result)
}

/// Non-branch instructions keep the default short length.
pub fn check_not_jump_default(p: &Program, sigma: &SigmaMap) -> CheckReport {
    let result = p
        .instructions()
        .iter()
        .enumerate()
        .filter(|(_, instr)| !instr.is_branch())
        .find(|&(ppc, _)| sigma.length(ppc) != JumpLength::Short)
        .map_or(Ok(()), |(ppc, _)| fail(ppc, format!("non-branch stored as {}", sigma.length(ppc))));
    CheckReport::from_result("not_jump_default", result)
}

/// No length got shorter from `old` to `new`.
pub fn check_jump_increase(p: &Program, old: &SigmaMap, new: &SigmaMap) -> CheckReport {
    let result = (0..=p.len())
        .find(|&ppc| old.length(ppc) > new.length(ppc))
        .map_or(Ok(()), |ppc| {
            fail(ppc, format!("length shrank from {} to {}", old.length(ppc), new.length(ppc)))
        });
    CheckReport::from_result("jump_increase", result)
}

/// Consecutive placement using each instruction's stored length.
pub fn check_sigma_compact_unsafe(p: &Program, sigma: &SigmaMap, isa: &IsaParams) -> CheckReport {
    let result: Check = (|| {
        for (ppc, instr) in p.instructions().iter().enumerate() {
            let (Some(here), Some(next)) = (sigma.get(ppc), sigma.get(ppc + 1)) else {
                return fail(ppc, "missing entry");
            };
            let size = isa
                .instruction_size(instr, here.length)
                .or_else(|e| fail(ppc, e.to_string()))?;
            if next.address != here.address + size as Address {
                return fail(
                    ppc,
                    format!("next address {} != {} + {}", next.address, here.address, size),
                );
            }
        }
        Ok(())
    })();
    CheckReport::from_result("sigma_compact_unsafe", result)
}

/// Length the assembler would emit at `pc` for a branch to `target`: long if
/// forced, otherwise the shortest encoding that reaches.
pub fn encoded_length(isa: &IsaParams, kind: BranchKind, pc: Address, target: Address, forced_long: bool) -> JumpLength {
    if forced_long {
        JumpLength::Long
    } else {
        isa.jump_size(pc, target, kind)
    }
}

/// Consecutive placement where branch sizes are recomputed from the
/// distances under `sigma` itself. Only expected at a fixpoint.
pub fn check_sigma_compact(p: &Program, labels: &LabelMap, sigma: &SigmaMap, isa: &IsaParams) -> CheckReport {
    let result: Check = (|| {
        for (ppc, instr) in p.instructions().iter().enumerate() {
            let (Some(here), Some(next)) = (sigma.get(ppc), sigma.get(ppc + 1)) else {
                return fail(ppc, "missing entry");
            };
            let length = match instr.branch_kind() {
                Some(kind) => {
                    let target = sigma.address(target_ppc(labels, instr, ppc)?);
                    encoded_length(isa, kind, here.address, target, here.length == JumpLength::Long)
                }
                None => JumpLength::Short,
            };
            let size = isa.instruction_size(instr, length).or_else(|e| fail(ppc, e.to_string()))?;
            if next.address != here.address + size as Address {
                return fail(
                    ppc,
                    format!(
                        "{length} encoding needs {size} bytes but next address is {} (start {})",
                        next.address, here.address
                    ),
                );
            }
        }
        Ok(())
    })();
    CheckReport::from_result("sigma_compact", result)
}

/// Every stored branch length is admissible and justified by the distance
/// measured from the end of the instruction.
///
/// Short requires the short condition. Absolute requires the segment
/// condition, and a failing short condition when short is admissible. Long
/// requires that no shorter admissible encoding's condition holds. Forward
/// targets are read from `old_sigma` shifted by `added`, as during the fold.
pub fn check_sigma_safe(
    p: &Program,
    labels: &LabelMap,
    added: Address,
    old_sigma: &SigmaMap,
    sigma: &SigmaMap,
    isa: &IsaParams,
) -> CheckReport {
    let result: Check = (|| {
        for (ppc, instr) in p.instructions().iter().enumerate() {
            let Some(kind) = instr.branch_kind() else { continue };
            let t = target_ppc(labels, instr, ppc)?;
            let target = if t <= ppc { sigma.address(t) } else { old_sigma.address(t) + added };
            let pc_after = sigma.address(ppc + 1);
            let short_ok = isa.short_jump_cond(pc_after, target).0;
            let absolute_ok = isa.absolute_jump_cond(pc_after, target);
            let stored = sigma.length(ppc);
            match stored {
                JumpLength::Short => {
                    if kind.is_call() {
                        return fail(ppc, "call stored as short");
                    }
                    if !short_ok {
                        return fail(ppc, format!("short jump from {pc_after} cannot reach {target}"));
                    }
                }
                JumpLength::Absolute => {
                    if kind.is_relative_only() {
                        return fail(ppc, "conditional stored as absolute");
                    }
                    if !absolute_ok {
                        return fail(ppc, format!("absolute jump from {pc_after} leaves the segment of {target}"));
                    }
                    if kind.is_admissible(JumpLength::Short) && short_ok {
                        return fail(ppc, format!("absolute jump from {pc_after} to {target} is in short range"));
                    }
                }
                JumpLength::Long => {
                    if kind.is_admissible(JumpLength::Short) && short_ok {
                        return fail(ppc, format!("long jump from {pc_after} to {target} is in short range"));
                    }
                    if kind.is_admissible(JumpLength::Absolute) && absolute_ok {
                        return fail(ppc, format!("long jump from {pc_after} to {target} stays in its segment"));
                    }
                }
            }
        }
        Ok(())
    })();
    CheckReport::from_result("sigma_safe", result)
}

/// The final property: the program starts at 0, every instruction is placed
/// right after its predecessor using the size the assembler will emit, and
/// addresses strictly increase except for an end address that wrapped to 0
/// because the program fills memory exactly.
pub fn check_specification(p: &Program, labels: &LabelMap, policy: &FinalPolicy, isa: &IsaParams) -> CheckReport {
    let n = p.len();
    let result: Check = (|| {
        if policy.len() != n {
            return fail(0, format!("policy covers {} instructions, program has {n}", policy.len()));
        }
        if policy.address(0) != 0 {
            return fail(0, format!("program starts at {} instead of 0", policy.address(0)));
        }
        for (ppc, instr) in p.instructions().iter().enumerate() {
            let pc = policy.address(ppc) as Address;
            let length = match instr.branch_kind() {
                Some(kind) => {
                    let target = policy.address(target_ppc(labels, instr, ppc)?) as Address;
                    encoded_length(isa, kind, pc, target, policy.forced_long(ppc))
                }
                None => JumpLength::Short,
            };
            let size = isa.instruction_size(instr, length).or_else(|e| fail(ppc, e.to_string()))?;
            let expected = ((pc + size as Address) % isa.memory_size()) as u16;
            let next = policy.address(ppc + 1);
            if next != expected {
                return fail(ppc, format!("next address {next} != {pc} + {size}"));
            }
            let wrapped_end = ppc + 1 == n && next == 0;
            if !(policy.address(ppc) < next || wrapped_end) {
                return fail(ppc, format!("address {next} does not follow {pc}"));
            }
        }
        Ok(())
    })();
    CheckReport::from_result("specification", result)
}

/// Links `added` to the change between two iterations: nothing added means
/// every address is unchanged, and unchanged lengths mean nothing was added.
pub fn check_policy_equal(p: &Program, old: &SigmaMap, sigma: &SigmaMap, added: Address) -> CheckReport {
    let n = p.len();
    let result: Check = (|| {
        if added == 0 {
            if let Some(ppc) = (0..=n).find(|&i| old.address(i) != sigma.address(i)) {
                return fail(
                    ppc,
                    format!("nothing added but address moved {} -> {}", old.address(ppc), sigma.address(ppc)),
                );
            }
        }
        let same_lengths = (0..=n).all(|i| old.length(i) == sigma.length(i));
        if same_lengths && added != 0 {
            return fail(n, format!("no length changed but {added} bytes added"));
        }
        Ok(())
    })();
    CheckReport::from_result("policy_equal", result)
}
