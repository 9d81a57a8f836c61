//! MCS-51 machine code emission and a decoding back-check.
//!
//! Branch layouts (`t` is the target, `rel` a signed byte relative to the end
//! of the instruction that carries it):
//!
//! | encoding                  | bytes                                        |
//! |---------------------------|----------------------------------------------|
//! | SJMP                      | `80 rel`                                     |
//! | AJMP                      | `(t[10:8] << 5) \| 01`, `t[7:0]`             |
//! | LJMP                      | `02 t[15:8] t[7:0]`                          |
//! | ACALL                     | `(t[10:8] << 5) \| 11`, `t[7:0]`             |
//! | LCALL                     | `12 t[15:8] t[7:0]`                          |
//! | conditional, short        | `op [00..] rel`                              |
//! | negatable, long           | `inv-op [00..] 03`, LJMP t                   |
//! | non-negatable, long       | `op [00..] 02`, `80 03`, LJMP t              |
//!
//! Conditional opcodes are JZ 60, JNZ 70, JC 40, JNC 50 and CJNE B5. Operand
//! filler bytes (present when a conditional is wider than two bytes) and
//! non-branch instructions are zero bytes.

use thiserror::Error;

use crate::invariants::{encoded_length, CheckReport};
use crate::isa::{Address, BranchKind, Condition, IsaError, IsaParams, JumpLength};
use crate::policy::FinalPolicy;
use crate::program::{LabelMap, Program};

const SJMP: u8 = 0x80;
const AJMP: u8 = 0x01;
const LJMP: u8 = 0x02;
const ACALL: u8 = 0x11;
const LCALL: u8 = 0x12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("the MCS-51 encoder does not support ISA parameters `{0}`")]
    UnsupportedIsa(String),
    #[error("policy covers {policy} instructions but the program has {program}")]
    PolicyMismatch { policy: usize, program: usize },
    #[error("jump at pseudo-address {ppc} targets undefined label `{label}`")]
    UndefinedLabel { ppc: usize, label: String },
    #[error("instruction {ppc} encodes to {actual} bytes but the policy reserves {expected}")]
    SizeMismatch { ppc: usize, expected: Address, actual: Address },
    #[error("instruction {ppc}: displacement {displacement} does not fit in a byte")]
    Displacement { ppc: usize, displacement: i64 },
    #[error(transparent)]
    Isa(#[from] IsaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSite {
    pub ppc: usize,
    pub address: Address,
    pub length: JumpLength,
}

/// A flat image starting at address 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineImage {
    pub bytes: Vec<u8>,
    pub branch_sites: Vec<BranchSite>,
}

fn rel8(ppc: usize, from: Address, to: Address) -> Result<u8, EncodeError> {
    let displacement = to as i64 - from as i64;
    i8::try_from(displacement)
        .map(|d| d as u8)
        .map_err(|_| EncodeError::Displacement { ppc, displacement })
}

fn page_opcode(base: u8, target: Address) -> u8 {
    (((target >> 8) & 0x07) as u8) << 5 | base
}

fn emit_branch(
    out: &mut Vec<u8>,
    ppc: usize,
    kind: BranchKind,
    length: JumpLength,
    pc: Address,
    target: Address,
    isa: &IsaParams,
) -> Result<(), EncodeError> {
    let hi = (target >> 8) as u8;
    let lo = target as u8;
    match (kind, length) {
        (BranchKind::Jump, JumpLength::Short) => {
            out.extend([SJMP, rel8(ppc, pc + 2, target)?]);
        }
        (BranchKind::Jump, JumpLength::Absolute) => out.extend([page_opcode(AJMP, target), lo]),
        (BranchKind::Jump, JumpLength::Long) => out.extend([LJMP, hi, lo]),
        (BranchKind::Call, JumpLength::Absolute) => out.extend([page_opcode(ACALL, target), lo]),
        (BranchKind::Call, JumpLength::Long) => out.extend([LCALL, hi, lo]),
        (BranchKind::Conditional { cond, .. }, length) => {
            let short = isa.branch_size(kind, JumpLength::Short)? as Address;
            let filler = short as usize - 2;
            match (length, cond.inverse()) {
                (JumpLength::Short, _) => {
                    out.push(cond.opcode());
                    out.extend(std::iter::repeat_n(0, filler));
                    out.push(rel8(ppc, pc + short, target)?);
                }
                (_, Some(inverse)) => {
                    out.push(inverse.opcode());
                    out.extend(std::iter::repeat_n(0, filler));
                    out.extend([3, LJMP, hi, lo]);
                }
                (_, None) => {
                    out.push(cond.opcode());
                    out.extend(std::iter::repeat_n(0, filler));
                    out.extend([2, SJMP, 3, LJMP, hi, lo]);
                }
            }
        }
        (kind, length) => return Err(IsaError::Inadmissible { kind, length }.into()),
    }
    Ok(())
}

/// Emit the program under `policy`.
///
/// Each branch uses the long form when the policy forces it, and otherwise
/// the shortest form that reaches its target at the addresses the policy
/// assigns.
pub fn encode_program(
    p: &Program,
    labels: &LabelMap,
    policy: &FinalPolicy,
    isa: &IsaParams,
) -> Result<MachineImage, EncodeError> {
    if !isa.has_mcs51_encoding() {
        return Err(EncodeError::UnsupportedIsa(isa.name.clone()));
    }
    if policy.len() != p.len() {
        return Err(EncodeError::PolicyMismatch { policy: policy.len(), program: p.len() });
    }
    let mut bytes = Vec::with_capacity(policy.total_bytes() as usize);
    let mut branch_sites = Vec::new();

    for (ppc, instr) in p.instructions().iter().enumerate() {
        let pc = bytes.len() as Address;
        if pc % isa.memory_size() != policy.address(ppc) as Address {
            return Err(EncodeError::SizeMismatch {
                ppc: ppc.saturating_sub(1),
                expected: policy.natural_address(ppc),
                actual: pc,
            });
        }
        match instr.branch_kind() {
            None => {
                let size = instr.declared_size().unwrap_or(0) as usize;
                bytes.resize(bytes.len() + size, 0);
            }
            Some(kind) => {
                let dest = instr.destination().unwrap_or_default();
                let t = labels
                    .get(dest)
                    .ok_or_else(|| EncodeError::UndefinedLabel { ppc, label: dest.to_string() })?;
                let target = policy.address(t) as Address;
                let length = encoded_length(isa, kind, pc, target, policy.forced_long(ppc));
                emit_branch(&mut bytes, ppc, kind, length, pc, target, isa)?;
                debug_assert_eq!(bytes.len() as Address - pc, isa.branch_size(kind, length)? as Address);
                branch_sites.push(BranchSite { ppc, address: pc, length });
            }
        }
    }
    let end = bytes.len() as Address;
    if end != policy.total_bytes() {
        return Err(EncodeError::SizeMismatch {
            ppc: p.len().saturating_sub(1),
            expected: policy.total_bytes(),
            actual: end,
        });
    }
    Ok(MachineImage { bytes, branch_sites })
}

/// A decoding of one branch site.
struct Decoded {
    target: Address,
}

fn wrap(a: Address) -> Address {
    a & 0xFFFF
}

fn relative(site_end: Address, rel: u8) -> Address {
    wrap((site_end as i64 + rel as i8 as i64) as Address)
}

fn decode_long(bytes: &[u8], at: usize, opcode: u8) -> Result<Address, String> {
    match bytes.get(at..at + 3) {
        Some([op, hi, lo]) if *op == opcode => Ok((*hi as Address) << 8 | *lo as Address),
        Some([op, ..]) => Err(format!("expected opcode {opcode:#04x} at {at:#06x}, found {op:#04x}")),
        _ => Err(format!("truncated instruction at {at:#06x}")),
    }
}

fn expect_byte(bytes: &[u8], at: usize, value: u8) -> Result<(), String> {
    match bytes.get(at) {
        Some(&b) if b == value => Ok(()),
        Some(&b) => Err(format!("expected {value:#04x} at {at:#06x}, found {b:#04x}")),
        None => Err(format!("image ends before {at:#06x}")),
    }
}

fn byte_at(bytes: &[u8], at: usize) -> Result<u8, String> {
    bytes.get(at).copied().ok_or_else(|| format!("image ends before {at:#06x}"))
}

fn decode_site(bytes: &[u8], site: &BranchSite, kind: BranchKind, isa: &IsaParams) -> Result<Decoded, String> {
    let at = site.address as usize;
    let size = isa.branch_size(kind, site.length).map_err(|e| e.to_string())? as usize;
    let site_end = site.address + size as Address;
    let target = match (kind, site.length) {
        (BranchKind::Jump, JumpLength::Short) => {
            expect_byte(bytes, at, SJMP)?;
            relative(site_end, byte_at(bytes, at + 1)?)
        }
        (BranchKind::Jump | BranchKind::Call, JumpLength::Absolute) => {
            let base = if kind.is_call() { ACALL } else { AJMP };
            let op = byte_at(bytes, at)?;
            if op & 0x1F != base {
                return Err(format!("expected page opcode {base:#04x} at {at:#06x}, found {op:#04x}"));
            }
            let page = (op >> 5) as Address;
            (wrap(site_end) & 0xF800) | page << 8 | byte_at(bytes, at + 1)? as Address
        }
        (BranchKind::Jump, JumpLength::Long) => decode_long(bytes, at, LJMP)?,
        (BranchKind::Call, JumpLength::Long) => decode_long(bytes, at, LCALL)?,
        (BranchKind::Conditional { cond, .. }, length) => {
            let short = isa.branch_size(kind, JumpLength::Short).map_err(|e| e.to_string())? as usize;
            let opcode = match (length, cond.inverse()) {
                (JumpLength::Long, Some(inverse)) => inverse.opcode(),
                _ => cond.opcode(),
            };
            expect_byte(bytes, at, opcode)?;
            for filler in at + 1..at + short - 1 {
                expect_byte(bytes, filler, 0)?;
            }
            let rel = byte_at(bytes, at + short - 1)?;
            let branch_end = site.address + short as Address;
            if length == JumpLength::Short {
                relative(branch_end, rel)
            } else {
                decode_expansion(bytes, site, cond, short, relative(branch_end, rel))?
            }
        }
        (kind, length) => return Err(format!("{length} encoding is not available for {kind:?}")),
    };
    Ok(Decoded { target })
}

/// Follow both paths of an expanded conditional. The taken path must reach
/// the LJMP and the fall-through path must leave the expansion.
fn decode_expansion(
    bytes: &[u8],
    site: &BranchSite,
    cond: Condition,
    short: usize,
    branch_target: Address,
) -> Result<Address, String> {
    let at = site.address as usize;
    let ljmp_at = if cond.is_negatable() { at + short } else { at + short + 2 };
    let end = wrap(ljmp_at as Address + 3);
    if cond.is_negatable() {
        // inverted branch skips the LJMP
        if branch_target != end {
            return Err(format!("inverted branch at {at:#06x} lands on {branch_target:#06x}, not {end:#06x}"));
        }
    } else {
        if branch_target != wrap(ljmp_at as Address) {
            return Err(format!("branch at {at:#06x} lands on {branch_target:#06x}, not the LJMP"));
        }
        expect_byte(bytes, at + short, SJMP)?;
        let skip = relative(at as Address + short as Address + 2, byte_at(bytes, at + short + 1)?);
        if skip != end {
            return Err(format!("fall-through SJMP at {:#06x} lands on {skip:#06x}, not {end:#06x}", at + short));
        }
    }
    decode_long(bytes, ljmp_at, LJMP)
}

/// Decode every branch from the raw bytes and check that it lands on the
/// address the policy gives its label.
pub fn verify_targets(
    img: &MachineImage,
    p: &Program,
    labels: &LabelMap,
    policy: &FinalPolicy,
    isa: &IsaParams,
) -> CheckReport {
    const NAME: &str = "verify_targets";
    if img.bytes.len() as Address != policy.total_bytes() {
        return CheckReport::violated(
            NAME,
            p.len(),
            format!("image is {} bytes, policy expects {}", img.bytes.len(), policy.total_bytes()),
        );
    }
    let expected_sites = p.branch_count();
    if img.branch_sites.len() != expected_sites {
        return CheckReport::violated(
            NAME,
            0,
            format!("{} branch sites recorded, program has {expected_sites}", img.branch_sites.len()),
        );
    }
    for (site, ppc) in img.branch_sites.iter().zip(p.branch_indices()) {
        let instr = &p.instructions()[ppc];
        let kind = instr.branch_kind().expect("branch index");
        if site.ppc != ppc || site.address != policy.address(ppc) as Address {
            return CheckReport::violated(NAME, ppc, "branch site does not match the policy");
        }
        let Some(t) = labels.target_of(instr) else {
            return CheckReport::violated(NAME, ppc, "undefined label");
        };
        let want = policy.address(t) as Address;
        match decode_site(&img.bytes, site, kind, isa) {
            Err(detail) => return CheckReport::violated(NAME, ppc, detail),
            Ok(Decoded { target }) if target != want => {
                return CheckReport::violated(
                    NAME,
                    ppc,
                    format!("decoded target {target:#06x}, label is at {want:#06x}"),
                )
            }
            Ok(_) => {}
        }
    }
    CheckReport::ok(NAME)
}
