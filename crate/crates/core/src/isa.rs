//! The MCS-51 branch model: jump lengths, reachability conditions, and
//! encoding sizes.
//!
//! The 8051 has three unconditional branch forms:
//!
//! | form | bytes | cycles | reach                                  |
//! |------|-------|--------|----------------------------------------|
//! | SJMP | 2     | 2      | -128..=127 bytes from the next pc      |
//! | AJMP | 2     | 2      | anywhere in the same 2 KB segment      |
//! | LJMP | 3     | 3      | the whole 64 KB address space          |
//!
//! Calls only exist in absolute and long form; conditionals only exist in
//! short form and must be expanded into a small branch sequence when the
//! target is out of range.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A byte address. Addresses are natural numbers while a layout is being
/// computed and only get truncated to 16 bits once a policy is final.
pub type Address = u64;

/// Encoding choice for a branch instruction.
///
/// The derived order is the `jmpleq` order: `Short < Absolute < Long`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpLength {
    Short,
    Absolute,
    Long,
}

impl JumpLength {
    pub const ALL: [JumpLength; 3] = [JumpLength::Short, JumpLength::Absolute, JumpLength::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            JumpLength::Short => "short",
            JumpLength::Absolute => "absolute",
            JumpLength::Long => "long",
        }
    }
}

impl fmt::Display for JumpLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `a` is no longer than `b`.
pub fn jmpleq(a: JumpLength, b: JumpLength) -> bool {
    a <= b
}

/// Combine a branch's previous length with a freshly computed one so that
/// encodings never shrink between iterations.
///
/// This is the order join except for one pair: a branch that was absolute and
/// now only needs a short jump becomes long. Keeping it absolute would be
/// wrong when the short jump crosses a segment boundary.
pub fn max_length(old: JumpLength, new: JumpLength) -> JumpLength {
    match (old, new) {
        (JumpLength::Absolute, JumpLength::Short) => JumpLength::Long,
        _ => old.max(new),
    }
}

/// Conditional branch mnemonics understood by the assembler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Jz,
    Jnz,
    Jc,
    Jnc,
    /// Compare and jump if not equal. Has no inverse instruction.
    Cjne,
}

impl Condition {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Condition::Jz => "jz",
            Condition::Jnz => "jnz",
            Condition::Jc => "jc",
            Condition::Jnc => "jnc",
            Condition::Cjne => "cjne",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Condition> {
        Some(match s {
            "jz" => Condition::Jz,
            "jnz" => Condition::Jnz,
            "jc" => Condition::Jc,
            "jnc" => Condition::Jnc,
            "cjne" => Condition::Cjne,
            _ => return None,
        })
    }

    pub fn inverse(self) -> Option<Condition> {
        match self {
            Condition::Jz => Some(Condition::Jnz),
            Condition::Jnz => Some(Condition::Jz),
            Condition::Jc => Some(Condition::Jnc),
            Condition::Jnc => Some(Condition::Jc),
            Condition::Cjne => None,
        }
    }

    pub fn is_negatable(self) -> bool {
        self.inverse().is_some()
    }

    pub fn opcode(self) -> u8 {
        match self {
            Condition::Jz => 0x60,
            Condition::Jnz => 0x70,
            Condition::Jc => 0x40,
            Condition::Jnc => 0x50,
            Condition::Cjne => 0xB5,
        }
    }
}

/// What a branch does, independent of how far it reaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Jump,
    Call,
    Conditional {
        cond: Condition,
        /// Size of the short form if it differs from the ISA default.
        short_size: Option<u32>,
    },
}

impl BranchKind {
    pub fn conditional(cond: Condition) -> BranchKind {
        BranchKind::Conditional { cond, short_size: None }
    }

    /// Encodings that exist for this kind, shortest first.
    pub fn admissible(self) -> &'static [JumpLength] {
        match self {
            BranchKind::Jump => &[JumpLength::Short, JumpLength::Absolute, JumpLength::Long],
            BranchKind::Call => &[JumpLength::Absolute, JumpLength::Long],
            BranchKind::Conditional { .. } => &[JumpLength::Short, JumpLength::Long],
        }
    }

    pub fn is_admissible(self, length: JumpLength) -> bool {
        self.admissible().contains(&length)
    }

    pub fn minimal_length(self) -> JumpLength {
        self.admissible()[0]
    }

    pub fn is_call(self) -> bool {
        matches!(self, BranchKind::Call)
    }

    /// Only PC-relative forms exist (no absolute encoding).
    pub fn is_relative_only(self) -> bool {
        matches!(self, BranchKind::Conditional { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("{length} encoding is not available for {kind:?}")]
    Inadmissible { kind: BranchKind, length: JumpLength },
    #[error("invalid ISA parameters: {0}")]
    InvalidParams(String),
    #[error("unknown ISA `{0}` (the only built-in ISA is mcs51)")]
    UnknownIsa(String),
}

/// Size, timing and reach constants of the branch instructions.
///
/// `IsaParams::mcs51()` is the only built-in set. A TOML parameters file can
/// override individual fields; every field is optional there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsaParams {
    pub name: String,
    pub address_bits: u32,
    pub segment_offset_bits: u32,
    pub short_min: i64,
    pub short_max: i64,
    pub short_size: u32,
    pub absolute_size: u32,
    pub long_size: u32,
    pub short_cycles: u32,
    pub absolute_cycles: u32,
    pub long_cycles: u32,
    /// Default size of a conditional branch's short form.
    pub conditional_size: u32,
}

impl Default for IsaParams {
    fn default() -> Self {
        IsaParams::mcs51()
    }
}

impl IsaParams {
    pub fn mcs51() -> IsaParams {
        IsaParams {
            name: "mcs51".to_string(),
            address_bits: 16,
            segment_offset_bits: 11,
            short_min: -128,
            short_max: 127,
            short_size: 2,
            absolute_size: 2,
            long_size: 3,
            short_cycles: 2,
            absolute_cycles: 2,
            long_cycles: 3,
            conditional_size: 2,
        }
    }

    pub fn by_name(name: &str) -> Result<IsaParams, IsaError> {
        match name {
            "mcs51" => Ok(IsaParams::mcs51()),
            other => Err(IsaError::UnknownIsa(other.to_string())),
        }
    }

    /// Parse a parameters file. Missing fields keep their MCS-51 values.
    pub fn from_toml_str(text: &str) -> Result<IsaParams, IsaError> {
        let params: IsaParams =
            toml::from_str(text).map_err(|e| IsaError::InvalidParams(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), IsaError> {
        let bad = |msg: &str| Err(IsaError::InvalidParams(msg.to_string()));
        if self.address_bits != 16 {
            return bad("address_bits must be 16");
        }
        if self.segment_offset_bits == 0 || self.segment_offset_bits >= self.address_bits {
            return bad("segment_offset_bits must be in 1..address_bits");
        }
        if self.short_min > 0 || self.short_max < 0 {
            return bad("short range must contain 0");
        }
        if self.short_size == 0 || self.absolute_size == 0 || self.conditional_size == 0 {
            return bad("encoding sizes must be at least 1");
        }
        // Branches may only grow between iterations, so sizes must too.
        if !(self.short_size <= self.long_size && self.absolute_size <= self.long_size) {
            return bad("long_size must be at least short_size and absolute_size");
        }
        Ok(())
    }

    /// Bytes of addressable code memory (2^16).
    pub fn memory_size(&self) -> Address {
        1 << self.address_bits
    }

    pub fn segment_size(&self) -> Address {
        1 << self.segment_offset_bits
    }

    /// Whether a relative jump ending at `pc_after` reaches `target`.
    ///
    /// The displacement is a plain signed difference, without wraparound.
    pub fn short_jump_cond(&self, pc_after: Address, target: Address) -> (bool, i64) {
        let displacement = target as i64 - pc_after as i64;
        let in_range = (self.short_min..=self.short_max).contains(&displacement);
        (in_range, displacement)
    }

    /// Whether `pc_after` and `target` lie in the same segment, i.e. agree on
    /// the top `address_bits - segment_offset_bits` bits of their 16-bit value.
    pub fn absolute_jump_cond(&self, pc_after: Address, target: Address) -> bool {
        let mask = self.memory_size() - 1;
        (pc_after & mask) >> self.segment_offset_bits == (target & mask) >> self.segment_offset_bits
    }

    /// Condition for `length` at an instruction starting at `pc`, evaluated
    /// at `pc` plus that encoding's own size.
    pub fn length_fits(&self, kind: BranchKind, length: JumpLength, pc: Address, target: Address) -> bool {
        let Ok(size) = self.branch_size(kind, length) else {
            return false;
        };
        let pc_after = pc + size as Address;
        match length {
            JumpLength::Short => self.short_jump_cond(pc_after, target).0,
            JumpLength::Absolute => self.absolute_jump_cond(pc_after, target),
            JumpLength::Long => true,
        }
    }

    /// The shortest admissible encoding for `kind` that reaches `target`
    /// from an instruction starting at `pc`.
    pub fn jump_size(&self, pc: Address, target: Address, kind: BranchKind) -> JumpLength {
        kind.admissible()
            .iter()
            .copied()
            .find(|&length| self.length_fits(kind, length, pc, target))
            .unwrap_or(JumpLength::Long)
    }

    fn conditional_short_size(&self, short_size: Option<u32>) -> u32 {
        short_size.unwrap_or(self.conditional_size)
    }

    /// Encoded size of a branch. Long conditionals are expanded: an inverted
    /// branch over an LJMP when the inverse exists, otherwise branch, SJMP
    /// and LJMP.
    pub fn branch_size(&self, kind: BranchKind, length: JumpLength) -> Result<u32, IsaError> {
        if !kind.is_admissible(length) {
            return Err(IsaError::Inadmissible { kind, length });
        }
        Ok(match (kind, length) {
            (BranchKind::Conditional { cond, short_size }, length) => {
                let short = self.conditional_short_size(short_size);
                match length {
                    JumpLength::Short => short,
                    _ if cond.is_negatable() => short + self.long_size,
                    _ => short + self.short_size + self.long_size,
                }
            }
            (_, JumpLength::Short) => self.short_size,
            (_, JumpLength::Absolute) => self.absolute_size,
            (_, JumpLength::Long) => self.long_size,
        })
    }

    /// Execution cycles of the branch encoding, summed over every instruction
    /// of an expansion.
    pub fn branch_cycles(&self, kind: BranchKind, length: JumpLength) -> Result<u32, IsaError> {
        if !kind.is_admissible(length) {
            return Err(IsaError::Inadmissible { kind, length });
        }
        Ok(match (kind, length) {
            (BranchKind::Conditional { cond, .. }, length) => match length {
                JumpLength::Short => self.short_cycles,
                _ if cond.is_negatable() => self.short_cycles + self.long_cycles,
                _ => 2 * self.short_cycles + self.long_cycles,
            },
            (_, JumpLength::Short) => self.short_cycles,
            (_, JumpLength::Absolute) => self.absolute_cycles,
            (_, JumpLength::Long) => self.long_cycles,
        })
    }

    /// Size of any pseudo-instruction. Non-branches ignore `length`.
    pub fn instruction_size(
        &self,
        instr: &crate::program::PseudoInstruction,
        length: JumpLength,
    ) -> Result<u32, IsaError> {
        match instr.branch_kind() {
            Some(kind) => self.branch_size(kind, length),
            None => Ok(instr.declared_size().unwrap_or(0)),
        }
    }

    /// True when the byte layouts of the MCS-51 encoder apply.
    pub fn has_mcs51_encoding(&self) -> bool {
        let reference = IsaParams::mcs51();
        self.segment_offset_bits == reference.segment_offset_bits
            && self.short_size == reference.short_size
            && self.absolute_size == reference.absolute_size
            && self.long_size == reference.long_size
            && self.short_min >= i8::MIN as i64
            && self.short_max <= i8::MAX as i64
            && self.conditional_size >= 2
    }
}
