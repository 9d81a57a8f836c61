//! Pseudo-assembly programs: data model, text parser and label resolution.
//!
//! The input language has one instruction per line:
//!
//! ```text
//! line  := [ident ":"] instr | comment | blank
//! instr := "jmp" ident | "call" ident
//!        | ("jz" | "jnz" | "jc" | "jnc" | "cjne") ident [size]
//!        | mnemonic size
//! ```
//!
//! `sjmp`/`ajmp`/`ljmp` are accepted as spellings of `jmp` and
//! `acall`/`lcall` as spellings of `call`; the encoding is chosen by the
//! policy, not by the mnemonic. Any other mnemonic declares a non-branch
//! instruction of the given size in bytes. A label on a line of its own
//! belongs to the next instruction.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{BranchKind, Condition};

/// Upper bound on the number of instructions; pseudo-addresses are 16-bit.
pub const MAX_INSTRUCTIONS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    Jump { kind: BranchKind, dest: String },
    Other { mnemonic: String, size: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoInstruction {
    pub label: Option<String>,
    pub body: Body,
}

impl PseudoInstruction {
    pub fn jump(kind: BranchKind, dest: impl Into<String>) -> PseudoInstruction {
        PseudoInstruction { label: None, body: Body::Jump { kind, dest: dest.into() } }
    }

    pub fn other(mnemonic: impl Into<String>, size: u32) -> PseudoInstruction {
        PseudoInstruction { label: None, body: Body::Other { mnemonic: mnemonic.into(), size } }
    }

    pub fn labelled(mut self, label: impl Into<String>) -> PseudoInstruction {
        self.label = Some(label.into());
        self
    }

    pub fn branch_kind(&self) -> Option<BranchKind> {
        match self.body {
            Body::Jump { kind, .. } => Some(kind),
            Body::Other { .. } => None,
        }
    }

    pub fn is_branch(&self) -> bool {
        self.branch_kind().is_some()
    }

    pub fn destination(&self) -> Option<&str> {
        match &self.body {
            Body::Jump { dest, .. } => Some(dest),
            Body::Other { .. } => None,
        }
    }

    pub fn declared_size(&self) -> Option<u32> {
        match self.body {
            Body::Other { size, .. } => Some(size),
            Body::Jump { .. } => None,
        }
    }
}

impl fmt::Display for PseudoInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(label) = &self.label {
            write!(f, "{label}: ")?;
        }
        match &self.body {
            Body::Jump { kind, dest } => match kind {
                BranchKind::Jump => write!(f, "jmp {dest}"),
                BranchKind::Call => write!(f, "call {dest}"),
                BranchKind::Conditional { cond, short_size } => {
                    write!(f, "{} {dest}", cond.mnemonic())?;
                    if let Some(size) = short_size {
                        write!(f, " {size}")?;
                    }
                    Ok(())
                }
            },
            Body::Other { mnemonic, size } => write!(f, "{mnemonic} {size}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("pseudo-address {ppc} is out of range (program has {len} instructions)")]
    OutOfRange { ppc: usize, len: usize },
    #[error("program has {0} instructions, more than fit in a 16-bit pseudo-address")]
    TooManyInstructions(usize),
    #[error("instruction {ppc} declares size 0")]
    ZeroSize { ppc: usize },
}

/// An ordered list of pseudo-instructions.
#[derive(Clone, Debug, Default)]
pub struct Program {
    instructions: Vec<PseudoInstruction>,
    /// 1-based source line per instruction, for diagnostics.
    lines: Vec<usize>,
}

impl Program {
    pub fn new(instructions: Vec<PseudoInstruction>) -> Result<Program, ProgramError> {
        let lines = (1..=instructions.len()).collect();
        Program::with_lines(instructions, lines)
    }

    fn with_lines(instructions: Vec<PseudoInstruction>, lines: Vec<usize>) -> Result<Program, ProgramError> {
        if instructions.len() >= MAX_INSTRUCTIONS {
            return Err(ProgramError::TooManyInstructions(instructions.len()));
        }
        if let Some(ppc) = instructions.iter().position(|i| i.declared_size() == Some(0)) {
            return Err(ProgramError::ZeroSize { ppc });
        }
        Ok(Program { instructions, lines })
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn instructions(&self) -> &[PseudoInstruction] {
        &self.instructions
    }

    pub fn fetch(&self, ppc: usize) -> Result<&PseudoInstruction, ProgramError> {
        self.instructions
            .get(ppc)
            .ok_or(ProgramError::OutOfRange { ppc, len: self.len() })
    }

    pub fn line_of(&self, ppc: usize) -> Option<usize> {
        self.lines.get(ppc).copied()
    }

    pub fn branch_count(&self) -> usize {
        self.instructions.iter().filter(|i| i.is_branch()).count()
    }

    /// Pseudo-addresses of the branch instructions, in order.
    pub fn branch_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.instructions.iter().enumerate().filter(|(_, i)| i.is_branch()).map(|(ppc, _)| ppc)
    }
}

/// Prints the program in canonical source form; parsing the output yields the
/// same instructions.
impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for instr in &self.instructions {
            writeln!(f, "{instr}")?;
        }
        Ok(())
    }
}

/// Returns the `ppc`-th instruction of `p`.
pub fn fetch_pseudo_instruction(p: &Program, ppc: usize) -> Result<&PseudoInstruction, ProgramError> {
    p.fetch(ppc)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("invalid label `{0}`")]
    BadLabel(String),
    #[error("`{0}` needs a destination label")]
    MissingDestination(String),
    #[error("invalid destination `{0}`")]
    BadDestination(String),
    #[error("`{0}` needs a byte size")]
    MissingSize(String),
    #[error("invalid size `{0}`")]
    BadSize(String),
    #[error("size must be at least {min}, got {got}")]
    SizeTooSmall { min: u32, got: u32 },
    #[error("unexpected `{0}`")]
    TrailingInput(String),
    #[error("instruction already has label `{0}`")]
    SecondLabel(String),
    #[error("label `{0}` is not followed by an instruction")]
    DanglingLabel(String),
    #[error("too many instructions")]
    TooManyInstructions,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn parse_size(tok: &str, min: u32) -> Result<u32, ParseErrorKind> {
    let size: u32 = tok.parse().map_err(|_| ParseErrorKind::BadSize(tok.to_string()))?;
    if size < min {
        return Err(ParseErrorKind::SizeTooSmall { min, got: size });
    }
    Ok(size)
}

fn parse_body(text: &str) -> Result<Body, ParseErrorKind> {
    let mut tokens = text.split_whitespace();
    let mnemonic = tokens.next().unwrap_or_default().to_ascii_lowercase();
    let operand = tokens.next();

    let destination = |op: Option<&str>| -> Result<String, ParseErrorKind> {
        let op = op.ok_or_else(|| ParseErrorKind::MissingDestination(mnemonic.clone()))?;
        if !is_ident(op) {
            return Err(ParseErrorKind::BadDestination(op.to_string()));
        }
        Ok(op.to_string())
    };

    let body = match mnemonic.as_str() {
        "jmp" | "sjmp" | "ajmp" | "ljmp" => Body::Jump { kind: BranchKind::Jump, dest: destination(operand)? },
        "call" | "acall" | "lcall" => Body::Jump { kind: BranchKind::Call, dest: destination(operand)? },
        m => match Condition::from_mnemonic(m) {
            Some(cond) => {
                let dest = destination(operand)?;
                let short_size = tokens.next().map(|t| parse_size(t, 2)).transpose()?;
                Body::Jump { kind: BranchKind::Conditional { cond, short_size }, dest }
            }
            None => {
                if !is_ident(m) {
                    return Err(ParseErrorKind::TrailingInput(m.to_string()));
                }
                let tok = operand.ok_or_else(|| ParseErrorKind::MissingSize(mnemonic.clone()))?;
                Body::Other { mnemonic: mnemonic.clone(), size: parse_size(tok, 1)? }
            }
        },
    };
    if let Some(extra) = tokens.next() {
        return Err(ParseErrorKind::TrailingInput(extra.to_string()));
    }
    Ok(body)
}

/// Parse pseudo-assembly text into a program. Labels are not resolved here;
/// see [`build_label_map`].
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut instructions = Vec::new();
    let mut lines = Vec::new();
    let mut pending: Option<(String, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| ParseError { line, kind };
        let code = raw.split(';').next().unwrap_or_default().trim();
        if code.is_empty() {
            continue;
        }
        let (label, rest) = match code.split_once(':') {
            Some((label, rest)) => {
                let label = label.trim();
                if !is_ident(label) {
                    return Err(err(ParseErrorKind::BadLabel(label.to_string())));
                }
                (Some(label.to_string()), rest.trim())
            }
            None => (None, code),
        };
        if let Some(label) = label {
            if let Some((previous, _)) = &pending {
                return Err(err(ParseErrorKind::SecondLabel(previous.clone())));
            }
            pending = Some((label, line));
        }
        if rest.is_empty() {
            continue;
        }
        let body = parse_body(rest).map_err(err)?;
        if instructions.len() + 1 >= MAX_INSTRUCTIONS {
            return Err(err(ParseErrorKind::TooManyInstructions));
        }
        instructions.push(PseudoInstruction { label: pending.take().map(|(l, _)| l), body });
        lines.push(line);
    }

    if let Some((label, line)) = pending {
        return Err(ParseError { line, kind: ParseErrorKind::DanglingLabel(label) });
    }
    // Sizes were validated while parsing and the count is bounded above.
    Ok(Program::with_lines(instructions, lines).expect("validated while parsing"))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("line {line}: label `{label}` already defined on line {first_line}")]
    Duplicate { label: String, line: usize, first_line: usize },
    #[error("line {line}: jump to undefined label `{label}`")]
    Undefined { label: String, line: usize },
}

/// Label name to pseudo-address.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap {
    map: BTreeMap<String, usize>,
}

impl LabelMap {
    pub fn get(&self, label: &str) -> Option<usize> {
        self.map.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Pseudo-address targeted by the branch `instr`, if it is one.
    pub fn target_of(&self, instr: &PseudoInstruction) -> Option<usize> {
        instr.destination().and_then(|d| self.get(d))
    }
}

/// Collect label definitions and check that every jump destination exists.
pub fn build_label_map(p: &Program) -> Result<LabelMap, LabelError> {
    let mut map = BTreeMap::new();
    for (ppc, instr) in p.instructions().iter().enumerate() {
        if let Some(label) = &instr.label {
            if let Some(&first) = map.get(label) {
                return Err(LabelError::Duplicate {
                    label: label.clone(),
                    line: p.line_of(ppc).unwrap_or(ppc + 1),
                    first_line: p.line_of(first).unwrap_or(first + 1),
                });
            }
            map.insert(label.clone(), ppc);
        }
    }
    for (ppc, instr) in p.instructions().iter().enumerate() {
        if let Some(dest) = instr.destination() {
            if !map.contains_key(dest) {
                return Err(LabelError::Undefined {
                    label: dest.to_string(),
                    line: p.line_of(ppc).unwrap_or(ppc + 1),
                });
            }
        }
    }
    Ok(LabelMap { map })
}
