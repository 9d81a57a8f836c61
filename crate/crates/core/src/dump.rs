//! Line-delimited JSON dumps of policies and fixpoint iterations.
//!
//! A policy dump has one record per pseudo-address `0..=n` followed by a
//! summary record:
//!
//! ```text
//! {"ppc":0,"address":0,"address_hex":"0x0000","length":null,"forced_long":false}
//! {"ppc":1,"address":1,"address_hex":"0x0001","length":"short","forced_long":false}
//! {"ppc":2,"address":3,"address_hex":"0x0003","length":null,"forced_long":false}
//! {"iterations_used":1,"total_bytes":3}
//! ```
//!
//! `length` is the emitted length for branches and `null` otherwise.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariants::encoded_length;
use crate::isa::{Address, IsaParams, JumpLength};
use crate::policy::{FinalPolicy, SigmaMap};
use crate::program::{LabelMap, Program};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaRecord {
    pub ppc: usize,
    pub address: u16,
    pub address_hex: String,
    pub length: Option<JumpLength>,
    pub forced_long: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRecord {
    pub iterations_used: usize,
    pub total_bytes: Address,
}

/// One pseudo-address of one map in a fixpoint run. `length` is the stored
/// length and `required` the shortest length that reaches the target at that
/// map's own addresses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationRecord {
    pub iteration: usize,
    pub ppc: usize,
    pub address: Address,
    pub address_hex: String,
    pub length: Option<JumpLength>,
    pub required: Option<JumpLength>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Sigma(SigmaRecord),
    Summary(SummaryRecord),
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: expected record for pseudo-address {expected}")]
    OutOfOrder { line: usize, expected: usize },
    #[error("missing summary record")]
    MissingSummary,
    #[error("line {line}: record after summary")]
    TrailingRecord { line: usize },
    #[error("address_hex `{0}` does not match address")]
    HexMismatch(String),
}

fn hex(address: Address) -> String {
    format!("{address:#06x}")
}

pub fn sigma_records(p: &Program, labels: &LabelMap, policy: &FinalPolicy, isa: &IsaParams) -> Vec<SigmaRecord> {
    (0..=policy.len())
        .map(|ppc| {
            let address = policy.address(ppc);
            let length = p.instructions().get(ppc).and_then(|instr| {
                let kind = instr.branch_kind()?;
                let target = policy.address(labels.target_of(instr)?) as Address;
                Some(encoded_length(isa, kind, address as Address, target, policy.forced_long(ppc)))
            });
            SigmaRecord {
                ppc,
                address,
                address_hex: hex(address as Address),
                length,
                forced_long: policy.forced_long(ppc),
            }
        })
        .collect()
}

pub fn write_sigma_dump(
    out: &mut impl Write,
    p: &Program,
    labels: &LabelMap,
    policy: &FinalPolicy,
    isa: &IsaParams,
) -> io::Result<()> {
    for record in sigma_records(p, labels, policy, isa) {
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    let summary = SummaryRecord { iterations_used: policy.iterations_used(), total_bytes: policy.total_bytes() };
    serde_json::to_writer(&mut *out, &summary)?;
    out.write_all(b"\n")
}

/// A dump read back from text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedDump {
    pub records: Vec<SigmaRecord>,
    pub summary: SummaryRecord,
}

impl ParsedDump {
    pub fn to_policy(&self) -> FinalPolicy {
        let n = self.records.len().saturating_sub(1);
        FinalPolicy::new(
            self.records.iter().map(|r| r.address).collect(),
            self.records[..n].iter().map(|r| r.forced_long).collect(),
            self.summary.iterations_used,
        )
    }

    pub fn lengths(&self) -> Vec<Option<JumpLength>> {
        self.records.iter().map(|r| r.length).collect()
    }
}

pub fn parse_sigma_dump(text: &str) -> Result<ParsedDump, DumpError> {
    let mut records = Vec::new();
    let mut summary = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(DumpError::TrailingRecord { line });
        }
        match serde_json::from_str(raw).map_err(|source| DumpError::Json { line, source })? {
            Line::Sigma(record) => {
                if record.ppc != records.len() {
                    return Err(DumpError::OutOfOrder { line, expected: records.len() });
                }
                if record.address_hex != hex(record.address as Address) {
                    return Err(DumpError::HexMismatch(record.address_hex));
                }
                records.push(record);
            }
            Line::Summary(s) => summary = Some(s),
        }
    }
    let summary = summary.ok_or(DumpError::MissingSummary)?;
    if records.is_empty() {
        return Err(DumpError::OutOfOrder { line: 1, expected: 0 });
    }
    Ok(ParsedDump { records, summary })
}

pub fn iteration_records(
    p: &Program,
    labels: &LabelMap,
    history: &[SigmaMap],
    isa: &IsaParams,
) -> Vec<IterationRecord> {
    let mut records = Vec::new();
    for (iteration, sigma) in history.iter().enumerate() {
        for ppc in 0..=p.len() {
            let instr = p.instructions().get(ppc);
            let branch = instr.and_then(|i| Some((i.branch_kind()?, labels.target_of(i)?)));
            let address = sigma.address(ppc);
            records.push(IterationRecord {
                iteration,
                ppc,
                address,
                address_hex: hex(address),
                length: branch.map(|_| sigma.length(ppc)),
                required: branch.map(|(kind, t)| isa.jump_size(address, sigma.address(t), kind)),
            });
        }
    }
    records
}

pub fn write_iteration_dump(
    out: &mut impl Write,
    p: &Program,
    labels: &LabelMap,
    history: &[SigmaMap],
    isa: &IsaParams,
) -> io::Result<()> {
    for record in iteration_records(p, labels, history, isa) {
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_iteration_dump(text: &str) -> Result<Vec<IterationRecord>, DumpError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| DumpError::Json { line: i + 1, source }))
        .collect()
}
