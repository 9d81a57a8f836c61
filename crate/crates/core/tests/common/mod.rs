//! Deterministic random programs shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relax51::isa::{Address, BranchKind, Condition, IsaParams, JumpLength};
use relax51::policy::{initial_sigma, SigmaMap};
use relax51::program::{LabelMap, Program, PseudoInstruction};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub max_len: usize,
    pub max_branches: usize,
    /// Percentage of large fillers, outside the short-range profile.
    pub large_percent: u32,
}

pub const CORPUS: Shape = Shape { max_len: 200, max_branches: 40, large_percent: 5 };
pub const SMALL: Shape = Shape { max_len: 30, max_branches: 8, large_percent: 20 };

fn filler_size(rng: &mut ChaCha8Rng, profile: u32, large_percent: u32) -> u32 {
    let roll = rng.gen_range(0..100);
    match profile {
        // spans hover around the short range
        0 => rng.gen_range(1..=24),
        1 if roll < large_percent => rng.gen_range(200..=1500),
        _ if roll < large_percent => rng.gen_range(50..=400),
        _ if roll < 85 => rng.gen_range(1..=3),
        _ => rng.gen_range(4..=40),
    }
}

fn branch_kind(rng: &mut ChaCha8Rng) -> BranchKind {
    match rng.gen_range(0..10) {
        0..=4 => BranchKind::Jump,
        5..=6 => BranchKind::Call,
        _ => {
            let cond = *[Condition::Jz, Condition::Jnz, Condition::Jc, Condition::Jnc, Condition::Cjne]
                .choose(rng)
                .unwrap();
            let short_size = if rng.gen_bool(0.15) { Some(3) } else { None };
            BranchKind::Conditional { cond, short_size }
        }
    }
}

enum Slot {
    Branch(BranchKind, usize),
    Filler(u32),
}

fn assemble(slots: &[Slot]) -> Program {
    let instructions = slots
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let instr = match *slot {
                Slot::Branch(kind, t) => PseudoInstruction::jump(kind, format!("L{t}")),
                Slot::Filler(size) => PseudoInstruction::other("nop", size),
            };
            instr.labelled(format!("L{i}"))
        })
        .collect();
    Program::new(instructions).unwrap()
}

/// A program with every instruction labelled `L<i>`. Branch targets are
/// mostly nearby so all three lengths occur. Some programs are shifted by a
/// leading filler that puts a branch end or a target just below a 2 KB
/// segment boundary, where growth moves it across.
pub fn gen_program(rng: &mut ChaCha8Rng, shape: Shape) -> Program {
    let n = rng.gen_range(1..=shape.max_len);
    let branches = rng.gen_range(0..=shape.max_branches.min(n));
    let profile = rng.gen_range(0..3);
    let mut is_branch = vec![false; n];
    for i in rand::seq::index::sample(rng, n, branches) {
        is_branch[i] = true;
    }
    let slots: Vec<Slot> = (0..n)
        .map(|i| {
            if is_branch[i] {
                let t = if rng.gen_bool(0.6) {
                    let lo = i.saturating_sub(12);
                    let hi = (i + 12).min(n - 1);
                    rng.gen_range(lo..=hi)
                } else {
                    rng.gen_range(0..n)
                };
                Slot::Branch(branch_kind(rng), t)
            } else {
                Slot::Filler(filler_size(rng, profile, shape.large_percent))
            }
        })
        .collect();
    let p = assemble(&slots);
    if branches == 0 || n + 1 > shape.max_len || !rng.gen_bool(0.4) {
        return p;
    }

    let isa = IsaParams::mcs51();
    let lo = initial_sigma(&p, &isa).unwrap();
    let b = p.branch_indices().nth(rng.gen_range(0..branches)).unwrap();
    let Slot::Branch(_, t) = slots[b] else { unreachable!() };
    let anchor = if rng.gen_bool(0.5) { lo.address(b) + isa.absolute_size as Address } else { lo.address(t) };
    let segment = isa.segment_size();
    let below = rng.gen_range(1..=12);
    let pad = (2 * segment - anchor % segment - below) % segment;
    let shifted: Vec<Slot> = std::iter::once(Slot::Filler(pad.max(1) as u32))
        .chain(slots.into_iter().map(|s| match s {
            Slot::Branch(kind, t) => Slot::Branch(kind, t + 1),
            f => f,
        }))
        .collect();
    assemble(&shifted)
}

pub fn corpus(seed: u64, count: usize, shape: Shape) -> Vec<Program> {
    let mut r = rng(seed);
    (0..count).map(|_| gen_program(&mut r, shape)).collect()
}

/// Some branch in `sigma` is not long.
pub fn nec_plus_ultra(p: &Program, sigma: &SigmaMap) -> bool {
    p.branch_indices().any(|ppc| sigma.length(ppc) != JumpLength::Long)
}

fn long_layout(p: &Program, isa: &IsaParams) -> Vec<Address> {
    let mut pc = 0;
    let mut out = vec![0];
    for instr in p.instructions() {
        pc += isa.instruction_size(instr, JumpLength::Long).unwrap() as Address;
        out.push(pc);
    }
    out
}

/// Every feasible layout lies between the all-minimal and the all-long one.
/// When, for every branch with an absolute form, the segment of its
/// post-instruction address and the segment of its target are the same in
/// both extremes, absolute reachability cannot depend on the layout and the
/// least fixed point is optimal.
pub fn non_pathological(p: &Program, labels: &LabelMap, isa: &IsaParams) -> bool {
    let lo = initial_sigma(p, isa).unwrap();
    let hi = long_layout(p, isa);
    let seg = |a: Address| (a & (isa.memory_size() - 1)) >> isa.segment_offset_bits;
    let abs = isa.absolute_size as Address;
    p.branch_indices().all(|ppc| {
        let instr = &p.instructions()[ppc];
        if !instr.branch_kind().unwrap().is_admissible(JumpLength::Absolute) {
            return true;
        }
        let t = labels.target_of(instr).unwrap();
        seg(lo.address(ppc) + abs) == seg(hi[ppc] + abs) && seg(lo.address(t)) == seg(hi[t])
    })
}
