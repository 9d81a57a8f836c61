//! Branch displacement optimization for MCS-51 assembly.
//!
//! Branches are sized by a least fixed point: start every branch at its
//! shortest encoding and grow only the ones that cannot reach their target,
//! until nothing changes. See the guide in `book/` for a walkthrough.

pub mod baselines;
pub mod cli;
pub mod dump;
pub mod encoder;
pub mod invariants;
pub mod isa;
pub mod policy;
pub mod program;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/jump-lengths.md")]
    mod jump_lengths {}
    #[doc = include_str!("../../../book/src/least-fixed-point.md")]
    mod least_fixed_point {}
    #[doc = include_str!("../../../book/src/invariants.md")]
    mod invariants {}
    #[doc = include_str!("../../../book/src/pathologies.md")]
    mod pathologies {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
