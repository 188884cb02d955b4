//! Cache-enabled mobility management for dual-mode mmW/µW small-cell networks.
//!
//! The crate covers beam-coverage geometry, mmW caching rates, device cache
//! accounting, a per-MUE handover state machine, the two-period handover
//! matching game, verification oracles and the experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod caching;
pub mod geometry;
pub mod handover;
pub mod matching;
pub mod oracle;
pub mod quad;
pub mod radio;
pub mod scenario;
