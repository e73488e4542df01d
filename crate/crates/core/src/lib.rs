//! Continual learning with anchored low-rank representation interventions.
//!
//! A frozen toy transformer ([`backbone`]) is adapted to a stream of tasks
//! only through low-rank residual-stream edits ([`loreft`]). Each incoming
//! task is briefly warmed up and routed to a group of similar tasks by
//! comparing output distributions ([`router`]), trained against a frozen
//! snapshot of that group under a forward-KL penalty, possibly evicted to a
//! fresh group, and merged back ([`trainer`]). [`metrics`] keeps the
//! per-task score matrix and [`pipeline`] runs the whole stream.
//!
//! The crate is `no_std` (with `alloc`) when built without the `std`
//! feature; file formats and the command line live in `craft-cli`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod loreft;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod router;
pub mod tasks;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Tensor, Var};
pub use backbone::{BackboneConfig, FrozenBackbone, HookSet};
pub use error::{Error, Result};
pub use loreft::{Intervention, InterventionSnapshot, LayerIntervention, StreamSpec};
pub use metrics::EvalMatrix;
pub use router::{Decision, GroupState, RoutingDecision, RouterParams};
pub use tasks::{Example, TaskInstance, TaskKind};
pub use trainer::{TrainConfig, TrainTrace};

/// 64-bit FNV-1a, used for weight checksums.
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.write(&x.to_bits().to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64::new()
    }
}
