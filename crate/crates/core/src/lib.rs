//! Block-paged KV cache management for autoregressive transformer serving,
//! at desk scale and on the CPU.
//!
//! The crate provides:
//! - a virtual-memory-style block manager with reference counting,
//!   copy-on-write sharing, and swap bookkeeping ([`block_manager`]);
//! - exact block-wise attention over non-contiguous storage, checked
//!   against contiguous references ([`attention`]);
//! - a seeded toy transformer decoder so cache correctness is observable
//!   end to end ([`model`]);
//! - decoding algorithms layered on fork/append/free: greedy, sampling,
//!   beam search, shared prefixes ([`decoding`], [`engine`]);
//! - an iteration-level FCFS scheduler with swap or recompute preemption
//!   ([`scheduler`]);
//! - contiguous-reservation baselines over a buddy allocator
//!   ([`baselines`]);
//! - workload synthesis and a discrete-event serving simulator
//!   ([`workload`], [`simulator`]).

pub mod attention;
pub mod baselines;
pub mod block_manager;
pub mod config;
pub mod decoding;
pub mod engine;
pub mod model;
pub mod rng;
pub mod scheduler;
pub mod simulator;
pub mod types;
pub mod workload;

pub use block_manager::{BlockManager, BlockTable, TableId};
pub use config::{AllocatorKind, CostModel, EngineConfig, PreemptionPolicy};
pub use engine::Engine;
pub use model::{ModelConfig, TinyModel};
pub use simulator::{run_simulation, SimMetrics};
pub use types::{DecodingConfig, DecodingKind, SequenceGroup, TokenId};
