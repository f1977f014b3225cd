//! Engine configuration and the virtual-time cost model.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

/// Which allocator backs KV storage for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocatorKind {
    /// Block-paged allocation with sharing and copy-on-write.
    Paged,
    /// Contiguous reservation sized to the exact final length.
    Oracle,
    /// Contiguous reservation with the output rounded up to a power of two.
    Pow2,
    /// Contiguous reservation sized to the model maximum.
    Max,
}

impl AllocatorKind {
    pub fn label(self) -> &'static str {
        match self {
            AllocatorKind::Paged => "paged",
            AllocatorKind::Oracle => "oracle",
            AllocatorKind::Pow2 => "pow2",
            AllocatorKind::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "paged" => Ok(AllocatorKind::Paged),
            "oracle" => Ok(AllocatorKind::Oracle),
            "pow2" => Ok(AllocatorKind::Pow2),
            "max" => Ok(AllocatorKind::Max),
            other => Err(format!("unknown allocator '{other}'")),
        }
    }
}

/// How preempted groups are recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreemptionPolicy {
    /// Move the group's blocks to the secondary pool and back.
    Swap,
    /// Drop the blocks and regenerate the KV in one prompt-phase pass.
    Recompute,
}

impl PreemptionPolicy {
    pub fn label(self) -> &'static str {
        match self {
            PreemptionPolicy::Swap => "swap",
            PreemptionPolicy::Recompute => "recompute",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "swap" => Ok(PreemptionPolicy::Swap),
            "recompute" => Ok(PreemptionPolicy::Recompute),
            other => Err(format!("unknown policy '{other}'")),
        }
    }
}

/// Coefficients mapping one iteration's work to virtual seconds. Defaults
/// put the simulated system in a memory-bound regime at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Fixed per-iteration overhead, seconds.
    pub c0: f64,
    /// Seconds per prompt token processed.
    pub c_prompt: f64,
    /// Seconds per decode token processed.
    pub c_decode: f64,
    /// Seconds per KV position read by decode attention (also charges
    /// block-copy traffic).
    pub c_kv_read: f64,
    /// Per-block transfer latency floor for swaps, seconds.
    pub swap_floor: f64,
    /// Interconnect bandwidth for swap traffic, bytes per second.
    pub pcie_bw: f64,
    /// Nominal element width used for byte accounting, bytes. The kernels
    /// compute in f64; capacity arithmetic models a 2-byte representation.
    pub elem_width: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c0: 2e-3,
            c_prompt: 5e-6,
            c_decode: 20e-6,
            c_kv_read: 0.1e-6,
            swap_floor: 50e-6,
            pcie_bw: 16e9,
            elem_width: 2,
        }
    }
}

impl CostModel {
    /// KV bytes per token: key and value vectors across every layer at the
    /// hidden width, at the nominal element width.
    pub fn bytes_per_token_kv(&self, model: &ModelConfig) -> usize {
        2 * model.hidden() * model.num_layers * self.elem_width
    }

    pub fn validate(&self) -> Result<(), String> {
        let coeffs = [
            self.c0,
            self.c_prompt,
            self.c_decode,
            self.c_kv_read,
            self.swap_floor,
        ];
        if coeffs.iter().any(|c| *c < 0.0) || self.pcie_bw <= 0.0 {
            return Err("cost coefficients must be nonnegative with positive bandwidth".into());
        }
        Ok(())
    }

    /// Cost of moving `blocks` blocks of `block_size` tokens across the
    /// interconnect: a per-block latency floor plus a bandwidth term.
    pub fn swap_cost(&self, blocks: usize, block_size: usize, model: &ModelConfig) -> f64 {
        let bytes = blocks * block_size * self.bytes_per_token_kv(model);
        self.swap_floor * blocks as f64 + bytes as f64 / self.pcie_bw
    }
}

/// Everything a run needs besides the trace itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub block_size: usize,
    pub gpu_pool_blocks: usize,
    pub cpu_pool_blocks: usize,
    pub allocator: AllocatorKind,
    pub policy: PreemptionPolicy,
    /// Free blocks `can_allocate` keeps in reserve; `None` means 1% of the
    /// pool (minimum one block).
    pub watermark: Option<usize>,
    pub cost: CostModel,
    /// Cap on prompt + decode tokens batched per iteration; `None` means
    /// memory-only limits.
    pub max_batched_tokens: Option<usize>,
    /// Block sharing across sequences (fork/copy-on-write/prefix reuse).
    /// Disabling it makes fork physically duplicate blocks, which is the
    /// twin run used to measure sharing savings.
    pub sharing: bool,
    /// Rank beam candidates by length-normalized cumulative logprob.
    /// Candidates stay length-synchronized, so this cannot alter
    /// selection; off by default.
    pub beam_length_norm: bool,
    /// Length of a provider prefix registered before the run; every
    /// request's prompt is the prefix followed by its own tokens. 0 for
    /// none.
    pub shared_prefix_len: usize,
    /// Seed for synthesizing prefix and prompt token ids.
    pub prompt_seed: u64,
    /// Stress knob: preempt the latest running group every N iterations
    /// regardless of memory pressure.
    pub force_preempt_every: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            block_size: 16,
            gpu_pool_blocks: 1024,
            cpu_pool_blocks: 1024,
            allocator: AllocatorKind::Paged,
            policy: PreemptionPolicy::Recompute,
            watermark: None,
            cost: CostModel::default(),
            max_batched_tokens: None,
            sharing: true,
            beam_length_norm: false,
            shared_prefix_len: 0,
            prompt_seed: 0,
            force_preempt_every: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        self.cost.validate()?;
        if self.block_size < 1 {
            return Err("block_size must be >= 1".into());
        }
        if self.gpu_pool_blocks < 1 || self.cpu_pool_blocks < 1 {
            return Err("pools must hold at least one block".into());
        }
        if self.shared_prefix_len >= self.model.max_seq_len {
            return Err("shared prefix must leave room for a suffix".into());
        }
        Ok(())
    }

    /// Total KV slots in the primary pool.
    pub fn gpu_pool_slots(&self) -> usize {
        self.gpu_pool_blocks * self.block_size
    }

    /// Derive a config with a different block size holding the slot
    /// capacity fixed, for block-size sweeps.
    pub fn with_block_size_same_capacity(&self, block_size: usize) -> Self {
        let slots = self.gpu_pool_slots();
        let cpu_slots = self.cpu_pool_blocks * self.block_size;
        let mut cfg = self.clone();
        cfg.block_size = block_size;
        cfg.gpu_pool_blocks = (slots / block_size).max(1);
        cfg.cpu_pool_blocks = (cpu_slots / block_size).max(1);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_bytes_per_token_for_large_model_dims() {
        // A 40-layer model with hidden size 5120 at 2 bytes/element needs
        // 2 * 5120 * 40 * 2 = 819200 bytes (800 KB) per token.
        let model = ModelConfig {
            vocab_size: 50272,
            num_layers: 40,
            num_heads: 40,
            head_dim: 128,
            max_seq_len: 2048,
            weight_seed: 0,
            layer_norm: false,
        };
        let cost = CostModel::default();
        assert_eq!(cost.bytes_per_token_kv(&model), 819_200);
        assert_eq!(cost.bytes_per_token_kv(&model), 800 * 1024);
    }

    #[test]
    fn block_size_resize_preserves_slot_capacity() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.gpu_pool_slots(), 16384);
        for b in [1usize, 4, 16, 64, 128] {
            let derived = cfg.with_block_size_same_capacity(b);
            assert_eq!(derived.gpu_pool_slots(), 16384, "block size {b}");
        }
    }

    #[test]
    fn default_config_is_valid() {
        EngineConfig::default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = EngineConfig {
            block_size: 8,
            allocator: AllocatorKind::Pow2,
            policy: PreemptionPolicy::Swap,
            ..EngineConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: EngineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
