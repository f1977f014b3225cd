//! Token selection: greedy argmax, temperature sampling over per-sequence
//! seeded streams, beam-search candidate ranking, and the shared-prefix
//! registry.

use crate::block_manager::{BlockManager, TableId};
use crate::rng::SplitMix64;
use crate::types::{SeqId, TokenId};

/// Argmax with lowest-index tie-break.
pub fn step_greedy(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// Natural-log softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = z.ln();
    logits.iter().map(|l| l - max - log_z).collect()
}

/// Sample from `softmax(logits / temperature)` using the sequence's own
/// stream, advancing it by exactly one draw.
pub fn step_sample(logits: &[f64], temperature: f64, rng: &mut SplitMix64) -> TokenId {
    assert!(temperature > 0.0, "temperature must be > 0");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return TokenId(i as u32);
        }
    }
    // Rounding pushed u to the boundary; last token wins.
    TokenId(logits.len() as u32 - 1)
}

/// One continuation candidate under consideration by beam search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamCandidate {
    /// Index into the group's current sequence list.
    pub parent: usize,
    pub token: TokenId,
    pub cumulative_logprob: f64,
}

/// Rank all `k * |V|` continuations and keep the top `k`.
///
/// `scored[c]` holds candidate `c`'s log-softmax over the vocabulary; its
/// cumulative logprob is added to every continuation. Ties break by higher
/// score, then lower parent sequence id, then lower token id, so the result
/// is identical across platforms.
///
/// `normalize_by` divides every ranking score by the candidate length,
/// which is the optional length-normalization knob. Candidates always hold
/// the same number of tokens, so this cannot change the selection; the
/// knob exists for configurations that rank with normalized scores.
pub fn beam_top_k(
    scored: &[(SeqId, f64, Vec<f64>)],
    k: usize,
    normalize_by: Option<f64>,
) -> Vec<BeamCandidate> {
    let mut all: Vec<(f64, f64, SeqId, usize, u32)> = Vec::new();
    for (parent_idx, (seq_id, cum, lsm)) in scored.iter().enumerate() {
        for (tok, lp) in lsm.iter().enumerate() {
            let score = cum + lp;
            let rank = match normalize_by {
                Some(len) => score / len,
                None => score,
            };
            all.push((rank, score, *seq_id, parent_idx, tok as u32));
        }
    }
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.2.cmp(&b.2))
            .then(a.4.cmp(&b.4))
    });
    all.truncate(k);
    all.into_iter()
        .map(|(_, score, _, parent, token)| BeamCandidate {
            parent,
            token: TokenId(token),
            cumulative_logprob: score,
        })
        .collect()
}

/// A provider-registered prompt prefix whose full blocks stay pinned in the
/// primary pool so later requests can map them instead of recomputing.
#[derive(Debug, Clone)]
pub struct PrefixRegistration {
    pub tokens: Vec<TokenId>,
    /// Table holding the pinned full blocks. The registry owns one
    /// reference per block until the prefix is manually unregistered.
    pub table: TableId,
    /// Shared positions: `full_blocks * block_size`. The tail of a prefix
    /// that does not end on a block boundary is not shared.
    pub shared_len: usize,
}

/// Registry of pinned prefixes. Eviction is manual only.
#[derive(Debug, Default)]
pub struct PrefixRegistry {
    entries: Vec<PrefixRegistration>,
}

impl PrefixRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, reg: PrefixRegistration) {
        self.entries.push(reg);
    }

    /// Longest registered prefix that the prompt starts with and that
    /// shares at least one full block.
    pub fn lookup(&self, prompt: &[TokenId]) -> Option<&PrefixRegistration> {
        self.entries
            .iter()
            .filter(|r| {
                r.shared_len > 0
                    && prompt.len() > r.shared_len
                    && prompt.starts_with(&r.tokens[..r.shared_len])
            })
            .max_by_key(|r| r.shared_len)
    }

    pub fn registrations(&self) -> &[PrefixRegistration] {
        &self.entries
    }

    /// Drop a registration, releasing the pinned blocks.
    pub fn unregister(&mut self, index: usize, mgr: &mut BlockManager) -> usize {
        let reg = self.entries.remove(index);
        mgr.free(reg.table)
    }
}

/// Run one parallel-sampling request to completion on a dedicated engine:
/// one prefill, `n - 1` forks of the prompt table, per-sample seeded
/// streams. Returns the `n` finished token streams.
pub fn run_parallel_sampling(
    cfg: &crate::config::EngineConfig,
    prompt: Vec<TokenId>,
    n: usize,
    temperature: f64,
    output_len: usize,
    sampling_seed: u64,
) -> Vec<Vec<TokenId>> {
    crate::engine::run_single_group(
        cfg,
        prompt,
        crate::types::DecodingConfig::sample(n, temperature, output_len),
        sampling_seed,
    )
}

/// Run one beam-search request to completion on a dedicated engine,
/// returning the top-`k` finished streams ordered best-first.
pub fn run_beam_search(
    cfg: &crate::config::EngineConfig,
    prompt: Vec<TokenId>,
    k: usize,
    output_len: usize,
) -> Vec<Vec<TokenId>> {
    crate::engine::run_single_group(
        cfg,
        prompt,
        crate::types::DecodingConfig::beam(k, output_len),
        0,
    )
}
