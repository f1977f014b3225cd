//! Shared domain vocabulary: tokens, sequences, sequence groups, decoding
//! configs, and lifecycle states.

use serde::{Deserialize, Serialize};

use crate::block_manager::TableId;

/// Opaque token identifier in `[0, vocab_size)`. There is no tokenizer;
/// workloads synthesize token ids directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

/// Unique sequence id, assigned from a monotonically increasing counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqId(pub u64);

/// Unique request (sequence group) id, assigned in admission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u64);

/// Lifecycle state of a sequence.
///
/// Legal transitions: Waiting→Running, Running→{SwappedOut,
/// PreemptedForRecompute, Finished}, SwappedOut→Running, and
/// PreemptedForRecompute→Waiting. Nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqStatus {
    Waiting,
    Running,
    SwappedOut,
    PreemptedForRecompute,
    Finished,
}

impl SeqStatus {
    pub fn can_transition(self, to: SeqStatus) -> bool {
        use SeqStatus::*;
        matches!(
            (self, to),
            (Waiting, Running)
                | (Running, SwappedOut)
                | (Running, PreemptedForRecompute)
                | (Running, Finished)
                | (SwappedOut, Running)
                | (PreemptedForRecompute, Waiting)
        )
    }
}

/// One decoding stream: the prompt, everything generated so far, and the
/// block-table handle while the sequence is resident.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub seq_id: SeqId,
    pub prompt: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    status: SeqStatus,
    pub block_table: Option<TableId>,
    /// Sum of natural-log token probabilities; used for beam ranking.
    pub cumulative_logprob: f64,
}

impl Sequence {
    pub fn new(seq_id: SeqId, prompt: Vec<TokenId>) -> Self {
        Self {
            seq_id,
            prompt,
            generated: Vec::new(),
            status: SeqStatus::Waiting,
            block_table: None,
            cumulative_logprob: 0.0,
        }
    }

    pub fn status(&self) -> SeqStatus {
        self.status
    }

    /// Transition to `to`, panicking on an illegal edge or on a state that
    /// violates the table-handle invariant (a handle is held exactly while
    /// Running or SwappedOut).
    pub fn set_status(&mut self, to: SeqStatus) {
        assert!(
            self.status.can_transition(to),
            "illegal status transition {:?} -> {:?} for seq {:?}",
            self.status,
            to,
            self.seq_id,
        );
        self.status = to;
        self.assert_table_invariant();
    }

    pub fn assert_table_invariant(&self) {
        let should_hold = matches!(self.status, SeqStatus::Running | SeqStatus::SwappedOut);
        assert_eq!(
            self.block_table.is_some(),
            should_hold,
            "seq {:?} in {:?} has block_table={:?}",
            self.seq_id,
            self.status,
            self.block_table,
        );
    }

    /// `|prompt| + |generated|`.
    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    /// Prompt followed by generated tokens.
    pub fn all_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(&self.prompt);
        out.extend_from_slice(&self.generated);
        out
    }

    /// Number of KV slots this sequence currently needs: one per prompt
    /// token plus one per generated token except the newest (whose KV is
    /// written by the next decode step).
    pub fn kv_len(&self) -> usize {
        if self.generated.is_empty() {
            self.prompt.len()
        } else {
            self.total_len() - 1
        }
    }
}

/// Which decoding algorithm a request runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodingKind {
    Greedy,
    Sample { n: usize, temperature: f64 },
    Beam { k: usize },
}

/// Decoding configuration for one request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub kind: DecodingKind,
    pub max_new_tokens: usize,
    pub eos_token: TokenId,
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            kind: DecodingKind::Greedy,
            max_new_tokens,
            eos_token: TokenId(0),
        }
    }

    pub fn sample(n: usize, temperature: f64, max_new_tokens: usize) -> Self {
        Self {
            kind: DecodingKind::Sample { n, temperature },
            max_new_tokens,
            eos_token: TokenId(0),
        }
    }

    pub fn beam(k: usize, max_new_tokens: usize) -> Self {
        Self {
            kind: DecodingKind::Beam { k },
            max_new_tokens,
            eos_token: TokenId(0),
        }
    }

    /// Number of sequences the group runs once decoding starts.
    pub fn num_sequences(&self) -> usize {
        match self.kind {
            DecodingKind::Greedy => 1,
            DecodingKind::Sample { n, .. } => n,
            DecodingKind::Beam { k } => k,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            DecodingKind::Sample { n, temperature } => {
                if n < 1 {
                    return Err("sample count must be >= 1".into());
                }
                if temperature <= 0.0 {
                    return Err("temperature must be > 0".into());
                }
            }
            DecodingKind::Beam { k } => {
                if k < 1 {
                    return Err("beam width must be >= 1".into());
                }
            }
            DecodingKind::Greedy => {}
        }
        if self.max_new_tokens < 1 {
            return Err("max_new_tokens must be >= 1".into());
        }
        Ok(())
    }
}

/// Gang-scheduled set of sequences belonging to one request. All members
/// share the same prompt and are preempted or resumed together.
#[derive(Debug, Clone)]
pub struct SequenceGroup {
    pub group_id: GroupId,
    pub arrival_time: f64,
    pub sequences: Vec<Sequence>,
    pub decoding: DecodingConfig,
    pub sampling_seed: u64,
}

impl SequenceGroup {
    pub fn prompt(&self) -> &[TokenId] {
        &self.sequences[0].prompt
    }

    pub fn assert_shared_prompt(&self) {
        let p = self.sequences[0].prompt.clone();
        for s in &self.sequences {
            assert_eq!(s.prompt, p, "group {:?} sequences disagree on prompt", self.group_id);
        }
    }
}

/// Number of logical blocks needed to hold `seq_len` KV slots with
/// `block_size` slots per block: `ceil(seq_len / block_size)`, 0 for an
/// empty sequence.
pub fn num_logical_blocks(seq_len: usize, block_size: usize) -> usize {
    assert!(block_size >= 1, "block_size must be >= 1");
    seq_len.div_ceil(block_size)
}
