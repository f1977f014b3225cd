//! Execution engine: drives prompt and decode phases over the paged block
//! manager, applying one scheduler plan per iteration.
//!
//! Directive ordering inside an iteration matters: swap copies run first
//! (their gpu-side sources were freed by the manager but are not rewritten
//! until compute), then copy-on-write copies, then prompt-phase and
//! decode-phase computation. Nothing writes KV before all copies land.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{execute_cow, execute_swap, KvStorage};
use crate::block_manager::{BlockManager, TableId};
use crate::config::EngineConfig;
use crate::decoding::{
    beam_top_k, log_softmax, step_greedy, step_sample, PrefixRegistration, PrefixRegistry,
};
use crate::model::TinyModel;
use crate::rng::SplitMix64;
use crate::scheduler::{PreemptionRecord, PromptKind, Scheduler};
use crate::types::{
    DecodingConfig, DecodingKind, GroupId, SeqId, SeqStatus, Sequence, TokenId,
};

/// Salt mixed into a request seed to derive its prompt token stream.
pub const PROMPT_STREAM_SALT: u64 = 0x70726F6D70745F31;
/// Salt mixed into the engine prompt seed to derive shared-prefix tokens.
pub const PREFIX_STREAM_SALT: u64 = 0x7072656669785F31;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitError {
    #[error("prompt must be nonempty")]
    EmptyPrompt,
    #[error("prompt plus output exceeds max_seq_len")]
    TooLong,
    #[error("group cannot fit in the pool even alone (needs {needed} blocks, pool reserves {available})")]
    GroupTooLarge { needed: usize, available: usize },
    #[error("invalid decoding config: {0}")]
    BadDecoding(String),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("pool exhausted during a sharing-disabled fork; size the pool for duplicated blocks")]
    NoSharingPoolExhausted,
}

/// Runtime state of one request.
pub struct Group {
    pub id: GroupId,
    pub arrival_time: f64,
    pub decoding: DecodingConfig,
    pub sampling_seed: u64,
    pub prompt: Vec<TokenId>,
    /// Authoritative stop length; generation force-stops here.
    pub output_len: usize,
    pub seqs: Vec<Sequence>,
    /// Per-sample-index streams, seeded `sampling_seed + index`.
    sample_rngs: Vec<SplitMix64>,
    /// Shared-prefix attachment chosen at submission.
    pub attach: Option<(TableId, usize)>,
    finished: bool,
}

impl Group {
    pub fn table_ids(&self) -> Vec<TableId> {
        self.seqs.iter().filter_map(|s| s.block_table).collect()
    }

    /// Blocks needed so every sequence can append one slot.
    pub fn append_need(&self, mgr: &BlockManager) -> usize {
        self.seqs
            .iter()
            .filter_map(|s| s.block_table)
            .map(|t| mgr.append_need(t))
            .sum()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn generated_len(&self) -> usize {
        self.seqs.first().map_or(0, |s| s.generated.len())
    }

    /// Final token streams, one per sequence.
    pub fn outputs(&self) -> Vec<Vec<TokenId>> {
        self.seqs.iter().map(|s| s.generated.clone()).collect()
    }
}

/// Work accomplished in one iteration, for cost accounting and metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationStats {
    pub prompt_tokens: usize,
    pub decode_tokens: usize,
    /// Context positions read by decode-phase attention.
    pub kv_positions_read: usize,
    /// Positions moved by block copies (copy-on-write, no-sharing forks,
    /// baseline divergence copies).
    pub copy_positions: usize,
    pub cow_copies: usize,
    pub swap_out_blocks: usize,
    pub swap_in_blocks: usize,
    /// Prompt tokens recomputed for preemption recovery (also counted in
    /// `prompt_tokens`).
    pub recompute_tokens: usize,
    pub tokens_generated: usize,
    pub prompt_seqs: usize,
    pub decode_seqs: usize,
    pub preempted: Vec<PreemptionRecord>,
    pub finished: Vec<GroupId>,
    pub admitted: Vec<GroupId>,
    pub resumed: Vec<GroupId>,
}

pub struct Engine {
    cfg: EngineConfig,
    model: TinyModel,
    mgr: BlockManager,
    gpu_store: KvStorage,
    cpu_store: KvStorage,
    sched: Scheduler,
    groups: BTreeMap<GroupId, Group>,
    registry: PrefixRegistry,
    next_group: u64,
    next_seq: u64,
    iter_index: u64,
    pub total_cow_copies: u64,
    pub total_tokens_generated: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Self {
        cfg.validate().expect("valid engine config");
        let model = TinyModel::new(cfg.model.clone());
        let mgr = BlockManager::new(
            cfg.gpu_pool_blocks,
            cfg.cpu_pool_blocks,
            cfg.block_size,
            cfg.watermark,
        );
        let gpu_store = KvStorage::new(
            cfg.gpu_pool_blocks,
            cfg.model.num_layers,
            cfg.model.num_heads,
            cfg.model.head_dim,
            cfg.block_size,
        );
        let cpu_store = KvStorage::new(
            cfg.cpu_pool_blocks,
            cfg.model.num_layers,
            cfg.model.num_heads,
            cfg.model.head_dim,
            cfg.block_size,
        );
        let sched = Scheduler::new(cfg.policy, cfg.max_batched_tokens);
        let mut engine = Self {
            cfg,
            model,
            mgr,
            gpu_store,
            cpu_store,
            sched,
            groups: BTreeMap::new(),
            registry: PrefixRegistry::new(),
            next_group: 0,
            next_seq: 0,
            iter_index: 0,
            total_cow_copies: 0,
            total_tokens_generated: 0,
        };
        if engine.cfg.shared_prefix_len > 0 && engine.cfg.sharing {
            let tokens = engine.prefix_tokens();
            engine.register_prefix(tokens);
        }
        engine
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn manager(&self) -> &BlockManager {
        &self.mgr
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn group(&self, id: GroupId) -> &Group {
        &self.groups[&id]
    }

    pub fn groups(&self) -> impl Iterator<Item = &Group> {
        self.groups.values()
    }

    pub fn registry(&self) -> &PrefixRegistry {
        &self.registry
    }

    /// The shared-prefix token stream for this engine's configuration.
    pub fn prefix_tokens(&self) -> Vec<TokenId> {
        synth_tokens(
            self.cfg.prompt_seed ^ PREFIX_STREAM_SALT,
            self.cfg.shared_prefix_len,
            self.cfg.model.vocab_size,
        )
    }

    /// Pin a prompt prefix: prefill it once, keep its full blocks resident,
    /// and map them into any later prompt that starts with these tokens.
    pub fn register_prefix(&mut self, tokens: Vec<TokenId>) -> Option<&PrefixRegistration> {
        let block_size = self.cfg.block_size;
        if tokens.len() < block_size {
            return None; // nothing shareable below one full block
        }
        let table = self.mgr.allocate(tokens.len()).expect("prefix must fit the pool");
        self.mgr.assert_entries_writable(table, 0);
        self.model
            .prefill_paged(&tokens, 0, self.mgr.table(table), &mut self.gpu_store);
        self.mgr.truncate_to_full_blocks(table);
        let shared_len = (tokens.len() / block_size) * block_size;
        self.registry.insert(PrefixRegistration {
            tokens,
            table,
            shared_len,
        });
        self.registry.registrations().last()
    }

    /// Validate and enqueue one request. `output_len` is the authoritative
    /// stop length: generation force-stops once each sequence holds that
    /// many tokens.
    pub fn submit(
        &mut self,
        arrival_time: f64,
        prompt: Vec<TokenId>,
        decoding: DecodingConfig,
        sampling_seed: u64,
    ) -> Result<GroupId, SubmitError> {
        decoding.validate().map_err(SubmitError::BadDecoding)?;
        if prompt.is_empty() {
            return Err(SubmitError::EmptyPrompt);
        }
        let output_len = decoding.max_new_tokens;
        if prompt.len() + output_len > self.cfg.model.max_seq_len {
            return Err(SubmitError::TooLong);
        }
        // Worst-case residency without sharing: every sequence at full
        // length. A group that cannot fit alone can never be scheduled.
        let per_seq = self.mgr.blocks_needed(prompt.len() + output_len - 1);
        let needed = per_seq * decoding.num_sequences();
        let available = self.cfg.gpu_pool_blocks - self.mgr.watermark();
        if needed > available {
            return Err(SubmitError::GroupTooLarge { needed, available });
        }

        let id = GroupId(self.next_group);
        self.next_group += 1;
        let root = Sequence::new(self.alloc_seq_id(), prompt.clone());
        let sample_rngs = match decoding.kind {
            DecodingKind::Sample { n, .. } => (0..n as u64)
                .map(|i| SplitMix64::new(sampling_seed.wrapping_add(i)))
                .collect(),
            _ => Vec::new(),
        };
        let attach = if self.cfg.sharing {
            self.registry
                .lookup(&prompt)
                .map(|r| (r.table, r.shared_len))
        } else {
            None
        };
        self.groups.insert(
            id,
            Group {
                id,
                arrival_time,
                decoding,
                sampling_seed,
                prompt,
                output_len,
                seqs: vec![root],
                sample_rngs,
                attach,
                finished: false,
            },
        );
        self.sched.enqueue(id);
        Ok(id)
    }

    pub fn has_pending(&self) -> bool {
        self.sched.has_pending()
    }

    /// Execute one iteration. Returns `None` when there is nothing to do.
    pub fn step(&mut self) -> Result<Option<IterationStats>, EngineError> {
        if !self.sched.has_pending() {
            return Ok(None);
        }
        let force = self
            .cfg
            .force_preempt_every
            .is_some_and(|k| self.iter_index > 0 && self.iter_index.is_multiple_of(k));
        let plan = self.sched.schedule(&mut self.mgr, &mut self.groups, force);
        self.iter_index += 1;

        let mut stats = IterationStats {
            preempted: plan.preempted.clone(),
            admitted: plan.admitted.clone(),
            resumed: plan.resumed.clone(),
            ..Default::default()
        };
        for directive in &plan.swap_directives {
            execute_swap(&mut self.gpu_store, &mut self.cpu_store, directive);
            match directive.direction {
                crate::block_manager::SwapDirection::Out => {
                    stats.swap_out_blocks += directive.pairs.len()
                }
                crate::block_manager::SwapDirection::In => {
                    stats.swap_in_blocks += directive.pairs.len()
                }
            }
        }
        for directive in &plan.cow_directives {
            execute_cow(&mut self.gpu_store, *directive);
            stats.cow_copies += 1;
            stats.copy_positions += self.cfg.block_size;
        }
        self.total_cow_copies += plan.cow_directives.len() as u64;

        for &(gid, kind) in &plan.prompt_groups {
            match kind {
                PromptKind::Fresh => self.run_fresh_prefill(gid, &mut stats)?,
                PromptKind::Resume => self.run_recompute_prefill(gid, &mut stats)?,
            }
        }
        for &gid in &plan.decode_groups {
            self.run_decode(gid, &mut stats)?;
        }

        // Finished groups release their tables at the iteration boundary.
        let done: Vec<GroupId> = plan
            .prompt_groups
            .iter()
            .map(|(g, _)| *g)
            .chain(plan.decode_groups.iter().copied())
            .filter(|g| self.groups[g].generated_len() >= self.groups[g].output_len)
            .collect();
        for gid in done {
            let group = self.groups.get_mut(&gid).unwrap();
            for seq in &mut group.seqs {
                let table = seq.block_table.take().expect("finished while resident");
                self.mgr.free(table);
                seq.set_status(SeqStatus::Finished);
            }
            group.finished = true;
            self.sched.remove_finished(gid);
            stats.finished.push(gid);
        }
        self.total_tokens_generated += stats.tokens_generated as u64;
        Ok(Some(stats))
    }

    fn run_fresh_prefill(
        &mut self,
        gid: GroupId,
        stats: &mut IterationStats,
    ) -> Result<(), EngineError> {
        let group = &self.groups[&gid];
        let prompt = group.prompt.clone();
        let start = group.attach.map_or(0, |(_, shared)| shared);
        let table = group.seqs[0].block_table.expect("scheduler allocated the table");
        self.mgr.assert_entries_writable(table, start);
        let logits =
            self.model
                .prefill_paged(&prompt, start, self.mgr.table(table), &mut self.gpu_store);
        stats.prompt_tokens += prompt.len() - start;
        stats.prompt_seqs += 1;
        self.init_group_from_prefill(gid, logits, stats)
    }

    /// Prompt-phase pass over prompt plus generated tokens for every
    /// sequence of a recompute-resumed group, then one selection step.
    fn run_recompute_prefill(
        &mut self,
        gid: GroupId,
        stats: &mut IterationStats,
    ) -> Result<(), EngineError> {
        let n_seqs = self.groups[&gid].seqs.len();
        let mut logits_per_seq = Vec::with_capacity(n_seqs);
        for i in 0..n_seqs {
            let (tokens, table) = {
                let seq = &self.groups[&gid].seqs[i];
                (seq.all_tokens(), seq.block_table.expect("resumed with table"))
            };
            self.mgr.assert_entries_writable(table, 0);
            let logits =
                self.model
                    .prefill_paged(&tokens, 0, self.mgr.table(table), &mut self.gpu_store);
            stats.prompt_tokens += tokens.len();
            stats.recompute_tokens += tokens.len();
            stats.prompt_seqs += 1;
            logits_per_seq.push(logits);
        }
        self.advance_group(gid, logits_per_seq, stats)
    }

    /// Expand the root sequence after its prefill into the group's full
    /// sequence set and select each sequence's first token.
    fn init_group_from_prefill(
        &mut self,
        gid: GroupId,
        logits: Vec<f64>,
        stats: &mut IterationStats,
    ) -> Result<(), EngineError> {
        let kind = self.groups[&gid].decoding.kind;
        match kind {
            DecodingKind::Greedy => {
                let token = step_greedy(&logits);
                let group = self.groups.get_mut(&gid).unwrap();
                group.seqs[0].generated.push(token);
                stats.tokens_generated += 1;
            }
            DecodingKind::Sample { n, temperature } => {
                let root_table = self.groups[&gid].seqs[0].block_table.unwrap();
                // One prompt KV, n sequences: fork the table n-1 times.
                let mut tables = vec![root_table];
                for _ in 1..n {
                    tables.push(self.fork_table(root_table)?);
                }
                let prompt = self.groups[&gid].prompt.clone();
                let mut new_ids = Vec::with_capacity(n);
                for _ in 0..n {
                    new_ids.push(self.alloc_seq_id());
                }
                let group = self.groups.get_mut(&gid).unwrap();
                let mut seqs = Vec::with_capacity(n);
                for i in 0..n {
                    let mut seq = Sequence::new(new_ids[i], prompt.clone());
                    seq.block_table = Some(tables[i]);
                    seq.set_status(SeqStatus::Running);
                    let token = step_sample(&logits, temperature, &mut group.sample_rngs[i]);
                    seq.generated.push(token);
                    seqs.push(seq);
                }
                // The root sequence object is replaced by sample 0.
                group.seqs = seqs;
                stats.tokens_generated += n;
            }
            DecodingKind::Beam { k } => {
                let lsm = log_softmax(&logits);
                let group = &self.groups[&gid];
                let root_id = group.seqs[0].seq_id;
                let norm = self.beam_norm(group.seqs[0].generated.len());
                let picked = beam_top_k(&[(root_id, 0.0, lsm)], k, norm);
                self.apply_beam_selection(gid, &picked, stats)?;
            }
        }
        Ok(())
    }

    fn run_decode(&mut self, gid: GroupId, stats: &mut IterationStats) -> Result<(), EngineError> {
        let n_seqs = self.groups[&gid].seqs.len();
        let mut logits_per_seq = Vec::with_capacity(n_seqs);
        for i in 0..n_seqs {
            let (last, pos, table) = {
                let seq = &self.groups[&gid].seqs[i];
                (
                    *seq.generated.last().expect("decode implies prior tokens"),
                    seq.total_len() - 1,
                    seq.block_table.expect("running sequences hold tables"),
                )
            };
            {
                // The slot provisioned by append_slot must be exclusively
                // owned before the decode step writes into it.
                let entry = *self.mgr.table(table).last().unwrap();
                self.mgr.assert_writable(entry.pool, entry.block);
            }
            let logits =
                self.model
                    .decode_paged(last, pos, self.mgr.table(table), &mut self.gpu_store);
            stats.decode_tokens += 1;
            stats.kv_positions_read += pos + 1;
            stats.decode_seqs += 1;
            logits_per_seq.push(logits);
        }
        self.advance_group(gid, logits_per_seq, stats)
    }

    /// Consume one round of logits: append a token per sequence, or re-rank
    /// beam candidates with the block-level fork/free dance.
    fn advance_group(
        &mut self,
        gid: GroupId,
        logits_per_seq: Vec<Vec<f64>>,
        stats: &mut IterationStats,
    ) -> Result<(), EngineError> {
        let kind = self.groups[&gid].decoding.kind;
        match kind {
            DecodingKind::Greedy => {
                let token = step_greedy(&logits_per_seq[0]);
                self.groups.get_mut(&gid).unwrap().seqs[0].generated.push(token);
                stats.tokens_generated += 1;
            }
            DecodingKind::Sample { temperature, .. } => {
                let group = self.groups.get_mut(&gid).unwrap();
                for (i, logits) in logits_per_seq.iter().enumerate() {
                    let token = step_sample(logits, temperature, &mut group.sample_rngs[i]);
                    group.seqs[i].generated.push(token);
                }
                stats.tokens_generated += logits_per_seq.len();
            }
            DecodingKind::Beam { k } => {
                let scored: Vec<(SeqId, f64, Vec<f64>)> = {
                    let group = &self.groups[&gid];
                    group
                        .seqs
                        .iter()
                        .zip(&logits_per_seq)
                        .map(|(s, l)| (s.seq_id, s.cumulative_logprob, log_softmax(l)))
                        .collect()
                };
                let norm = self.beam_norm(self.groups[&gid].seqs[0].generated.len());
                let picked = beam_top_k(&scored, k, norm);
                self.apply_beam_selection(gid, &picked, stats)?;
            }
        }
        Ok(())
    }

    /// Replace the group's candidate set with the selected continuations.
    /// The first child of each surviving parent inherits its table; extra
    /// children fork it; dropped parents free theirs.
    fn apply_beam_selection(
        &mut self,
        gid: GroupId,
        picked: &[crate::decoding::BeamCandidate],
        stats: &mut IterationStats,
    ) -> Result<(), EngineError> {
        let n_parents = self.groups[&gid].seqs.len();
        let mut children_of: Vec<Vec<usize>> = vec![Vec::new(); n_parents];
        for (child_idx, cand) in picked.iter().enumerate() {
            children_of[cand.parent].push(child_idx);
        }
        // Fork tables for second and later children before any parent is
        // freed, so shared blocks never transiently drop to zero.
        let mut child_tables: Vec<Option<TableId>> = vec![None; picked.len()];
        for (parent_idx, children) in children_of.iter().enumerate() {
            let parent_table = self.groups[&gid].seqs[parent_idx].block_table.unwrap();
            for (nth, &child_idx) in children.iter().enumerate() {
                child_tables[child_idx] = Some(if nth == 0 {
                    parent_table
                } else {
                    self.fork_table(parent_table)?
                });
            }
        }
        let mut new_ids = Vec::with_capacity(picked.len());
        for _ in 0..picked.len() {
            new_ids.push(self.alloc_seq_id());
        }
        let group = self.groups.get_mut(&gid).unwrap();
        let mut new_seqs = Vec::with_capacity(picked.len());
        for (child_idx, cand) in picked.iter().enumerate() {
            let parent = &group.seqs[cand.parent];
            let mut seq = Sequence::new(new_ids[child_idx], parent.prompt.clone());
            seq.generated = parent.generated.clone();
            seq.generated.push(cand.token);
            seq.cumulative_logprob = cand.cumulative_logprob;
            seq.block_table = child_tables[child_idx];
            seq.set_status(SeqStatus::Running);
            new_seqs.push(seq);
        }
        // Dropped candidates release whatever blocks they owned privately.
        let dropped: Vec<TableId> = group
            .seqs
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| children_of[*i].is_empty())
            .map(|(_, s)| {
                let t = s.block_table.take().unwrap();
                s.set_status(SeqStatus::Finished);
                t
            })
            .collect();
        group.seqs = new_seqs;
        for t in dropped {
            self.mgr.free(t);
        }
        stats.tokens_generated += picked.len();
        Ok(())
    }

    /// Fork a table: refcount bump under sharing, physical duplication in
    /// the sharing-disabled twin configuration.
    fn fork_table(&mut self, parent: TableId) -> Result<TableId, EngineError> {
        if self.cfg.sharing {
            return Ok(self.mgr.fork(parent));
        }
        let slots = self.mgr.table(parent).filled_slots();
        let child = self
            .mgr
            .allocate(slots)
            .map_err(|_| EngineError::NoSharingPoolExhausted)?;
        let pairs: Vec<_> = {
            let src = self.mgr.table(parent).entries();
            let dst = self.mgr.table(child).entries();
            src.iter().zip(dst).map(|(a, b)| (a.block, b.block)).collect()
        };
        for (src, dst) in pairs {
            self.gpu_store.copy_block(src, dst);
        }
        Ok(child)
    }

    /// Length-normalization divisor for the next beam ranking, if enabled.
    fn beam_norm(&self, generated_so_far: usize) -> Option<f64> {
        self.cfg
            .beam_length_norm
            .then_some((generated_so_far + 1) as f64)
    }

    fn alloc_seq_id(&mut self) -> SeqId {
        let id = SeqId(self.next_seq);
        self.next_seq += 1;
        id
    }

    /// Snapshot the KV payloads backing a table, position-aligned: for each
    /// written slot, the raw key/value doubles of every layer and head.
    pub fn kv_snapshot(&self, table: TableId) -> Vec<f64> {
        let t = self.mgr.table(table);
        let cfg = &self.cfg.model;
        let mut out = Vec::new();
        for pos in 0..t.filled_slots() {
            let (entry, slot) = t.locate(pos, self.cfg.block_size);
            let store = match entry.pool {
                crate::block_manager::PoolKind::Gpu => &self.gpu_store,
                crate::block_manager::PoolKind::Cpu => &self.cpu_store,
            };
            for layer in 0..cfg.num_layers {
                for head in 0..cfg.num_heads {
                    out.extend_from_slice(store.key(entry.block, slot, layer, head));
                    out.extend_from_slice(store.value(entry.block, slot, layer, head));
                }
            }
        }
        out
    }

    /// Finished groups' output streams, ordered by group id.
    pub fn finished_outputs(&self) -> Vec<(GroupId, Vec<Vec<TokenId>>)> {
        self.groups
            .values()
            .filter(|g| g.is_finished())
            .map(|g| (g.id, g.outputs()))
            .collect()
    }
}

/// Deterministic token stream for prompts and prefixes.
pub fn synth_tokens(seed: u64, len: usize, vocab_size: usize) -> Vec<TokenId> {
    let mut rng = SplitMix64::new(seed);
    (0..len)
        .map(|_| TokenId(rng.next_below(vocab_size as u64) as u32))
        .collect()
}

/// Drive a single group to completion on a dedicated engine, returning its
/// output streams. Used by tests and the sharing oracles.
pub fn run_single_group(
    cfg: &EngineConfig,
    prompt: Vec<TokenId>,
    decoding: DecodingConfig,
    sampling_seed: u64,
) -> Vec<Vec<TokenId>> {
    let mut engine = Engine::new(cfg.clone());
    let gid = engine
        .submit(0.0, prompt, decoding, sampling_seed)
        .expect("submit");
    while engine.has_pending() {
        engine.step().expect("step").expect("pending work");
    }
    engine.group(gid).outputs()
}
