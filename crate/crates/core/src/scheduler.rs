//! Iteration-level FCFS scheduler with admission control and all-or-nothing
//! gang preemption.
//!
//! Each call to [`Scheduler::schedule`] produces one [`IterationPlan`]:
//! running groups are guaranteed an append slot per sequence (preempting the
//! latest-arrived groups until feasible), previously preempted groups are
//! resumed earliest-first, and new requests are admitted FCFS while no
//! preempted work is outstanding. Prompt-phase and decode-phase groups mix
//! in the same iteration.

use std::collections::BTreeMap;

use crate::block_manager::{AppendOutcome, BlockManager, CowDirective, SwapDirective, TableId};
use crate::config::PreemptionPolicy;
use crate::engine::Group;
use crate::types::{GroupId, SeqStatus};

/// Why a group entered the prompt phase this iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// Freshly admitted: prefill over the prompt (minus any attached
    /// shared prefix).
    Fresh,
    /// Recompute resume: prefill over prompt plus everything generated.
    Resume,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreemptionRecord {
    pub group: GroupId,
    pub policy: PreemptionPolicy,
    /// Blocks swapped out or freed.
    pub blocks: usize,
}

/// Work for one iteration, in execution order: copies first, then prompt
/// phase, then decode phase.
#[derive(Debug, Default)]
pub struct IterationPlan {
    pub prompt_groups: Vec<(GroupId, PromptKind)>,
    pub decode_groups: Vec<GroupId>,
    /// Swap-outs (from preemption) followed by swap-ins (from resume).
    pub swap_directives: Vec<SwapDirective>,
    pub cow_directives: Vec<CowDirective>,
    pub preempted: Vec<PreemptionRecord>,
    /// Groups admitted from the waiting queue this iteration.
    pub admitted: Vec<GroupId>,
    /// Previously preempted groups brought back this iteration.
    pub resumed: Vec<GroupId>,
}

pub struct Scheduler {
    policy: PreemptionPolicy,
    max_batched_tokens: Option<usize>,
    waiting: Vec<GroupId>,
    running: Vec<GroupId>,
    swapped: Vec<GroupId>,
    recompute: Vec<GroupId>,
}

impl Scheduler {
    pub fn new(policy: PreemptionPolicy, max_batched_tokens: Option<usize>) -> Self {
        Self {
            policy,
            max_batched_tokens,
            waiting: Vec::new(),
            running: Vec::new(),
            swapped: Vec::new(),
            recompute: Vec::new(),
        }
    }

    pub fn policy(&self) -> PreemptionPolicy {
        self.policy
    }

    pub fn enqueue(&mut self, group: GroupId) {
        self.waiting.push(group);
    }

    pub fn num_waiting(&self) -> usize {
        self.waiting.len()
    }

    pub fn num_running(&self) -> usize {
        self.running.len()
    }

    /// Swapped or recompute-preempted groups awaiting resume.
    pub fn num_preempted(&self) -> usize {
        self.swapped.len() + self.recompute.len()
    }

    pub fn has_pending(&self) -> bool {
        !(self.waiting.is_empty()
            && self.running.is_empty()
            && self.swapped.is_empty()
            && self.recompute.is_empty())
    }

    /// New requests are accepted only while no preempted group is waiting
    /// to be resumed.
    pub fn accepting_new(&self) -> bool {
        self.swapped.is_empty() && self.recompute.is_empty()
    }

    pub fn remove_finished(&mut self, group: GroupId) {
        self.running.retain(|&g| g != group);
    }

    /// Build the plan for one iteration. `force_preempt` preempts the
    /// latest running group up front regardless of memory pressure.
    pub fn schedule(
        &mut self,
        mgr: &mut BlockManager,
        groups: &mut BTreeMap<GroupId, Group>,
        force_preempt: bool,
    ) -> IterationPlan {
        let mut plan = IterationPlan::default();

        // A force-preempted group sits out the rest of this iteration;
        // resuming it in the same plan would make the eviction a no-op.
        let mut hold_out: Option<GroupId> = None;
        if force_preempt {
            if let Some(victim) = self.latest_running(groups) {
                self.preempt(victim, mgr, groups, &mut plan);
                hold_out = Some(victim);
            }
        }

        // 1. Every running sequence must be able to append one slot this
        // iteration; evict the latest arrivals until that holds.
        loop {
            let need = self.total_append_need(mgr, groups);
            if need <= mgr.gpu_free_blocks() {
                break;
            }
            let victim = self
                .latest_running(groups)
                .expect("append pressure implies a running group");
            self.preempt(victim, mgr, groups, &mut plan);
        }

        // 2. Resume preempted groups, earliest arrival first. Swapped
        // groups rejoin the decode batch; recompute groups re-enter the
        // prompt phase over their full token history.
        while let Some(gid) = self.earliest(&self.swapped, groups, hold_out) {
            let group = &groups[&gid];
            let tables = group.table_ids();
            let swap_blocks = mgr.swap_in_block_count(&tables);
            let own_appends = group.append_need(mgr);
            let others = self.total_append_need(mgr, groups);
            if mgr.gpu_free_blocks()
                < swap_blocks + own_appends + others + mgr.watermark()
            {
                break;
            }
            let directive = mgr.swap_in(&tables).expect("space checked above");
            plan.swap_directives.push(directive);
            let group = groups.get_mut(&gid).unwrap();
            for seq in &mut group.seqs {
                seq.set_status(SeqStatus::Running);
            }
            self.swapped.retain(|&g| g != gid);
            self.running.push(gid);
            plan.resumed.push(gid);
        }

        let mut batch_tokens = self.decode_token_estimate(groups);
        while let Some(gid) = self.earliest(&self.recompute, groups, hold_out) {
            let group = &groups[&gid];
            let total_blocks: usize = group
                .seqs
                .iter()
                .map(|s| mgr.blocks_needed(s.total_len()))
                .sum();
            let prompt_tokens: usize = group.seqs.iter().map(|s| s.total_len()).sum();
            let others = self.total_append_need(mgr, groups);
            if mgr.gpu_free_blocks() < total_blocks + others + mgr.watermark() {
                break;
            }
            if let Some(cap) = self.max_batched_tokens {
                if batch_tokens + prompt_tokens > cap {
                    break;
                }
            }
            let group = groups.get_mut(&gid).unwrap();
            for seq in &mut group.seqs {
                seq.set_status(SeqStatus::Waiting);
                let table = mgr.allocate(seq.total_len()).expect("space checked above");
                seq.block_table = Some(table);
                seq.set_status(SeqStatus::Running);
            }
            batch_tokens += prompt_tokens;
            self.recompute.retain(|&g| g != gid);
            self.running.push(gid);
            plan.resumed.push(gid);
            plan.prompt_groups.push((gid, PromptKind::Resume));
        }

        // 3. FCFS admission while nothing preempted is outstanding.
        while self.accepting_new() {
            let Some(gid) = self.earliest(&self.waiting, groups, None) else {
                break;
            };
            let group = &groups[&gid];
            let prompt_len = group.prompt.len();
            let blocks = match group.attach {
                Some((_, shared_len)) => mgr.blocks_needed(prompt_len - shared_len),
                None => mgr.blocks_needed(prompt_len),
            };
            let others = self.total_append_need(mgr, groups);
            if mgr.gpu_free_blocks() < blocks + others + mgr.watermark() {
                break;
            }
            if let Some(cap) = self.max_batched_tokens {
                if batch_tokens + prompt_len > cap {
                    break;
                }
            }
            let group = groups.get_mut(&gid).unwrap();
            let table = match group.attach {
                Some((reg_table, _)) => mgr
                    .attach_prefix(reg_table, prompt_len)
                    .expect("space checked above"),
                None => mgr.allocate(prompt_len).expect("space checked above"),
            };
            let root = &mut group.seqs[0];
            root.block_table = Some(table);
            root.set_status(SeqStatus::Running);
            batch_tokens += prompt_len;
            self.waiting.retain(|&g| g != gid);
            self.running.push(gid);
            plan.admitted.push(gid);
            plan.prompt_groups.push((gid, PromptKind::Fresh));
        }

        // 4. Provision one slot per decoding sequence. Feasibility was
        // checked above, so allocation cannot fail here.
        self.running.sort_by_key(|gid| (ordered(&groups[gid]), *gid));
        for &gid in &self.running {
            if plan.prompt_groups.iter().any(|(g, _)| *g == gid) {
                continue;
            }
            let group = groups.get_mut(&gid).unwrap();
            for seq in &mut group.seqs {
                let table = seq.block_table.expect("running sequences hold tables");
                match mgr.append_slot(table).expect("append feasibility was ensured") {
                    AppendOutcome::Cow(directive) => plan.cow_directives.push(directive),
                    AppendOutcome::InPlace | AppendOutcome::NewBlock(_) => {}
                }
            }
            plan.decode_groups.push(gid);
        }

        plan
    }

    fn preempt(
        &mut self,
        victim: GroupId,
        mgr: &mut BlockManager,
        groups: &mut BTreeMap<GroupId, Group>,
        plan: &mut IterationPlan,
    ) {
        self.running.retain(|&g| g != victim);
        let group = groups.get_mut(&victim).unwrap();
        let tables = group.table_ids();
        match self.policy {
            PreemptionPolicy::Swap => {
                let directive = mgr.swap_out(&tables).unwrap_or_else(|e| {
                    panic!("swap-out of group {victim:?} failed: {e}; cpu pool too small")
                });
                let blocks = directive.pairs.len();
                for seq in &mut group.seqs {
                    seq.set_status(SeqStatus::SwappedOut);
                }
                plan.swap_directives.push(directive);
                self.swapped.push(victim);
                plan.preempted.push(PreemptionRecord {
                    group: victim,
                    policy: PreemptionPolicy::Swap,
                    blocks,
                });
            }
            PreemptionPolicy::Recompute => {
                let blocks = mgr.free_for_recompute(&tables);
                for seq in &mut group.seqs {
                    seq.block_table = None;
                    seq.set_status(SeqStatus::PreemptedForRecompute);
                }
                self.recompute.push(victim);
                plan.preempted.push(PreemptionRecord {
                    group: victim,
                    policy: PreemptionPolicy::Recompute,
                    blocks,
                });
            }
        }
    }

    /// Blocks the current running set needs so every sequence can append
    /// one slot. Conservative: resolved copy-on-writes may need fewer.
    fn total_append_need(
        &self,
        mgr: &BlockManager,
        groups: &BTreeMap<GroupId, Group>,
    ) -> usize {
        self.running.iter().map(|gid| groups[gid].append_need(mgr)).sum()
    }

    fn decode_token_estimate(&self, groups: &BTreeMap<GroupId, Group>) -> usize {
        self.running.iter().map(|gid| groups[gid].seqs.len()).sum()
    }

    /// Latest-arrived running group (ties: higher id), the preemption
    /// victim order.
    fn latest_running(&self, groups: &BTreeMap<GroupId, Group>) -> Option<GroupId> {
        self.running
            .iter()
            .copied()
            .max_by(|a, b| {
                let (ga, gb) = (&groups[a], &groups[b]);
                ga.arrival_time
                    .partial_cmp(&gb.arrival_time)
                    .unwrap()
                    .then(a.cmp(b))
            })
    }

    /// Earliest-arrived group in a queue (ties: lower id), skipping a
    /// group held out of this iteration.
    fn earliest(
        &self,
        queue: &[GroupId],
        groups: &BTreeMap<GroupId, Group>,
        hold_out: Option<GroupId>,
    ) -> Option<GroupId> {
        queue
            .iter()
            .copied()
            .filter(|g| Some(*g) != hold_out)
            .min_by(|a, b| {
                let (ga, gb) = (&groups[a], &groups[b]);
                ga.arrival_time
                    .partial_cmp(&gb.arrival_time)
                    .unwrap()
                    .then(a.cmp(b))
            })
    }
}

fn ordered(group: &Group) -> OrderedArrival {
    OrderedArrival(group.arrival_time)
}

/// Arrival times are finite by construction, so ordering is total.
#[derive(PartialEq, PartialOrd)]
struct OrderedArrival(f64);

impl Eq for OrderedArrival {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrderedArrival {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("arrival times are finite")
    }
}

/// Table ids of every sequence in a group that currently holds one.
pub fn group_tables(group: &Group) -> Vec<TableId> {
    group.seqs.iter().filter_map(|s| s.block_table).collect()
}
