//! Discrete-event serving simulation.
//!
//! A trace replays through the selected engine; every iteration genuinely
//! computes tokens through the toy model, then virtual time advances by the
//! cost model. The simulator charges but never sleeps.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::baselines::BaselineEngine;
use crate::config::{AllocatorKind, EngineConfig, PreemptionPolicy};
use crate::engine::{synth_tokens, Engine, EngineError, IterationStats, PROMPT_STREAM_SALT};
use crate::types::{DecodingKind, TokenId};
use crate::workload::TraceRecord;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    BadParameter(String),
}

/// Per-request outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RequestRecord {
    pub index: usize,
    pub arrival_time: f64,
    pub prompt_len: usize,
    pub output_len: usize,
    pub decoding: String,
    pub rejected: bool,
    pub finish_time: Option<f64>,
    pub latency: Option<f64>,
    /// End-to-end latency divided by output length.
    pub normalized_latency: Option<f64>,
}

/// One sampled iteration boundary.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TickRecord {
    pub time: f64,
    /// Duration of the iteration that ended at `time`.
    pub span: f64,
    pub prompt_seqs: usize,
    pub decode_seqs: usize,
    pub running_groups: usize,
    pub waiting_groups: usize,
    pub preempted_groups: usize,
    pub token_states: usize,
    pub reserved: usize,
    pub internal_frag: usize,
    pub external_frag: usize,
    pub free_slots: usize,
    pub allocated_slots: usize,
    pub cum_cow_copies: u64,
    pub cum_swap_blocks: u64,
    pub cum_swap_bytes: u64,
    pub cum_recompute_tokens: u64,
    pub cum_tokens_generated: u64,
}

/// One scheduling decision, stamped at the end of its iteration.
#[derive(Debug, Clone, Serialize)]
pub struct SimEvent {
    pub time: f64,
    pub event: &'static str,
    pub request: usize,
}

/// Everything a run produced.
pub struct SimMetrics {
    pub allocator: AllocatorKind,
    pub policy: PreemptionPolicy,
    pub block_size: usize,
    pub total_slots: usize,
    pub requests: Vec<RequestRecord>,
    pub ticks: Vec<TickRecord>,
    /// Final token streams per request index (empty for rejected).
    pub outputs: Vec<Vec<Vec<TokenId>>>,
    /// Scheduling decisions in time order.
    pub events: Vec<SimEvent>,
    pub duration: f64,
}

impl SimMetrics {
    /// Mean of per-request end-to-end latency over output length.
    pub fn mean_normalized_latency(&self) -> f64 {
        let vals: Vec<f64> = self
            .requests
            .iter()
            .filter_map(|r| r.normalized_latency)
            .collect();
        if vals.is_empty() {
            return 0.0;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Time-weighted average of a per-tick quantity.
    fn time_weighted<F: Fn(&TickRecord) -> f64>(&self, f: F) -> f64 {
        let mut total = 0.0;
        let mut weight = 0.0;
        for t in &self.ticks {
            total += f(t) * t.span;
            weight += t.span;
        }
        if weight == 0.0 {
            0.0
        } else {
            total / weight
        }
    }

    /// Time-weighted fraction of all pool slots holding live token states.
    pub fn time_avg_token_fraction(&self) -> f64 {
        let slots = self.total_slots as f64;
        self.time_weighted(|t| t.token_states as f64 / slots)
    }

    /// Time-weighted allocated slots (block or extent footprint).
    pub fn time_avg_allocated_slots(&self) -> f64 {
        self.time_weighted(|t| t.allocated_slots as f64)
    }

    pub fn tokens_generated(&self) -> u64 {
        self.ticks.last().map_or(0, |t| t.cum_tokens_generated)
    }

    pub fn total_cow_copies(&self) -> u64 {
        self.ticks.last().map_or(0, |t| t.cum_cow_copies)
    }

    pub fn total_swap_bytes(&self) -> u64 {
        self.ticks.last().map_or(0, |t| t.cum_swap_bytes)
    }

    pub fn total_recompute_tokens(&self) -> u64 {
        self.ticks.last().map_or(0, |t| t.cum_recompute_tokens)
    }

    pub fn num_rejected(&self) -> usize {
        self.requests.iter().filter(|r| r.rejected).count()
    }

    /// CSV with one row per iteration boundary.
    pub fn write_ticks_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "time,span,prompt_seqs,decode_seqs,running_groups,waiting_groups,preempted_groups,\
             token_states,reserved,internal_frag,external_frag,free_slots,allocated_slots,\
             cum_cow_copies,cum_swap_blocks,cum_swap_bytes,cum_recompute_tokens,cum_tokens_generated"
        )?;
        for t in &self.ticks {
            writeln!(
                f,
                "{:.9},{:.9},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                t.time,
                t.span,
                t.prompt_seqs,
                t.decode_seqs,
                t.running_groups,
                t.waiting_groups,
                t.preempted_groups,
                t.token_states,
                t.reserved,
                t.internal_frag,
                t.external_frag,
                t.free_slots,
                t.allocated_slots,
                t.cum_cow_copies,
                t.cum_swap_blocks,
                t.cum_swap_bytes,
                t.cum_recompute_tokens,
                t.cum_tokens_generated
            )?;
        }
        Ok(())
    }

    /// Scheduling decisions as JSON lines.
    pub fn write_events_jsonl(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::fs::File::create(path)?;
        for e in &self.events {
            serde_json::to_writer(&mut f, e)?;
            writeln!(f)?;
        }
        Ok(())
    }

    /// JSON summary: headline numbers plus per-request records.
    pub fn write_summary_json(&self, path: &Path) -> Result<(), SimError> {
        let summary = serde_json::json!({
            "allocator": self.allocator.label(),
            "policy": self.policy.label(),
            "block_size": self.block_size,
            "total_slots": self.total_slots,
            "duration": self.duration,
            "requests": self.requests,
            "num_rejected": self.num_rejected(),
            "mean_normalized_latency": self.mean_normalized_latency(),
            "time_avg_token_fraction": self.time_avg_token_fraction(),
            "time_avg_allocated_slots": self.time_avg_allocated_slots(),
            "tokens_generated": self.tokens_generated(),
            "cow_copies": self.total_cow_copies(),
            "swap_bytes": self.total_swap_bytes(),
            "recompute_tokens": self.total_recompute_tokens(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }
}

impl From<serde_json::Error> for SimError {
    fn from(e: serde_json::Error) -> Self {
        SimError::BadParameter(e.to_string())
    }
}

fn decoding_label(kind: DecodingKind) -> String {
    match kind {
        DecodingKind::Greedy => "greedy".into(),
        DecodingKind::Sample { n, .. } => format!("sample{n}"),
        DecodingKind::Beam { k } => format!("beam{k}"),
    }
}

/// Prompt tokens for one trace record under this engine config: the shared
/// prefix (when configured) followed by the request's own stream.
pub fn prompt_for_record(cfg: &EngineConfig, record: &TraceRecord) -> Vec<TokenId> {
    let mut prompt = if cfg.shared_prefix_len > 0 {
        synth_tokens(
            cfg.prompt_seed ^ crate::engine::PREFIX_STREAM_SALT,
            cfg.shared_prefix_len,
            cfg.model.vocab_size,
        )
    } else {
        Vec::new()
    };
    prompt.extend(synth_tokens(
        record.seed ^ PROMPT_STREAM_SALT,
        record.prompt_len,
        cfg.model.vocab_size,
    ));
    prompt
}

fn iteration_cost(cfg: &EngineConfig, stats: &IterationStats) -> f64 {
    let cost = &cfg.cost;
    cost.c0
        + cost.c_prompt * stats.prompt_tokens as f64
        + cost.c_decode * stats.decode_tokens as f64
        + cost.c_kv_read * (stats.kv_positions_read + stats.copy_positions) as f64
        + cost.swap_cost(
            stats.swap_out_blocks + stats.swap_in_blocks,
            cfg.block_size,
            &cfg.model,
        )
}

/// Replay a trace to quiescence. Deterministic given the config and trace.
pub fn run_simulation(trace: &[TraceRecord], cfg: &EngineConfig) -> Result<SimMetrics, SimError> {
    match cfg.allocator {
        AllocatorKind::Paged => run_paged(trace, cfg),
        _ => run_baseline(trace, cfg),
    }
}

struct RunState {
    now: f64,
    next: usize,
    requests: Vec<RequestRecord>,
    outputs: Vec<Vec<Vec<TokenId>>>,
    ticks: Vec<TickRecord>,
    events: Vec<SimEvent>,
    cum_cow: u64,
    cum_swap_blocks: u64,
    cum_swap_bytes: u64,
    cum_recompute: u64,
    cum_tokens: u64,
    /// Request index per engine-assigned group id (dense, same order).
    group_to_request: Vec<usize>,
}

impl RunState {
    fn new(n: usize) -> Self {
        Self {
            now: 0.0,
            next: 0,
            requests: Vec::with_capacity(n),
            outputs: vec![Vec::new(); n],
            ticks: Vec::new(),
            events: Vec::new(),
            cum_cow: 0,
            cum_swap_blocks: 0,
            cum_swap_bytes: 0,
            cum_recompute: 0,
            cum_tokens: 0,
            group_to_request: Vec::with_capacity(n),
        }
    }

    fn absorb(&mut self, cfg: &EngineConfig, stats: &IterationStats) -> f64 {
        let span = iteration_cost(cfg, stats);
        self.now += span;
        self.cum_cow += stats.cow_copies as u64;
        let swap_blocks = (stats.swap_out_blocks + stats.swap_in_blocks) as u64;
        self.cum_swap_blocks += swap_blocks;
        self.cum_swap_bytes +=
            swap_blocks * (cfg.block_size * cfg.cost.bytes_per_token_kv(&cfg.model)) as u64;
        self.cum_recompute += stats.recompute_tokens as u64;
        self.cum_tokens += stats.tokens_generated as u64;
        span
    }

    fn stamp_finishes(&mut self, stats: &IterationStats) {
        for gid in &stats.finished {
            let idx = self.group_to_request[gid.0 as usize];
            let r = &mut self.requests[idx];
            r.finish_time = Some(self.now);
            let latency = self.now - r.arrival_time;
            r.latency = Some(latency);
            r.normalized_latency = Some(latency / r.output_len as f64);
        }
    }

    fn record_events(&mut self, stats: &IterationStats) {
        let req = |gid: &crate::types::GroupId| self.group_to_request[gid.0 as usize];
        let mut push = Vec::new();
        for g in &stats.admitted {
            push.push(("admit", req(g)));
        }
        for g in &stats.resumed {
            push.push(("resume", req(g)));
        }
        for p in &stats.preempted {
            let kind = match p.policy {
                PreemptionPolicy::Swap => "preempt_swap",
                PreemptionPolicy::Recompute => "preempt_recompute",
            };
            push.push((kind, req(&p.group)));
        }
        for g in &stats.finished {
            push.push(("finish", req(g)));
        }
        for (event, request) in push {
            self.events.push(SimEvent {
                time: self.now,
                event,
                request,
            });
        }
    }
}

fn run_paged(trace: &[TraceRecord], cfg: &EngineConfig) -> Result<SimMetrics, SimError> {
    let mut engine = Engine::new(cfg.clone());
    let mut st = RunState::new(trace.len());

    while st.next < trace.len() || engine.has_pending() {
        if !engine.has_pending() && st.next < trace.len() {
            st.now = st.now.max(trace[st.next].arrival_time);
        }
        while st.next < trace.len() && trace[st.next].arrival_time <= st.now {
            let record = &trace[st.next];
            let prompt = prompt_for_record(cfg, record);
            let result = engine.submit(record.arrival_time, prompt, record.decoding, record.seed);
            let rejected = result.is_err();
            if let Ok(gid) = result {
                while st.group_to_request.len() <= gid.0 as usize {
                    st.group_to_request.push(usize::MAX);
                }
                st.group_to_request[gid.0 as usize] = st.next;
            } else {
                st.events.push(SimEvent {
                    time: st.now,
                    event: "reject",
                    request: st.next,
                });
            }
            st.requests.push(RequestRecord {
                index: st.next,
                arrival_time: record.arrival_time,
                prompt_len: record.prompt_len,
                output_len: record.output_len,
                decoding: decoding_label(record.decoding.kind),
                rejected,
                finish_time: None,
                latency: None,
                normalized_latency: None,
            });
            st.next += 1;
        }
        let Some(stats) = engine.step()? else { continue };
        let span = st.absorb(cfg, &stats);
        st.stamp_finishes(&stats);
        st.record_events(&stats);
        for gid in &stats.finished {
            let idx = st.group_to_request[gid.0 as usize];
            st.outputs[idx] = engine.group(*gid).outputs();
        }
        let waste = engine.manager().waste_breakdown();
        let free_blocks = engine.manager().gpu_free_blocks();
        st.ticks.push(TickRecord {
            time: st.now,
            span,
            prompt_seqs: stats.prompt_seqs,
            decode_seqs: stats.decode_seqs,
            running_groups: engine.scheduler().num_running(),
            waiting_groups: engine.scheduler().num_waiting(),
            preempted_groups: engine.scheduler().num_preempted(),
            token_states: waste.token_states,
            reserved: waste.reserved,
            internal_frag: waste.internal_frag,
            external_frag: waste.external_frag,
            free_slots: free_blocks * cfg.block_size,
            allocated_slots: engine.manager().gpu_blocks_in_use() * cfg.block_size,
            cum_cow_copies: st.cum_cow,
            cum_swap_blocks: st.cum_swap_blocks,
            cum_swap_bytes: st.cum_swap_bytes,
            cum_recompute_tokens: st.cum_recompute,
            cum_tokens_generated: st.cum_tokens,
        });
    }

    Ok(SimMetrics {
        allocator: cfg.allocator,
        policy: cfg.policy,
        block_size: cfg.block_size,
        total_slots: cfg.gpu_pool_slots(),
        requests: st.requests,
        ticks: st.ticks,
        outputs: st.outputs,
        events: st.events,
        duration: st.now,
    })
}

fn run_baseline(trace: &[TraceRecord], cfg: &EngineConfig) -> Result<SimMetrics, SimError> {
    let mut engine = BaselineEngine::new(cfg.clone());
    let mut st = RunState::new(trace.len());

    while st.next < trace.len() || engine.has_pending() {
        if !engine.has_pending() && st.next < trace.len() {
            st.now = st.now.max(trace[st.next].arrival_time);
        }
        while st.next < trace.len() && trace[st.next].arrival_time <= st.now {
            let record = &trace[st.next];
            let prompt = prompt_for_record(cfg, record);
            let result = engine.submit(record.arrival_time, prompt, record.decoding, record.seed);
            let rejected = result.is_err();
            if let Ok(gid) = result {
                while st.group_to_request.len() <= gid.0 as usize {
                    st.group_to_request.push(usize::MAX);
                }
                st.group_to_request[gid.0 as usize] = st.next;
            } else {
                st.events.push(SimEvent {
                    time: st.now,
                    event: "reject",
                    request: st.next,
                });
            }
            st.requests.push(RequestRecord {
                index: st.next,
                arrival_time: record.arrival_time,
                prompt_len: record.prompt_len,
                output_len: record.output_len,
                decoding: decoding_label(record.decoding.kind),
                rejected,
                finish_time: None,
                latency: None,
                normalized_latency: None,
            });
            st.next += 1;
        }
        let Some(stats) = engine.step() else { continue };
        let span = st.absorb(cfg, &stats);
        st.stamp_finishes(&stats);
        st.record_events(&stats);
        for gid in &stats.finished {
            let idx = st.group_to_request[gid.0 as usize];
            st.outputs[idx] = engine.group_outputs(*gid);
        }
        let waste = engine.waste_breakdown();
        let allocated = engine.allocated_slots();
        st.ticks.push(TickRecord {
            time: st.now,
            span,
            prompt_seqs: stats.prompt_seqs,
            decode_seqs: stats.decode_seqs,
            running_groups: engine.num_running(),
            waiting_groups: engine.num_waiting(),
            preempted_groups: 0,
            token_states: waste.token_states,
            reserved: waste.reserved,
            internal_frag: waste.internal_frag,
            external_frag: waste.external_frag,
            free_slots: cfg.gpu_pool_slots() - allocated,
            allocated_slots: allocated,
            cum_cow_copies: st.cum_cow,
            cum_swap_blocks: st.cum_swap_blocks,
            cum_swap_bytes: st.cum_swap_bytes,
            cum_recompute_tokens: st.cum_recompute,
            cum_tokens_generated: st.cum_tokens,
        });
    }

    Ok(SimMetrics {
        allocator: cfg.allocator,
        policy: cfg.policy,
        block_size: cfg.block_size,
        total_slots: cfg.gpu_pool_slots(),
        requests: st.requests,
        ticks: st.ticks,
        outputs: st.outputs,
        events: st.events,
        duration: st.now,
    })
}

/// Fraction of blocks saved by sharing: a sharing-enabled run against its
/// sharing-disabled twin over the same trace, comparing time-averaged
/// allocated footprint.
pub fn memory_saving_from_sharing(with: &SimMetrics, without: &SimMetrics) -> f64 {
    let w = with.time_avg_allocated_slots();
    let wo = without.time_avg_allocated_slots();
    if wo == 0.0 {
        0.0
    } else {
        (wo - w) / wo
    }
}

/// Sweepable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    BlockSize,
    RequestRate,
    Allocator,
    Policy,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "block_size" => Ok(SweepParam::BlockSize),
            "request_rate" => Ok(SweepParam::RequestRate),
            "allocator" => Ok(SweepParam::Allocator),
            "policy" => Ok(SweepParam::Policy),
            other => Err(format!(
                "unknown sweep parameter '{other}' \
                 (expected block_size|request_rate|allocator|policy)"
            )),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepParam::BlockSize => "block_size",
            SweepParam::RequestRate => "request_rate",
            SweepParam::Allocator => "allocator",
            SweepParam::Policy => "policy",
        }
    }
}

/// One run of a sweep: the configured value and its headline metrics.
pub struct SweepRow {
    pub value: String,
    pub metrics: SimMetrics,
}

/// Run the same trace under each value of one parameter. Block-size sweeps
/// hold the pool's slot capacity constant; rate sweeps rescale arrival
/// times (a rate-r Poisson process rescaled by r/r' has rate r').
pub fn sweep(
    param: SweepParam,
    values: &[String],
    trace: &[TraceRecord],
    base: &EngineConfig,
) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(SimError::BadParameter("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for value in values {
        let (cfg, trace_owned);
        let trace_ref: &[TraceRecord];
        match param {
            SweepParam::BlockSize => {
                let b: usize = value
                    .parse()
                    .map_err(|_| SimError::BadParameter(format!("bad block size '{value}'")))?;
                if b == 0 {
                    return Err(SimError::BadParameter("block size must be >= 1".into()));
                }
                cfg = base.with_block_size_same_capacity(b);
                trace_ref = trace;
            }
            SweepParam::RequestRate => {
                let rate: f64 = value
                    .parse()
                    .map_err(|_| SimError::BadParameter(format!("bad rate '{value}'")))?;
                if rate <= 0.0 {
                    return Err(SimError::BadParameter("rate must be positive".into()));
                }
                let last = trace.last().map_or(0.0, |r| r.arrival_time);
                let base_rate = if last > 0.0 { trace.len() as f64 / last } else { 1.0 };
                let scale = base_rate / rate;
                trace_owned = trace
                    .iter()
                    .map(|r| TraceRecord {
                        arrival_time: r.arrival_time * scale,
                        ..r.clone()
                    })
                    .collect::<Vec<_>>();
                cfg = base.clone();
                trace_ref = &trace_owned;
            }
            SweepParam::Allocator => {
                let mut c = base.clone();
                c.allocator = AllocatorKind::parse(value).map_err(SimError::BadParameter)?;
                cfg = c;
                trace_ref = trace;
            }
            SweepParam::Policy => {
                let mut c = base.clone();
                c.policy = PreemptionPolicy::parse(value).map_err(SimError::BadParameter)?;
                cfg = c;
                trace_ref = trace;
            }
        }
        let metrics = run_simulation(trace_ref, &cfg)?;
        rows.push(SweepRow {
            value: value.clone(),
            metrics,
        });
    }
    Ok(rows)
}

/// Tidy CSV: one row per (value, metric).
pub fn write_sweep_csv(param: SweepParam, rows: &[SweepRow], path: &Path) -> Result<(), SimError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "param,value,metric,measure")?;
    let p = param.label();
    for row in rows {
        let m = &row.metrics;
        let pairs: Vec<(&str, f64)> = vec![
            ("mean_normalized_latency", m.mean_normalized_latency()),
            ("time_avg_token_fraction", m.time_avg_token_fraction()),
            ("time_avg_allocated_slots", m.time_avg_allocated_slots()),
            ("tokens_generated", m.tokens_generated() as f64),
            ("cow_copies", m.total_cow_copies() as f64),
            ("swap_bytes", m.total_swap_bytes() as f64),
            ("recompute_tokens", m.total_recompute_tokens() as f64),
            ("num_rejected", m.num_rejected() as f64),
            ("duration", m.duration),
        ];
        for (metric, measure) in pairs {
            writeln!(f, "{p},{},{metric},{measure}", row.value)?;
        }
    }
    Ok(())
}
